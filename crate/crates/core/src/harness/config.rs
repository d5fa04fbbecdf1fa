//! Layered configuration: built-in default < JSON file < command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Sets a dotted path such as `schedule.epochs`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(part.to_string())
            .or_insert(Value::Object(Map::new()));
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), value);
}

/// Overrides collected from flags, applied last.
#[derive(Debug, Clone, Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, path: &str, value: impl Serialize) -> Result<&mut Self> {
        self.0.push((path.to_string(), serde_json::to_value(value)?));
        Ok(self)
    }

    /// Sets `path` only when `value` is present.
    pub fn opt<T: Serialize>(&mut self, path: &str, value: Option<T>) -> Result<&mut Self> {
        if let Some(v) = value {
            self.set(path, v)?;
        }
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Resolves a configuration of type `T` from its default, an optional JSON
/// file and flag overrides. Unknown keys in the file are rejected.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &Overrides) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layer: Value = serde_json::from_str(&text)?;
        check_known_keys(&value, &layer, "")?;
        merge(&mut value, &layer);
    }
    for (path, v) in &overrides.0 {
        set_path(&mut value, path, v.clone());
    }
    Ok(serde_json::from_value(value)?)
}

fn check_known_keys(defaults: &Value, layer: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(d), Value::Object(l)) = (defaults, layer) else {
        return Ok(());
    };
    for (k, v) in l {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            // optional fields default to null and accept anything
            Some(Value::Null) => {}
            Some(dv) => check_known_keys(dv, v, &path)?,
            None => return Err(Error::InvalidArgument(format!("unknown configuration key `{path}`"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distiller::PretrainConfig;

    #[test]
    fn precedence_is_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"mask_ratio": 0.5, "schedule": {"epochs": 7, "lr0": 0.01}}"#).unwrap();
        let mut o = Overrides::new();
        o.set("schedule.epochs", 3).unwrap();
        let cfg: PretrainConfig = resolve(Some(&file), &o).unwrap();
        assert_eq!(cfg.schedule.epochs, 3);
        assert_eq!(cfg.schedule.lr0, 0.01);
        assert_eq!(cfg.mask_ratio, 0.5);
        assert_eq!(cfg.batch_size, PretrainConfig::default().batch_size);
        let plain: PretrainConfig = resolve(None, &Overrides::new()).unwrap();
        assert_eq!(plain, PretrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"schedule": {"epoch": 7}}"#).unwrap();
        let err = resolve::<PretrainConfig>(Some(&file), &Overrides::new()).unwrap_err();
        assert!(err.to_string().contains("schedule.epoch"));
    }

    #[test]
    fn set_path_builds_nested_objects() {
        let mut v = serde_json::json!({});
        set_path(&mut v, "a.b.c", serde_json::json!(1));
        assert_eq!(v, serde_json::json!({"a": {"b": {"c": 1}}}));
    }
}
