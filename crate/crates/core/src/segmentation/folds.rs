//! Deterministic k-fold assignment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sorts names by `(FNV-1a hash, name)` and deals them round-robin into `k`
/// folds, so folds differ in size by at most one and the assignment depends
/// only on the set of names.
pub fn kfold_assign(names: &[String], k: usize) -> Result<BTreeMap<String, usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut sorted: Vec<&String> = names.iter().collect();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(Error::InvalidArgument("duplicate case names".into()));
    }
    if names.len() < k {
        return Err(Error::InvalidArgument(format!("{} cases cannot fill {k} folds", names.len())));
    }
    sorted.sort_by_key(|n| (fnv1a64(n.as_bytes()), (*n).clone()));
    Ok(sorted.into_iter().enumerate().map(|(i, n)| (n.clone(), i % k)).collect())
}
