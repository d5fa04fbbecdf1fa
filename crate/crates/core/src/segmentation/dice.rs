//! Dice similarity per class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::LabelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceTable {
    /// Every non-background class id below `num_classes`.
    pub per_class: BTreeMap<u16, f64>,
    /// Mean over the non-background classes present in the ground truth. When
    /// the ground truth has no foreground, the mean over all `per_class`
    /// entries (1.0 when there are none).
    pub mean: f64,
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both are empty.
pub fn dice_coefficient(intersection: usize, pred: usize, gt: usize) -> f64 {
    if pred + gt == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (pred + gt) as f64
    }
}

pub fn dice_score(pred: &LabelMap, gt: &LabelMap) -> Result<DiceTable> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let c = pred.num_classes().max(gt.num_classes());
    let (mut inter, mut np, mut ng) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: BTreeMap<u16, f64> = (1..c)
        .map(|k| (k as u16, dice_coefficient(inter[k], np[k], ng[k])))
        .collect();
    let present: Vec<f64> = (1..c).filter(|&k| ng[k] > 0).map(|k| per_class[&(k as u16)]).collect();
    let mean = if !present.is_empty() {
        present.iter().sum::<f64>() / present.len() as f64
    } else if !per_class.is_empty() {
        per_class.values().sum::<f64>() / per_class.len() as f64
    } else {
        1.0
    };
    Ok(DiceTable { per_class, mean })
}

/// Mean of per-case means.
pub fn mean_dice(tables: &[DiceTable]) -> f64 {
    if tables.is_empty() {
        return f64::NAN;
    }
    tables.iter().map(|t| t.mean).sum::<f64>() / tables.len() as f64
}

/// Per-class mean over cases.
pub fn mean_per_class(tables: &[DiceTable]) -> BTreeMap<u16, f64> {
    let mut sums: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for t in tables {
        for (&k, &d) in &t.per_class {
            let e = sums.entry(k).or_default();
            e.0 += d;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(labels: Vec<u16>, c: usize) -> LabelMap {
        let n = labels.len();
        LabelMap::new([1, 1, n], labels, c).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let a = map(vec![0, 1, 2, 2, 1, 0], 3);
        let t = dice_score(&a, &a).unwrap();
        assert!(t.per_class.values().all(|&d| d == 1.0));
        assert_eq!(t.mean, 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let t = dice_score(&map(vec![1, 1, 0, 0], 2), &map(vec![0, 0, 1, 1], 2)).unwrap();
        assert_eq!(t.per_class[&1], 0.0);
        assert_eq!(t.mean, 0.0);
    }

    #[test]
    fn half_overlap_scores_one_half() {
        let mut p = vec![0u16; 300];
        let mut g = vec![0u16; 300];
        p[..100].iter_mut().for_each(|x| *x = 1);
        g[50..150].iter_mut().for_each(|x| *x = 1);
        let t = dice_score(&map(p, 2), &map(g, 2)).unwrap();
        assert_eq!(t.per_class[&1], 0.5);
    }

    #[test]
    fn empty_conventions() {
        // class 2 absent from both → 1; class 1 present in gt only → 0
        let t = dice_score(&map(vec![0, 0, 0], 3), &map(vec![1, 0, 0], 3)).unwrap();
        assert_eq!(t.per_class[&2], 1.0);
        assert_eq!(t.per_class[&1], 0.0);
        // mean only counts classes present in the ground truth
        assert_eq!(t.mean, 0.0);
        let t = dice_score(&map(vec![2, 1, 0], 3), &map(vec![2, 1, 0], 3)).unwrap();
        assert_eq!(t.mean, 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = LabelMap::new([1, 1, 4], vec![0; 4], 2).unwrap();
        let b = LabelMap::new([1, 2, 2], vec![0; 4], 2).unwrap();
        assert!(dice_score(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn per_class_dice_is_symmetric(p in proptest::collection::vec(0u16..4, 64), g in proptest::collection::vec(0u16..4, 64)) {
            let (a, b) = (map(p.clone(), 4), map(g.clone(), 4));
            let ab = dice_score(&a, &b).unwrap();
            let ba = dice_score(&b, &a).unwrap();
            prop_assert_eq!(&ab.per_class, &ba.per_class);
            for d in ab.per_class.values() {
                prop_assert!((0.0..=1.0).contains(d));
            }
            let all_one = ab.per_class.values().all(|&d| d == 1.0);
            prop_assert_eq!(all_one, p == g);
        }
    }
}
