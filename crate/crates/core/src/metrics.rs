//! Segmentation and classification metrics: confusion matrices, per-class
//! Dice / pixel F1, quadratic weighted kappa and one-vs-rest ROC AUC.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, IGNORE};

/// Square count matrix, rows = reference, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_pairs(reference: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if reference.len() != predicted.len() {
            return Err(Error::shape("paired labels", reference.len(), predicted.len()));
        }
        let mut cm = Self::new(classes);
        for (&r, &p) in reference.iter().zip(predicted) {
            if r >= classes || p >= classes {
                return Err(Error::InvalidInput(format!("label pair ({r}, {p}) outside {classes} categories")));
            }
            cm.counts[r][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Pixel confusion matrix; pixels ignored in `reference` are skipped.
pub fn confusion_matrix(pred: &LabelMap, reference: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    pred.same_shape(reference)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &r) in pred.data.iter().zip(&reference.data) {
        if r == IGNORE {
            continue;
        }
        for l in [r, p] {
            if usize::from(l) >= classes {
                return Err(Error::InvalidLabel { label: l, classes });
            }
        }
        cm.counts[usize::from(r)][usize::from(p)] += 1;
    }
    Ok(cm)
}

/// How classes with neither reference nor predicted pixels are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbsentClass {
    /// Reported as absent and left out of the mean.
    #[default]
    Exclude,
    /// Scored 0 and included in the mean (per-center report convention).
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub absent: Vec<usize>,
}

pub fn dice_from_confusion(cm: &ConfusionMatrix, mode: AbsentClass) -> Result<DiceReport> {
    let c = cm.classes;
    let mut per_class = Vec::with_capacity(c);
    let mut absent = Vec::new();
    for k in 0..c {
        let tp = cm.counts[k][k];
        let fn_: u64 = cm.counts[k].iter().sum::<u64>() - tp;
        let fp: u64 = (0..c).map(|r| cm.counts[r][k]).sum::<u64>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            absent.push(k);
            per_class.push(match mode {
                AbsentClass::Exclude => None,
                AbsentClass::Zero => Some(0.0),
            });
        } else {
            per_class.push(Some(2.0 * tp as f64 / denom as f64));
        }
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::EmptyInput("no class has reference or predicted pixels".into()));
    }
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(DiceReport { per_class, mean, absent })
}

pub fn dice_scores(pred: &LabelMap, reference: &LabelMap, classes: usize) -> Result<DiceReport> {
    dice_scores_with(pred, reference, classes, AbsentClass::Exclude)
}

pub fn dice_scores_with(
    pred: &LabelMap,
    reference: &LabelMap,
    classes: usize,
    mode: AbsentClass,
) -> Result<DiceReport> {
    dice_from_confusion(&confusion_matrix(pred, reference, classes)?, mode)
}

/// Pixel-level F1; identical to Dice.
pub fn pixel_f1(pred: &LabelMap, reference: &LabelMap, classes: usize) -> Result<DiceReport> {
    dice_scores(pred, reference, classes)
}

/// Cohen's kappa with quadratic weights `(i - j)² / (N - 1)²` and expected
/// counts from the product of the marginals.
pub fn quadratic_weighted_kappa(reference: &[usize], predicted: &[usize], categories: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("no cases to score".into()));
    }
    if categories < 2 {
        return Err(Error::UndefinedKappa);
    }
    let cm = ConfusionMatrix::from_pairs(reference, predicted, categories)?;
    let total = cm.total() as f64;
    let rows: Vec<f64> = cm.counts.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..categories).map(|j| cm.counts.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let norm = ((categories - 1) * (categories - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..categories {
        for j in 0..categories {
            let w = ((i as f64) - (j as f64)).powi(2) / norm;
            observed += w * cm.counts[i][j] as f64;
            expected += w * rows[i] * cols[j] / total;
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedKappa);
    }
    Ok(1.0 - observed / expected)
}

/// Probability that a positive outranks a negative, ties counted one half.
/// `None` without at least one positive and one negative.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // mid-ranks (1-based) over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// One-vs-rest AUC for each class; `scores` holds one row of `classes` scores per case.
pub fn roc_auc_ovr(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<AucReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores vs labels", labels.len(), scores.len()));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes) {
        return Err(Error::shape("score row", classes, row.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {l} outside {classes} classes")));
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&s, &pos)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_cases() {
        let a = map(&[0, 1, 2, 1]);
        let cm = confusion_matrix(&a, &a, 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let ign = map(&[IGNORE; 4]);
        assert_eq!(confusion_matrix(&a, &ign, 3).unwrap().total(), 0);
        // hand count: ref [0,0,1,2], pred [0,1,1,0]
        let cm = confusion_matrix(&map(&[0, 1, 1, 0]), &map(&[0, 0, 1, 2]), 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
        assert!(confusion_matrix(&map(&[0]), &map(&[0, 1]), 3).is_err());
    }

    #[test]
    fn dice_cases() {
        let r = dice_scores(&map(&[0, 1, 1]), &map(&[0, 1, 1]), 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.absent, vec![2]);
        assert_eq!(r.mean, 1.0);

        let r = dice_scores(&map(&[1, 1, 0, 0]), &map(&[0, 0, 1, 1]), 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);

        // |pred_0| = 2, |ref_0| = 2, overlap 1
        let r = dice_scores(&map(&[0, 0, 1, 1]), &map(&[0, 1, 0, 1]), 2).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));

        let z = dice_scores_with(&map(&[0, 1, 1]), &map(&[0, 1, 1]), 3, AbsentClass::Zero).unwrap();
        assert_eq!(z.per_class[2], Some(0.0));
        assert!((z.mean - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_report_json_shape() {
        let r = dice_scores(&map(&[0, 1]), &map(&[0, 1]), 3).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["per_class"], serde_json::json!([1.0, 1.0, null]));
        assert_eq!(v["absent"], serde_json::json!([2]));
        assert_eq!(v["mean"], serde_json::json!(1.0));
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(quadratic_weighted_kappa(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap(), 1.0);
        let k = quadratic_weighted_kappa(&[0, 0, 3, 3], &[3, 3, 0, 0], 4).unwrap();
        assert!((k + 1.0).abs() < 1e-15);
        assert!(matches!(quadratic_weighted_kappa(&[1, 1], &[1, 1], 4), Err(Error::UndefinedKappa)));
        assert!(quadratic_weighted_kappa(&[], &[], 4).is_err());
        assert!(quadratic_weighted_kappa(&[0, 4], &[0, 1], 4).is_err());
    }

    #[test]
    fn auc_cases() {
        let pos = [true, true, false, false];
        assert_eq!(binary_auc(&[0.9, 0.8, 0.3, 0.1], &pos), Some(1.0));
        assert_eq!(binary_auc(&[0.9, 0.4, 0.6, 0.1], &pos), Some(0.75));
        assert_eq!(binary_auc(&[0.5; 4], &pos), Some(0.5));
        assert_eq!(binary_auc(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn ovr_marks_undefined_classes() {
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]];
        let r = roc_auc_ovr(&scores, &[0, 1], 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.mean, Some(1.0));
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_f1_identical(
            (a, b) in (1usize..50).prop_flat_map(|n| (
                proptest::collection::vec(0u8..5, n),
                proptest::collection::vec(0u8..5, n),
            ))
        ) {
            let (a, b) = (map(&a), map(&b));
            let d1 = dice_scores(&a, &b, 5).unwrap();
            let d2 = dice_scores(&b, &a, 5).unwrap();
            prop_assert_eq!(&d1, &d2);
            prop_assert_eq!(d1, pixel_f1(&a, &b, 5).unwrap());
        }

        #[test]
        fn auc_negation_complements(
            (s, pos) in (2usize..40).prop_flat_map(|n| (
                proptest::collection::vec(-3i32..3, n),
                proptest::collection::vec(any::<bool>(), n),
            ))
        ) {
            let s: Vec<f64> = s.into_iter().map(f64::from).collect();
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            if let (Some(a), Some(b)) = (binary_auc(&s, &pos), binary_auc(&neg, &pos)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn kappa_symmetric_and_bounded(
            (a, b) in (2usize..60).prop_flat_map(|n| (
                proptest::collection::vec(0usize..4, n),
                proptest::collection::vec(0usize..4, n),
            ))
        ) {
            if let (Ok(k1), Ok(k2)) = (quadratic_weighted_kappa(&a, &b, 4), quadratic_weighted_kappa(&b, &a, 4)) {
                prop_assert!((k1 - k2).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k1));
            }
        }
    }
}
