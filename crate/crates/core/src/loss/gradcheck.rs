//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ClassTensor, LabelMap, LogitMap, IGNORE};

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates,
/// with numeric derivatives from central differences of step `epsilon`.
///
/// `f` returns the loss value and its analytic gradient at a point.
pub fn finite_difference_check<F>(f: F, input: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = f(input)?;
    if analytic.len() != input.len() {
        return Err(Error::shape("gradient", input.len(), analytic.len()));
    }
    let mut x = input.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (up, _) = f(&x)?;
        x[i] = orig - epsilon;
        let (down, _) = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Seeded `1 × pixels` logits in `[-3, 3)` with uniform random labels.
pub fn random_instance(seed: u64, pixels: usize, classes: usize) -> (LogitMap, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..pixels * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels = (0..pixels).map(|_| rng.gen_range(0..classes) as u8).collect();
    (
        LogitMap::new(1, pixels, classes, values).expect("valid shape"),
        LabelMap::new(1, pixels, labels).expect("valid shape"),
    )
}

/// Smallest gap between two Lovász errors of the same present class. The
/// Lovász gradient is unique only where this is positive.
pub fn lovasz_error_gap(probs: &ClassTensor, labels: &LabelMap) -> f64 {
    let c = probs.classes;
    let mut gap = f64::INFINITY;
    for class in 0..c {
        if !labels.data.iter().any(|&l| usize::from(l) == class) {
            continue;
        }
        let mut errs: Vec<f64> = labels
            .data
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, &l)| {
                let p = probs.values[i * c + class];
                if usize::from(l) == class {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in errs.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}
