use super::{annotated, check_pixelwise, LossOutput, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{softmax_row, ClassTensor, LabelMap, LogitMap};

/// Categorical cross-entropy on softmax probabilities, averaged over
/// annotated pixels. Optional `class_weights` scale each pixel's term by the
/// weight of its true class.
pub fn cc_loss(logits: &LogitMap, labels: &LabelMap, class_weights: Option<&[f64]>) -> Result<LossOutput> {
    let n = check_pixelwise(logits, labels)?;
    let c = logits.classes;
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::shape("class weights", c, w.len()));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidParameter("class weights must be finite and >= 0".into()));
        }
    }
    let scale = 1.0 / n as f64;
    let mut grad = ClassTensor::zeros(logits.height, logits.width, c);
    let mut probs = vec![0.0; c];
    let mut value = 0.0;
    for (i, k) in annotated(labels) {
        softmax_row(logits.pixel(i), &mut probs);
        let w = class_weights.map_or(1.0, |w| w[k]);
        value -= w * probs[k].max(PROB_FLOOR).ln();
        let g = &mut grad.values[i * c..(i + 1) * c];
        for (j, (gj, &pj)) in g.iter_mut().zip(&probs).enumerate() {
            let y = if j == k { 1.0 } else { 0.0 };
            *gj = w * (pj - y) * scale;
        }
    }
    Ok(LossOutput { value: value * scale, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::gradcheck::{finite_difference_check, random_instance};

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let mut v = vec![0.0; 9];
        for (i, &l) in labels.data.iter().enumerate() {
            v[i * 3 + usize::from(l)] = 40.0;
        }
        let out = cc_loss(&LogitMap::new(1, 3, 3, v).unwrap(), &labels, None).unwrap();
        assert!(out.value <= 1e-9 && out.value >= 0.0);
    }

    #[test]
    fn uniform_over_14_is_ln14() {
        let labels = LabelMap::new(1, 2, vec![3, 11]).unwrap();
        let out = cc_loss(&LogitMap::new(1, 2, 14, vec![0.5; 28]).unwrap(), &labels, None).unwrap();
        assert!((out.value - 2.639_057_329_615_259).abs() < 1e-12);
    }

    #[test]
    fn ignore_pixels_contribute_nothing() {
        let (logits, mut labels) = random_instance(4, 6, 5);
        labels.data[2] = crate::tensor::IGNORE;
        let out = cc_loss(&logits, &labels, None).unwrap();
        assert!(out.grad.pixel(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn errors() {
        let logits = LogitMap::new(1, 2, 3, vec![0.0; 6]).unwrap();
        let all_ignore = LabelMap::filled(1, 2, crate::tensor::IGNORE);
        assert!(matches!(cc_loss(&logits, &all_ignore, None), Err(Error::EmptyInput(_))));
        let wrong = LabelMap::filled(1, 3, 0);
        assert!(matches!(cc_loss(&logits, &wrong, None), Err(Error::InvalidInput(_))));
        let ok = LabelMap::filled(1, 2, 0);
        assert!(cc_loss(&logits, &ok, Some(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (logits, labels) = random_instance(seed, 8, 5);
            let f = |x: &[f64]| {
                let l = LogitMap::new(1, 8, 5, x.to_vec())?;
                cc_loss(&l, &labels, None).map(|o| (o.value, o.grad.values))
            };
            let err = finite_difference_check(f, &logits.values, 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        let (logits, labels) = random_instance(11, 8, 4);
        let w = [0.5, 2.0, 1.0, 3.0];
        let f = |x: &[f64]| {
            let l = LogitMap::new(1, 8, 4, x.to_vec())?;
            cc_loss(&l, &labels, Some(&w)).map(|o| (o.value, o.grad.values))
        };
        assert!(finite_difference_check(f, &logits.values, 1e-5).unwrap() <= 1e-6);
    }
}
