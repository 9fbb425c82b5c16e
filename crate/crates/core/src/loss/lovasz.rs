//! Lovász-softmax: the convex extension of the per-class Jaccard loss,
//! evaluated on per-pixel probability errors.

use std::cmp::Ordering;

use super::{annotated, check_pixelwise, LossOutput};
use crate::error::{Error, Result};
use crate::tensor::{softmax, ClassTensor, LabelMap, LogitMap, ProbMap};

/// Gradient of the Lovász extension of the Jaccard loss at a point whose
/// coordinates are sorted in decreasing order; `gt_sorted[j]` says whether the
/// j-th sorted pixel belongs to the class.
pub fn lovasz_grad_vector(gt_sorted: &[bool]) -> Result<Vec<f64>> {
    let positives = gt_sorted.iter().filter(|&&g| g).count() as f64;
    if positives == 0.0 {
        return Err(Error::EmptyInput("class absent from ground truth".into()));
    }
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut seen_pos, mut seen_neg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            seen_pos += 1.0;
        } else {
            seen_neg += 1.0;
        }
        let intersection = positives - seen_pos;
        let union = positives + seen_neg;
        let jaccard = 1.0 - intersection / union;
        out.push(jaccard - prev);
        prev = jaccard;
    }
    Ok(out)
}

/// Lovász-softmax on probabilities, averaged over the classes present in the
/// ground truth. The gradient is with respect to `probs`.
pub fn lovasz_softmax_loss(probs: &ProbMap, labels: &LabelMap) -> Result<LossOutput> {
    check_pixelwise(probs, labels)?;
    let c = probs.classes;
    let mut present = vec![false; c];
    let pixels: Vec<(usize, usize)> = annotated(labels).collect();
    for &(_, k) in &pixels {
        present[k] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count();
    let mut grad = ClassTensor::zeros(probs.height, probs.width, c);
    let mut value = 0.0;
    let mut errors: Vec<(f64, usize, bool)> = Vec::with_capacity(pixels.len());
    let mut gt_sorted = Vec::with_capacity(pixels.len());
    for class in (0..c).filter(|&k| present[k]) {
        errors.clear();
        errors.extend(pixels.iter().map(|&(i, k)| {
            let p = probs.values[i * c + class];
            if k == class {
                (1.0 - p, i, true)
            } else {
                (p, i, false)
            }
        }));
        // stable: equal errors keep pixel order
        errors.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        gt_sorted.clear();
        gt_sorted.extend(errors.iter().map(|e| e.2));
        let g = lovasz_grad_vector(&gt_sorted)?;
        for (&(err, i, is_gt), &gj) in errors.iter().zip(&g) {
            value += err * gj;
            grad.values[i * c + class] += if is_gt { -gj } else { gj };
        }
    }
    let scale = 1.0 / n_present as f64;
    grad.values.iter_mut().for_each(|v| *v *= scale);
    Ok(LossOutput { value: value * scale, grad })
}

/// Lovász-softmax composed with the softmax; the gradient is with respect to the logits.
pub fn lovasz_softmax_loss_logits(logits: &LogitMap, labels: &LabelMap) -> Result<LossOutput> {
    let probs = softmax(logits)?;
    let LossOutput { value, grad: dprobs } = lovasz_softmax_loss(&probs, labels)?;
    let c = logits.classes;
    let mut grad = ClassTensor::zeros(logits.height, logits.width, c);
    for ((g, dp), p) in grad.values.chunks_exact_mut(c).zip(dprobs.rows()).zip(probs.rows()) {
        let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
        for j in 0..c {
            g[j] = p[j] * (dp[j] - dot);
        }
    }
    Ok(LossOutput { value, grad })
}
