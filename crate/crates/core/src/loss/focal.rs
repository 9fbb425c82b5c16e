use super::{annotated, check_pixelwise, FocalParams, LossOutput, PROB_FLOOR};
use crate::error::Result;
use crate::tensor::{softmax_row, ClassTensor, LabelMap, LogitMap};

/// Focal loss `-α (1 - p)^γ log p` on the true-class probability `p`.
pub fn focal_loss(logits: &LogitMap, labels: &LabelMap, params: FocalParams) -> Result<LossOutput> {
    params.validate()?;
    let n = check_pixelwise(logits, labels)?;
    let FocalParams { alpha, gamma } = params;
    let c = logits.classes;
    let scale = 1.0 / n as f64;
    let mut grad = ClassTensor::zeros(logits.height, logits.width, c);
    let mut probs = vec![0.0; c];
    let mut value = 0.0;
    for (i, k) in annotated(labels) {
        softmax_row(logits.pixel(i), &mut probs);
        let p = probs[k];
        // 1 - p summed from the other classes keeps precision when p is close to 1
        let q: f64 = probs.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
        let log_p = p.max(PROB_FLOOR).ln();
        let focus = q.powf(gamma);
        value -= alpha * focus * log_p;

        // dL/dp = α [γ (1-p)^(γ-1) log p - (1-p)^γ / p]; the first term vanishes as q -> 0
        let focus_slope = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * log_p };
        let dl_dp = alpha * (focus_slope - focus / p.max(PROB_FLOOR));
        // dp/da_j = p (δ_jk - p_j)
        let g = &mut grad.values[i * c..(i + 1) * c];
        for (j, (gj, &pj)) in g.iter_mut().zip(&probs).enumerate() {
            let delta = if j == k { 1.0 } else { 0.0 };
            *gj = dl_dp * p * (delta - pj) * scale;
        }
    }
    Ok(LossOutput { value: value * scale, grad })
}
