//! Tempered exponential/logarithm, the heavy-tailed softmax built on them, and
//! the bi-tempered logistic loss.

use super::{annotated, check_pixelwise, BiTemperedParams, LossOutput, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{softmax_row, ClassTensor, LabelMap, LogitMap};

const MAX_NORMALIZER_ITERS: usize = 200;

/// `exp_t(x) = max(1 + (1 - t) x, 0)^(1 / (1 - t))`, and `exp(x)` at `t = 1`.
pub fn tempered_exp(x: f64, t: f64) -> f64 {
    if t == 1.0 {
        x.exp()
    } else {
        (1.0 + (1.0 - t) * x).max(0.0).powf(1.0 / (1.0 - t))
    }
}

/// `log_t(x) = (x^(1 - t) - 1) / (1 - t)`, and `ln(x)` at `t = 1`.
pub fn tempered_log(x: f64, t: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("tempered log of non-positive value {x}")));
    }
    Ok(log_t(x, t))
}

fn log_t(x: f64, t: f64) -> f64 {
    if t == 1.0 {
        x.ln()
    } else {
        (x.powf(1.0 - t) - 1.0) / (1.0 - t)
    }
}

/// Heavy-tailed softmax: `out_i = exp_t(a_i - λ)` with `λ` chosen so the
/// outputs sum to one. Returns `λ`.
///
/// `λ` lies in `[max a, max a + (C^(t-1) - 1)/(t - 1)]`: at the lower end the
/// largest term alone is 1, at the upper end every term is at most `1/C`. The
/// residual is convex and decreasing in `λ`, so Newton steps started at the
/// softmax log-partition (which is left of the root) increase monotonically;
/// the bracket is kept and a bisection step replaces any Newton step that
/// would leave it.
pub fn tempered_softmax_row(activations: &[f64], t: f64, out: &mut [f64]) -> Result<f64> {
    if activations.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidInput("non-finite activations".into()));
    }
    if !(t >= 1.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("t2 must be >= 1, got {t}")));
    }
    let max = activations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if t == 1.0 {
        softmax_row(activations, out);
        let sum: f64 = activations.iter().map(|a| (a - max).exp()).sum();
        return Ok(max + sum.ln());
    }
    let c = activations.len() as f64;
    let exponent = 1.0 / (1.0 - t);
    let rounded = exponent.round();
    // bases are >= 1 here, so an integral exponent can use the cheaper powi
    let pow = |base: f64| -> f64 {
        if (exponent - rounded).abs() <= 1e-9 * rounded.abs() && rounded.abs() < 64.0 {
            base.powi(rounded as i32)
        } else {
            base.powf(exponent)
        }
    };
    let residual = |lambda: f64| -> (f64, f64) {
        let mut sum = 0.0;
        let mut slope = 0.0;
        for &a in activations {
            // exp_t(x)^t = exp_t(x) / (1 + (1 - t) x)
            let base = 1.0 + (1.0 - t) * (a - max - lambda);
            let e = pow(base);
            sum += e;
            slope += e / base;
        }
        (sum - 1.0, -slope)
    };
    let (mut lo, mut hi) = (0.0, (c.powf(t - 1.0) - 1.0) / (t - 1.0));
    // exp_t(x) >= exp(x) for x <= 0 when t > 1, so the softmax log-partition
    // still has a non-negative residual and is a closer Newton start
    let log_partition = activations.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
    if log_partition > lo && log_partition < hi {
        lo = log_partition;
    }
    let mut lambda = lo;
    let mut converged = false;
    for _ in 0..MAX_NORMALIZER_ITERS {
        let (f, df) = residual(lambda);
        if f == 0.0 {
            converged = true;
            break;
        }
        if f > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let newton = lambda - f / df;
        let next = if newton > lo && newton < hi && newton.is_finite() { newton } else { 0.5 * (lo + hi) };
        if (next - lambda).abs() <= 4.0 * f64::EPSILON * (1.0 + lambda.abs()) || hi - lo <= f64::EPSILON * (1.0 + hi) {
            lambda = next;
            converged = true;
            break;
        }
        lambda = next;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "tempered softmax normalizer did not converge in {MAX_NORMALIZER_ITERS} iterations"
        )));
    }
    for (o, &a) in out.iter_mut().zip(activations) {
        *o = pow(1.0 + (1.0 - t) * (a - max - lambda));
    }
    Ok(max + lambda)
}

pub fn tempered_softmax(activations: &[f64], t2: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; activations.len()];
    tempered_softmax_row(activations, t2, &mut out)?;
    Ok(out)
}

/// Per-pixel bi-tempered loss for a one-hot target `label`, given the
/// tempered probabilities `probs`.
pub fn bitempered_pixel_loss(probs: &[f64], label: usize, t1: f64) -> f64 {
    // with one-hot y: y log_t1 y vanishes and Σ y^(2-t1) = 1
    let power = 2.0 - t1;
    let mass: f64 = probs.iter().map(|p| p.powf(power)).sum();
    -log_t(probs[label].max(PROB_FLOOR), t1) - (1.0 - mass) / power
}

/// Bi-tempered logistic loss over tempered-softmax probabilities, averaged
/// over annotated pixels. The gradient differentiates through the normalizer
/// implicitly: `∂ŷ_i/∂a_k = u_i (δ_ik - u_k / Σu)` with `u = ŷ^t2`.
pub fn bitempered_loss(logits: &LogitMap, labels: &LabelMap, params: BiTemperedParams) -> Result<LossOutput> {
    params.validate()?;
    let n = check_pixelwise(logits, labels)?;
    let BiTemperedParams { t1, t2 } = params;
    let c = logits.classes;
    let scale = 1.0 / n as f64;
    let mut grad = ClassTensor::zeros(logits.height, logits.width, c);
    let mut probs = vec![0.0; c];
    let mut u = vec![0.0; c];
    let mut value = 0.0;
    let power = 2.0 - t1;
    for (i, k) in annotated(labels) {
        let a = logits.pixel(i);
        let lambda = tempered_softmax_row(a, t2, &mut probs)?;

        let mut u_sum = 0.0;
        let mut gu_sum = 0.0;
        let mut mass = 0.0;
        let g = &mut grad.values[i * c..(i + 1) * c];
        for j in 0..c {
            let p = probs[j];
            // ŷ^t2 = ŷ / (1 + (1 - t2)(a - λ))
            u[j] = if t2 == 1.0 { p } else { p / (1.0 + (1.0 - t2) * (a[j] - lambda)) };
            let p_t1 = if t1 == 1.0 { 1.0 } else { p.powf(1.0 - t1) };
            mass += p * p_t1;
            // dL/dŷ_j = ŷ_j^(1-t1) - δ_jk ŷ_k^(-t1)
            let mut dl = p_t1;
            if j == k {
                let pk = p.max(PROB_FLOOR);
                dl -= pk.powf(-t1);
                value -= log_t(pk, t1);
            }
            g[j] = dl;
            u_sum += u[j];
            gu_sum += dl * u[j];
        }
        value -= (1.0 - mass) / power;
        for j in 0..c {
            g[j] = u[j] * (g[j] - gu_sum / u_sum) * scale;
        }
    }
    Ok(LossOutput { value: value * scale, grad })
}
