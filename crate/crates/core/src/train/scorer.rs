//! Windowed-feature MLP mapping each pixel to class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LogitMap, RgbImage};

pub const SCORER_VERSION: u32 = 1;
pub const WINDOW: usize = 5;
pub const HIDDEN: usize = 32;
/// Raw RGB plus per-channel window mean and std.
pub const FEATURES: usize = 9;

/// Dense layer; the bias is stored as the last column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Layer {
    fn he<R: rand::Rng>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        let cols = inputs + 1;
        let mut data = vec![0.0; outputs * cols];
        for r in 0..outputs {
            for c in 0..inputs {
                data[r * cols + c] = normal.sample(rng);
            }
        }
        Self { rows: outputs, cols, data }
    }

    fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { rows: outputs, cols: inputs + 1, data: vec![0.0; outputs * (inputs + 1)] }
    }

    pub fn inputs(&self) -> usize {
        self.cols - 1
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn bias(&self, row: usize) -> f64 {
        self.data[row * self.cols + self.cols - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelScorer {
    pub version: u32,
    pub k: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    /// Per-feature `(x - shift) / scale` applied before the first layer.
    #[serde(default = "identity_shift")]
    pub input_shift: Vec<f64>,
    #[serde(default = "identity_scale")]
    pub input_scale: Vec<f64>,
    pub layers: Vec<Layer>,
}

fn identity_shift() -> Vec<f64> {
    vec![0.0; FEATURES]
}

fn identity_scale() -> Vec<f64> {
    vec![1.0; FEATURES]
}

/// Per-pixel feature rows of one image, `FEATURES` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelFeatures {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURES..(i + 1) * FEATURES]
    }
}

/// RGB plus mean and population std of each channel over a `k × k` window
/// with edge-clamped coordinates.
pub fn pixel_features(image: &RgbImage, k: usize) -> PixelFeatures {
    let (h, w) = (image.height, image.width);
    let half = (k / 2) as isize;
    let n = (k * k) as f64;
    let mut data = Vec::with_capacity(h * w * FEATURES);
    for r in 0..h {
        for c in 0..w {
            let mut sum = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            for dr in -half..=half {
                let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                for dc in -half..=half {
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    let px = image.pixel(rr * w + cc);
                    for ch in 0..3 {
                        let v = f64::from(px[ch]);
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
            }
            let px = image.pixel(r * w + c);
            data.extend(px.iter().map(|&v| f64::from(v)));
            data.extend(sum.iter().map(|s| s / n));
            data.extend((0..3).map(|ch| (sq[ch] / n - (sum[ch] / n).powi(2)).max(0.0).sqrt()));
        }
    }
    PixelFeatures { height: h, width: w, data }
}

/// Activations kept from a forward pass for backpropagation.
pub struct Forward {
    pub logits: LogitMap,
    hidden: Vec<f64>,
}

/// He-initialised hidden layer (`N(0, 2/fan_in)`), zero output layer and
/// biases, identity input normalization.
pub fn init_model(seed: u64, classes: usize) -> Result<PixelScorer> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!("scorer needs at least 2 classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = Layer::he(HIDDEN, FEATURES, &mut rng);
    // the linear output layer starts at zero, so every class begins at 1/C
    let second = Layer::zeros(classes, HIDDEN);
    Ok(PixelScorer {
        version: SCORER_VERSION,
        k: WINDOW,
        hidden: HIDDEN,
        classes,
        input_shift: identity_shift(),
        input_scale: identity_scale(),
        layers: vec![first, second],
    })
}

impl PixelScorer {
    pub fn validate(&self) -> Result<()> {
        if self.version != SCORER_VERSION {
            return Err(Error::InvalidInput(format!("unsupported scorer version {}", self.version)));
        }
        let expected = [(self.hidden, FEATURES + 1), (self.classes, self.hidden + 1)];
        if self.layers.len() != 2
            || self.layers.iter().zip(expected).any(|(l, (r, c))| l.rows != r || l.cols != c || l.data.len() != r * c)
        {
            return Err(Error::InvalidInput("scorer layer shapes do not match k, H, C".into()));
        }
        if self.input_shift.len() != FEATURES || self.input_scale.len() != FEATURES {
            return Err(Error::InvalidInput(format!("input normalization must have {FEATURES} entries")));
        }
        if self.input_scale.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.input_shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("input normalization must be finite with positive scales".into()));
        }
        if self.layers.iter().any(|l| l.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite scorer weight".into()));
        }
        Ok(())
    }

    /// Sets the input normalization to the per-feature mean and population
    /// std over all pixels of `sets` (std floored at 1e-6).
    pub fn fit_input_normalization(&mut self, sets: &[&PixelFeatures]) {
        let mut sum = [0.0f64; FEATURES];
        let mut sq = [0.0f64; FEATURES];
        let mut n = 0usize;
        for f in sets {
            for i in 0..f.pixels() {
                for (j, &v) in f.row(i).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += f.pixels();
        }
        if n == 0 {
            return;
        }
        for j in 0..FEATURES {
            let mean = sum[j] / n as f64;
            self.input_shift[j] = mean;
            self.input_scale[j] = (sq[j] / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
        }
    }

    fn normalized(&self, raw: &[f64]) -> [f64; FEATURES] {
        let mut x = [0.0; FEATURES];
        for j in 0..FEATURES {
            x[j] = (raw[j] - self.input_shift[j]) / self.input_scale[j];
        }
        x
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.data.len()).sum()
    }

    /// Logits for the pixels of `features` listed in `order` (all pixels in
    /// raster order when `None`), shaped `height × width`.
    pub fn forward_rows(&self, features: &PixelFeatures, order: Option<&[usize]>, height: usize, width: usize) -> Result<Forward> {
        let n = height * width;
        let (l1, l2) = (&self.layers[0], &self.layers[1]);
        let (hd, c) = (self.hidden, self.classes);
        let mut hidden = vec![0.0; n * hd];
        let mut logits = vec![0.0; n * c];
        for i in 0..n {
            let src = order.map_or(i, |o| o[i]);
            let x = self.normalized(features.row(src));
            let h = &mut hidden[i * hd..(i + 1) * hd];
            for (j, hj) in h.iter_mut().enumerate() {
                let w = &l1.data[j * l1.cols..(j + 1) * l1.cols];
                let z = w[FEATURES] + w[..FEATURES].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                *hj = z.max(0.0);
            }
            let out = &mut logits[i * c..(i + 1) * c];
            for (k, ok) in out.iter_mut().enumerate() {
                let w = &l2.data[k * l2.cols..(k + 1) * l2.cols];
                *ok = w[hd] + w[..hd].iter().zip(h.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit at pixel {}", i / c)));
        }
        Ok(Forward { logits: LogitMap::new(height, width, c, logits)?, hidden })
    }

    pub fn forward(&self, features: &PixelFeatures) -> Result<Forward> {
        self.forward_rows(features, None, features.height, features.width)
    }

    /// Gradient of a scalar with respect to every weight, given its gradient
    /// `grad_logits` with respect to the logits of `fwd`. Layout matches
    /// `layers[0].data` followed by `layers[1].data`.
    pub fn backward(&self, features: &PixelFeatures, order: Option<&[usize]>, fwd: &Forward, grad_logits: &[f64]) -> Vec<f64> {
        let (l1, l2) = (&self.layers[0], &self.layers[1]);
        let (hd, c) = (self.hidden, self.classes);
        let mut grad = vec![0.0; self.num_params()];
        let (g1, g2) = grad.split_at_mut(l1.data.len());
        let mut dh = vec![0.0; hd];
        for i in 0..fwd.logits.pixels() {
            let g = &grad_logits[i * c..(i + 1) * c];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let h = &fwd.hidden[i * hd..(i + 1) * hd];
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (k, &gk) in g.iter().enumerate() {
                if gk == 0.0 {
                    continue;
                }
                let row = k * l2.cols;
                let w = &l2.data[row..row + l2.cols];
                let gw = &mut g2[row..row + l2.cols];
                for j in 0..hd {
                    gw[j] += gk * h[j];
                    dh[j] += gk * w[j];
                }
                gw[hd] += gk;
            }
            let x = self.normalized(features.row(order.map_or(i, |o| o[i])));
            for j in 0..hd {
                if h[j] <= 0.0 {
                    continue;
                }
                let row = j * l1.cols;
                let gw = &mut g1[row..row + l1.cols];
                for (f, &xf) in x.iter().enumerate() {
                    gw[f] += dh[j] * xf;
                }
                gw[FEATURES] += dh[j];
            }
        }
        grad
    }

    /// `weights -= lr * grad` over the flat parameter layout.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        let mut offset = 0;
        for layer in &mut self.layers {
            for (w, g) in layer.data.iter_mut().zip(&grad[offset..]) {
                *w -= lr * g;
            }
            offset += layer.data.len();
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.data.iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.data.len();
            layer.data.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::loss::gradcheck::finite_difference_check;

    fn image(h: usize, w: usize, seed: u64) -> RgbImage {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    /// A model with every parameter drawn from N(0, 0.25), away from the zero init.
    pub(crate) fn randomized(classes: usize, seed: u64) -> PixelScorer {
        let mut m = init_model(seed, classes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let p: Vec<f64> = (0..m.num_params()).map(|_| normal.sample(&mut rng)).collect();
        m.set_params(&p);
        m
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        assert_eq!(init_model(1, 14).unwrap(), init_model(1, 14).unwrap());
        assert_ne!(init_model(1, 14).unwrap(), init_model(2, 14).unwrap());
        assert!(init_model(1, 1).is_err());
        let mut samples = Vec::new();
        for seed in 0..35 {
            let m = init_model(seed, 14).unwrap();
            let l = &m.layers[0];
            samples.extend((0..l.rows).flat_map(|r| (0..l.inputs()).map(move |c| (r, c))).map(|(r, c)| l.weight(r, c)));
        }
        assert!(samples.len() >= 10_000);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 * (var / n).sqrt());
        assert!((var - 2.0 / FEATURES as f64).abs() < 0.05 * 2.0 / FEATURES as f64);
        let m = init_model(0, 5).unwrap();
        assert!(m.layers[0].data.iter().all(|v| v.is_finite()));
        assert!(m.layers.iter().all(|l| (0..l.rows).all(|r| l.bias(r) == 0.0)));
        assert!(m.layers[1].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let m = init_model(3, 14).unwrap();
        let rgb = RgbImage::new(8, 8, vec![0.0; 192]).unwrap();
        let fwd = m.forward(&pixel_features(&rgb, WINDOW)).unwrap();
        assert_eq!((fwd.logits.height, fwd.logits.width, fwd.logits.classes), (8, 8, 14));
        assert!(fwd.logits.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_tile_gives_constant_logits() {
        let rgb = RgbImage::new(10, 12, [0.2f32, 0.5, 0.7].repeat(120)).unwrap();
        let m = randomized(6, 4);
        let fwd = m.forward(&pixel_features(&rgb, WINDOW)).unwrap();
        let first = fwd.logits.pixel(0).to_vec();
        for i in 0..120 {
            assert_eq!(fwd.logits.pixel(i), &first[..]);
        }
    }

    #[test]
    fn window_features_clamp_at_edges() {
        let rgb = image(6, 7, 9);
        let f = pixel_features(&rgb, WINDOW);
        // corner window: rows {0,0,0,1,2} × cols {0,0,0,1,2}
        let idx = [0usize, 0, 0, 1, 2];
        let mut sum = 0.0;
        let mut sq = 0.0;
        for &r in &idx {
            for &c in &idx {
                let v = f64::from(rgb.pixel(r * 7 + c)[1]);
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / 25.0;
        assert!((f.row(0)[4] - mean).abs() < 1e-12);
        assert!((f.row(0)[7] - (sq / 25.0 - mean * mean).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn mean_logit_gradient_matches_finite_differences() {
        let rgb = image(6, 6, 5);
        let feats = pixel_features(&rgb, WINDOW);
        let mut base = randomized(4, 7);
        base.input_shift = vec![0.5; FEATURES];
        base.input_scale = vec![0.3; FEATURES];
        let f = |p: &[f64]| {
            let mut m = base.clone();
            m.set_params(p);
            let fwd = m.forward(&feats)?;
            let n = fwd.logits.values.len() as f64;
            let value = fwd.logits.values.iter().sum::<f64>() / n;
            let g = vec![1.0 / n; fwd.logits.values.len()];
            Ok((value, m.backward(&feats, None, &fwd, &g)))
        };
        let err = finite_difference_check(f, &base.params(), 1e-6).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn json_layout() {
        let m = init_model(0, 3).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["k"], 5);
        assert_eq!(v["H"], 32);
        assert_eq!(v["C"], 3);
        assert_eq!(v["layers"][1]["rows"], 3);
        assert_eq!(v["layers"][1]["cols"], 33);
        let back: PixelScorer = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }
}
