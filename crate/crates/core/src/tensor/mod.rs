//! Dense per-pixel class maps and the primitives shared by losses and metrics.
//!
//! All maps are stored row-major with the class index fastest:
//! `values[(row * width + col) * classes + class]`.

mod io;

pub use io::{read_pgm, read_tensor, write_pgm, write_tensor, Tensor, TensorData};

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for unannotated pixels; excluded from every loss and metric.
pub const IGNORE: u8 = 255;

pub const NUM_TISSUE_CLASSES: usize = 14;

/// The fixed tissue taxonomy. The discriminant is the serialized label value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TissueClass {
    NormalGlands = 0,
    LowGradeDysplasia = 1,
    HighGradeDysplasiaTumor = 2,
    SubmucosalStroma = 3,
    DesmoplasticStroma = 4,
    StromaLaminaPropria = 5,
    Mucus = 6,
    NecrosisDebris = 7,
    Lymphocytes = 8,
    Erythrocytes = 9,
    Adipose = 10,
    Muscle = 11,
    Nerve = 12,
    Background = 13,
}

impl TissueClass {
    pub const ALL: [TissueClass; NUM_TISSUE_CLASSES] = [
        TissueClass::NormalGlands,
        TissueClass::LowGradeDysplasia,
        TissueClass::HighGradeDysplasiaTumor,
        TissueClass::SubmucosalStroma,
        TissueClass::DesmoplasticStroma,
        TissueClass::StromaLaminaPropria,
        TissueClass::Mucus,
        TissueClass::NecrosisDebris,
        TissueClass::Lymphocytes,
        TissueClass::Erythrocytes,
        TissueClass::Adipose,
        TissueClass::Muscle,
        TissueClass::Nerve,
        TissueClass::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::NormalGlands => "normal glands",
            TissueClass::LowGradeDysplasia => "low-grade dysplasia",
            TissueClass::HighGradeDysplasiaTumor => "high-grade dysplasia/tumor",
            TissueClass::SubmucosalStroma => "submucosal stroma",
            TissueClass::DesmoplasticStroma => "desmoplastic stroma",
            TissueClass::StromaLaminaPropria => "stroma lamina propria",
            TissueClass::Mucus => "mucus",
            TissueClass::NecrosisDebris => "necrosis and debris",
            TissueClass::Lymphocytes => "lymphocytes",
            TissueClass::Erythrocytes => "erythrocytes",
            TissueClass::Adipose => "adipose tissue",
            TissueClass::Muscle => "muscle",
            TissueClass::Nerve => "nerve",
            TissueClass::Background => "background",
        }
    }
}

/// A raw `height × width × classes` tensor of reals with no value constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTensor {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl ClassTensor {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("empty map {height}x{width}")));
        }
        if classes < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {classes}")));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(classes))
            .ok_or_else(|| Error::InvalidInput("map dimensions overflow".into()))?;
        if values.len() != expected {
            return Err(Error::shape("class tensor", expected, values.len()));
        }
        Ok(Self { height, width, classes, values })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self { height, width, classes, values: vec![0.0; height * width * classes] }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.classes..(index + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.classes)
    }
}

/// Unnormalized class scores. Values are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap(ClassTensor);

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_tensor(ClassTensor::new(height, width, classes, values)?)
    }

    pub fn from_tensor(t: ClassTensor) -> Result<Self> {
        if let Some(i) = t.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit at flat index {i}")));
        }
        Ok(Self(t))
    }

    pub fn into_inner(self) -> ClassTensor {
        self.0
    }
}

impl Deref for LogitMap {
    type Target = ClassTensor;
    fn deref(&self) -> &ClassTensor {
        &self.0
    }
}

/// Per-pixel class probabilities: each value in `[0, 1]`, each pixel sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(ClassTensor);

impl ProbMap {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_tensor(ClassTensor::new(height, width, classes, values)?)
    }

    pub fn from_tensor(t: ClassTensor) -> Result<Self> {
        for (i, row) in t.rows().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidInput(format!("probability out of [0,1] at pixel {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!("pixel {i} probabilities sum to {sum}")));
            }
        }
        Ok(Self(t))
    }

    pub fn into_inner(self) -> ClassTensor {
        self.0
    }
}

impl Deref for ProbMap {
    type Target = ClassTensor;
    fn deref(&self) -> &ClassTensor {
        &self.0
    }
}

/// Per-pixel class indices, with [`IGNORE`] marking unannotated pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("empty label map {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape("label map", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, data: vec![label; height * width] }
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    pub fn annotated(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Checks every non-ignore label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l != IGNORE && usize::from(l) >= classes) {
            Some(&label) => Err(Error::InvalidLabel { label, classes }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("label map", (self.height, self.width), (other.height, other.width)));
        }
        Ok(())
    }
}

/// A 3-channel image with channel values in `[0, 1]`, interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape("rgb image", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, index: usize) -> [f32; 3] {
        let p = &self.data[index * 3..index * 3 + 3];
        [p[0], p[1], p[2]]
    }

    /// Channel values quantized to `0..=255`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// Softmax of one pixel's scores into `out`, shifted by the maximum.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &LogitMap) -> Result<ProbMap> {
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let mut out = ClassTensor::zeros(logits.height, logits.width, logits.classes);
    for (src, dst) in logits.rows().zip(out.values.chunks_exact_mut(logits.classes)) {
        softmax_row(src, dst);
    }
    Ok(ProbMap(out))
}

/// One-hot encoding; ignore pixels become all-zero rows.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<ClassTensor> {
    labels.validate(classes)?;
    let mut out = ClassTensor::new(labels.height, labels.width, classes, vec![0.0; labels.pixels() * classes])?;
    for (i, &l) in labels.data.iter().enumerate() {
        if l != IGNORE {
            out.values[i * classes + usize::from(l)] = 1.0;
        }
    }
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_decode(probs: &ClassTensor) -> Result<LabelMap> {
    if probs.classes > usize::from(IGNORE) {
        return Err(Error::InvalidInput(format!("{} classes do not fit a label map", probs.classes)));
    }
    let data = probs.rows().map(|row| argmax(row) as u8).collect();
    LabelMap::new(probs.height, probs.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits_1px(v: &[f64]) -> LogitMap {
        LogitMap::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&logits_1px(&[0.0; 4])).unwrap();
        for &v in &p.values {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2() {
        let p = softmax(&logits_1px(&[2f64.ln(), 0.0])).unwrap();
        assert!((p.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.values[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&logits_1px(&[1e4, -1e4, 9999.0])).unwrap();
        assert!(p.values.iter().all(|v| v.is_finite()));
        assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(LogitMap::new(1, 1, 2, vec![f64::NAN, 0.0]).is_err());
        let t = ClassTensor::new(1, 1, 2, vec![f64::INFINITY, 0.0]).unwrap();
        assert!(LogitMap::from_tensor(t).is_err());
    }

    #[test]
    fn one_hot_cases() {
        let l = LabelMap::new(1, 1, vec![2]).unwrap();
        assert_eq!(one_hot(&l, 4).unwrap().values, vec![0.0, 0.0, 1.0, 0.0]);
        let l = LabelMap::new(1, 1, vec![IGNORE]).unwrap();
        assert_eq!(one_hot(&l, 14).unwrap().values, vec![0.0; 14]);
        let l = LabelMap::new(1, 1, vec![5]).unwrap();
        assert!(matches!(one_hot(&l, 4), Err(Error::InvalidLabel { label: 5, classes: 4 })));
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        let t = ClassTensor::new(1, 2, 3, vec![0.1, 0.7, 0.2, 0.4, 0.3, 0.3]).unwrap();
        assert_eq!(argmax_decode(&t).unwrap().data, vec![1, 0]);
    }

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::new(1, 1, 2, vec![0.6, 0.4]).is_ok());
        assert!(ProbMap::new(1, 1, 2, vec![0.6, 0.5]).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn tissue_class_round_trip() {
        for (i, c) in TissueClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(TissueClass::from_index(i), Some(*c));
        }
        assert_eq!(TissueClass::from_index(14), None);
    }

    fn logit_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..8, 1usize..6).prop_flat_map(|(c, n)| {
            (Just(c), proptest::collection::vec(-50.0f64..50.0, c * n))
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one((c, v) in logit_strategy()) {
            let n = v.len() / c;
            let p = softmax(&LogitMap::new(1, n, c, v).unwrap()).unwrap();
            for row in p.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn decode_is_shift_invariant((c, v) in logit_strategy(), shift in -1e3f64..1e3) {
            let n = v.len() / c;
            let a = argmax_decode(&softmax(&LogitMap::new(1, n, c, v.clone()).unwrap()).unwrap()).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = argmax_decode(&softmax(&LogitMap::new(1, n, c, shifted).unwrap()).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn one_hot_decode_identity(labels in proptest::collection::vec(prop_oneof![0u8..6, Just(IGNORE)], 1..40)) {
            let n = labels.len();
            let map = LabelMap::new(1, n, labels.clone()).unwrap();
            let decoded = argmax_decode(&one_hot(&map, 6).unwrap()).unwrap();
            for (d, l) in decoded.data.iter().zip(&labels) {
                if *l != IGNORE {
                    prop_assert_eq!(d, l);
                }
            }
        }
    }
}
