//! Segmentation losses returning a scalar value together with its gradient.
//!
//! Each loss averages a per-pixel term over non-ignore pixels. Gradients are
//! analytic and are checked against central differences by [`gradcheck`].

mod cross_entropy;
mod focal;
pub mod gradcheck;
mod lovasz;
mod tempered;

pub use cross_entropy::cc_loss;
pub use focal::focal_loss;
pub use lovasz::{lovasz_grad_vector, lovasz_softmax_loss, lovasz_softmax_loss_logits};
pub use tempered::{
    bitempered_loss, bitempered_pixel_loss, tempered_exp, tempered_log, tempered_softmax,
    tempered_softmax_row,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClassTensor, LabelMap, LogitMap, IGNORE};

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the scores the loss was called with.
    pub grad: ClassTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("focal alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Temperatures of the tempered logarithm (`t1`) and exponential (`t2`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiTemperedParams {
    pub t1: f64,
    pub t2: f64,
}

impl Default for BiTemperedParams {
    fn default() -> Self {
        Self { t1: 0.8, t2: 1.2 }
    }
}

impl BiTemperedParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t1 <= 1.0) {
            return Err(Error::InvalidParameter(format!("t1 must lie in (0, 1], got {}", self.t1)));
        }
        if !(self.t2 >= 1.0 && self.t2.is_finite()) {
            return Err(Error::InvalidParameter(format!("t2 must be >= 1, got {}", self.t2)));
        }
        Ok(())
    }
}

/// A loss selection with its hyperparameters; the gradient is always w.r.t. logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Cc,
    Focal(FocalParams),
    #[serde(rename = "bitempered")]
    BiTempered(BiTemperedParams),
    Lovasz,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Cc => "cc",
            LossKind::Focal(_) => "focal",
            LossKind::BiTempered(_) => "bitempered",
            LossKind::Lovasz => "lovasz",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            LossKind::Cc => "CC",
            LossKind::Focal(_) => "Focal",
            LossKind::BiTempered(_) => "Bi-tempered",
            LossKind::Lovasz => "Lovasz",
        }
    }

    pub fn evaluate(&self, logits: &LogitMap, labels: &LabelMap) -> Result<LossOutput> {
        match self {
            LossKind::Cc => cc_loss(logits, labels, None),
            LossKind::Focal(p) => focal_loss(logits, labels, *p),
            LossKind::BiTempered(p) => bitempered_loss(logits, labels, *p),
            LossKind::Lovasz => lovasz_softmax_loss_logits(logits, labels),
        }
    }
}

/// Shape and label checks shared by the pixel-wise losses; returns the
/// number of non-ignore pixels.
pub(crate) fn check_pixelwise(scores: &ClassTensor, labels: &LabelMap) -> Result<usize> {
    if (scores.height, scores.width) != (labels.height, labels.width) {
        return Err(Error::shape(
            "labels vs scores",
            (scores.height, scores.width),
            (labels.height, labels.width),
        ));
    }
    labels.validate(scores.classes)?;
    let n = labels.annotated();
    if n == 0 {
        return Err(Error::EmptyInput("no annotated pixels".into()));
    }
    Ok(n)
}

pub(crate) fn annotated(labels: &LabelMap) -> impl Iterator<Item = (usize, usize)> + '_ {
    labels
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE)
        .map(|(i, &l)| (i, usize::from(l)))
}
