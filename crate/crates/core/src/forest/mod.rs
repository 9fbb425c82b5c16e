//! Feature standardization, a Gini random forest and the stratified k-fold
//! cross-validation protocol used for slide risk grading.

mod cv;
mod tree;

pub use cv::{cross_validate, stratified_folds, ClassAuc, CvConfig, CvReport, FoldResult, PooledPrediction};
pub use tree::{DecisionTree, Node};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use tree::TreeParams;

pub const MODEL_VERSION: u32 = 1;

/// Per-feature mean and standard deviation learned from training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Divisors; zero-variance features store 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let dim = check_matrix(features)?;
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let var = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd <= 1e-12 * mean[j].abs().max(1.0) {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features
            .iter()
            .map(|row| {
                if row.len() != self.dim() {
                    return Err(Error::shape("feature row", self.dim(), row.len()));
                }
                Ok(row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
            })
            .collect()
    }

    pub fn invert(&self, standardized: &[Vec<f64>]) -> Vec<Vec<f64>> {
        standardized
            .iter()
            .map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((z, m), s)| z * s + m).collect())
            .collect()
    }
}

fn check_matrix(features: &[Vec<f64>]) -> Result<usize> {
    let first = features.first().ok_or_else(|| Error::EmptyInput("no feature rows".into()))?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::InvalidInput("zero-width feature rows".into()));
    }
    if let Some(r) = features.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("feature row", dim, r.len()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature value".into()));
    }
    Ok(dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub seed: u64,
    /// Candidate features per split; `None` means `floor(sqrt(dim))`.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 1000, seed: 0, max_features: None, min_samples_split: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub seed: u64,
    pub n_trees: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub max_features: usize,
    pub min_samples_split: usize,
    pub criterion: String,
    pub bootstrap: bool,
    pub trees: Vec<DecisionTree>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

/// Trains `n_trees` trees, tree `i` on a bootstrap sample drawn with seed
/// `seed + i`, so the model does not depend on how trees are scheduled.
pub fn train_forest(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    config: &ForestConfig,
    exec: Exec,
) -> Result<ForestModel> {
    let dim = check_matrix(features)?;
    if labels.len() != features.len() {
        return Err(Error::shape("labels", features.len(), labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!("label {l} outside {n_classes} classes")));
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateModel("training labels contain a single class".into()));
    }
    if config.n_trees == 0 {
        return Err(Error::InvalidParameter("n_trees must be >= 1".into()));
    }
    let max_features = config.max_features.unwrap_or(((dim as f64).sqrt().floor() as usize).max(1)).clamp(1, dim);
    let params = TreeParams { n_classes, max_features, min_samples_split: config.min_samples_split.max(2) };
    let n = features.len();
    let trees = exec.map_range(config.n_trees, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
        let samples = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0..n)).collect();
        DecisionTree::grow(features, labels, samples, &params, &mut rng)
    });
    Ok(ForestModel {
        version: MODEL_VERSION,
        seed: config.seed,
        n_trees: config.n_trees,
        n_classes,
        feature_dim: dim,
        max_features,
        min_samples_split: params.min_samples_split,
        criterion: "gini".into(),
        bootstrap: true,
        trees,
    })
}

/// Mean leaf class frequency over trees; label is the arg-max, lowest index on ties.
pub fn predict_forest(model: &ForestModel, features: &[Vec<f64>]) -> Result<Vec<Prediction>> {
    features
        .iter()
        .map(|x| {
            if x.len() != model.feature_dim {
                return Err(Error::shape("feature row", model.feature_dim, x.len()));
            }
            let mut probs = vec![0.0; model.n_classes];
            for tree in &model.trees {
                for (p, q) in probs.iter_mut().zip(tree.predict_proba(x)) {
                    *p += q;
                }
            }
            let n = model.trees.len() as f64;
            probs.iter_mut().for_each(|p| *p /= n);
            let label = crate::tensor::argmax(&probs);
            Ok(Prediction { probs, label })
        })
        .collect()
}

/// Standardizer plus forest, as written to a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    #[serde(flatten)]
    pub forest: ForestModel,
    pub standardizer: Standardizer,
}

impl RiskModel {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, config: &ForestConfig, exec: Exec) -> Result<Self> {
        let standardizer = Standardizer::fit(features)?;
        let z = standardizer.apply(features)?;
        let forest = train_forest(&z, labels, n_classes, config, exec)?;
        Ok(Self { forest, standardizer })
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        predict_forest(&self.forest, &self.standardizer.apply(features)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let shift = if label == 0 { -2.0 } else { 2.0 };
            x.push(vec![shift + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let x = vec![vec![1.0, 5.0, 2.0], vec![3.0, 5.0, 4.0], vec![5.0, 5.0, 9.0]];
        let s = Standardizer::fit(&x).unwrap();
        assert_eq!(s.std[1], 1.0);
        let z = s.apply(&x).unwrap();
        for j in 0..3 {
            let m: f64 = z.iter().map(|r| r[j]).sum::<f64>() / 3.0;
            assert!(m.abs() <= 1e-10);
            let sd = (z.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / 3.0).sqrt();
            assert!((sd - 1.0).abs() < 1e-12 || (j == 1 && sd == 0.0));
        }
        assert!(z.iter().all(|r| r[1] == 0.0));
        let back = s.invert(&z);
        for (a, b) in back.iter().flatten().zip(x.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(s.apply(&[vec![1.0]]).is_err());
        assert!(Standardizer::fit(&[]).is_err());
    }

    #[test]
    fn separable_toy_is_memorized() {
        let (x, y) = toy(60, 1);
        let cfg = ForestConfig { n_trees: 25, seed: 3, ..Default::default() };
        let model = train_forest(&x, &y, 2, &cfg, Exec::default()).unwrap();
        let preds = predict_forest(&model, &x).unwrap();
        assert!(preds.iter().zip(&y).all(|(p, &l)| p.label == l));
        for p in &preds {
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_across_execution_modes() {
        let (x, y) = toy(40, 2);
        let cfg = ForestConfig { n_trees: 16, seed: 11, ..Default::default() };
        let a = train_forest(&x, &y, 2, &cfg, Exec::Sequential).unwrap();
        let b = train_forest(&x, &y, 2, &cfg, Exec::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn single_tree_forest_is_that_tree() {
        let (x, y) = toy(30, 4);
        let cfg = ForestConfig { n_trees: 1, seed: 5, ..Default::default() };
        let model = train_forest(&x, &y, 2, &cfg, Exec::Sequential).unwrap();
        let probe = vec![vec![0.1, 0.2, -0.3], vec![3.0, 0.0, 0.0]];
        for (p, row) in predict_forest(&model, &probe).unwrap().iter().zip(&probe) {
            assert_eq!(p.probs, model.trees[0].predict_proba(row));
        }
    }

    #[test]
    fn leaves_and_splits_are_well_formed() {
        let (x, y) = toy(50, 6);
        let model = train_forest(&x, &y, 2, &ForestConfig { n_trees: 10, ..Default::default() }, Exec::Sequential).unwrap();
        for tree in &model.trees {
            for node in &tree.nodes {
                match node {
                    Node::Leaf(c) => assert!(c.iter().sum::<u32>() >= 1),
                    Node::Split { feature, .. } => assert!(*feature < model.feature_dim),
                }
            }
        }
    }

    #[test]
    fn errors() {
        let x = vec![vec![1.0], vec![2.0]];
        let r = train_forest(&x, &[1, 1], 2, &ForestConfig::default(), Exec::Sequential);
        assert!(matches!(r, Err(Error::DegenerateModel(_))));
        assert!(train_forest(&x, &[0], 2, &ForestConfig::default(), Exec::Sequential).is_err());
        let model = train_forest(&x, &[0, 1], 2, &ForestConfig { n_trees: 2, ..Default::default() }, Exec::Sequential).unwrap();
        assert!(predict_forest(&model, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn model_file_fields() {
        let (x, y) = toy(20, 8);
        let m = RiskModel::fit(&x, &y, 2, &ForestConfig { n_trees: 2, seed: 9, ..Default::default() }, Exec::Sequential).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        for key in ["version", "seed", "n_trees", "n_classes", "feature_dim", "standardizer", "trees"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: RiskModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
