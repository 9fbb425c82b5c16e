use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_forest, ForestConfig, Standardizer};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::RiskCategory;
use crate::metrics::{quadratic_weighted_kappa, roc_auc_ovr, AucReport, ConfusionMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub n_trees: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, seed: 0, n_trees: 1000 }
    }
}

/// Fold index per case. Each class is shuffled and dealt round-robin,
/// continuing the rotation across classes so fold sizes differ by at most
/// one. Falls back to an unstratified shuffle (second value `false`) when a
/// present class has fewer members than folds.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<(Vec<usize>, bool)> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    if labels.len() < folds {
        return Err(Error::InvalidInput(format!("{} cases cannot fill {folds} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let stratified = by_class.iter().all(|m| m.is_empty() || m.len() >= folds);
    let groups = if stratified {
        by_class
    } else {
        log::warn!("a class has fewer than {folds} members; using unstratified folds");
        vec![(0..labels.len()).collect()]
    };
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for mut members in groups {
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok((assignment, stratified))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_cases: Vec<usize>,
    pub standardizer: Standardizer,
    pub auc: AucReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledPrediction {
    pub case: usize,
    pub fold: usize,
    pub truth: RiskCategory,
    pub predicted: RiskCategory,
    pub probs: Vec<f64>,
}

/// AUC of one grade against the rest: mean and sample standard deviation
/// over folds with a defined score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub grade: RiskCategory,
    pub per_fold: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std_across_folds: Option<f64>,
    pub pooled: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub seed: u64,
    pub n_trees: usize,
    pub stratified: bool,
    /// Ordered from the highest-risk grade down.
    pub auc: Vec<ClassAuc>,
    pub pooled_kappa: f64,
    /// Rows = truth, columns = prediction, indexed by grade (other first).
    pub confusion: ConfusionMatrix,
    pub fold_results: Vec<FoldResult>,
    pub predictions: Vec<PooledPrediction>,
}

fn forest_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(1_000_003))
}

/// k-fold cross-validation: standardizer and forest are fit on the training
/// folds only and applied to the held-out fold; every case is predicted once.
pub fn cross_validate(features: &[Vec<f64>], grades: &[RiskCategory], config: &CvConfig, exec: Exec) -> Result<CvReport> {
    if features.len() != grades.len() {
        return Err(Error::shape("grades", features.len(), grades.len()));
    }
    if features.len() < config.folds {
        return Err(Error::InvalidInput(format!("{} cases, need at least {}", features.len(), config.folds)));
    }
    let labels: Vec<usize> = grades.iter().map(|g| g.index()).collect();
    let k = RiskCategory::COUNT;
    let (assignment, stratified) = stratified_folds(&labels, config.folds, config.seed)?;
    let mut predictions = Vec::with_capacity(features.len());
    let mut fold_results = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..features.len()).partition(|&i| assignment[i] == fold);
        let train_x: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let test_x: Vec<Vec<f64>> = test.iter().map(|&i| features[i].clone()).collect();
        let standardizer = Standardizer::fit(&train_x)?;
        let forest_cfg = ForestConfig { n_trees: config.n_trees, seed: forest_seed(config.seed, fold), ..Default::default() };
        let model = train_forest(&standardizer.apply(&train_x)?, &train_y, k, &forest_cfg, exec)?;
        let preds = super::predict_forest(&model, &standardizer.apply(&test_x)?)?;
        let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let test_y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let auc = roc_auc_ovr(&scores, &test_y, k)?;
        for (&case, p) in test.iter().zip(preds) {
            predictions.push(PooledPrediction {
                case,
                fold,
                truth: grades[case],
                predicted: RiskCategory::from_index(p.label).expect("forest has 4 classes"),
                probs: p.probs,
            });
        }
        fold_results.push(FoldResult { fold, test_cases: test, standardizer, auc });
    }
    predictions.sort_by_key(|p| p.case);

    let truth: Vec<usize> = predictions.iter().map(|p| p.truth.index()).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted.index()).collect();
    let pooled_kappa = quadratic_weighted_kappa(&truth, &predicted, k)?;
    let confusion = ConfusionMatrix::from_pairs(&truth, &predicted, k)?;
    let pooled_scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
    let pooled_auc = roc_auc_ovr(&pooled_scores, &truth, k)?;

    let auc = RiskCategory::ALL
        .iter()
        .rev()
        .map(|&grade| {
            let per_fold: Vec<Option<f64>> = fold_results.iter().map(|f| f.auc.per_class[grade.index()]).collect();
            let defined: Vec<f64> = per_fold.iter().flatten().copied().collect();
            let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            let std_across_folds = mean.filter(|_| defined.len() > 1).map(|m| {
                (defined.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (defined.len() - 1) as f64).sqrt()
            });
            ClassAuc { grade, per_fold, mean, std_across_folds, pooled: pooled_auc.per_class[grade.index()] }
        })
        .collect();

    Ok(CvReport {
        folds: config.folds,
        seed: config.seed,
        n_trees: config.n_trees,
        stratified,
        auc,
        pooled_kappa,
        confusion,
        fold_results,
        predictions,
    })
}

impl CvReport {
    /// One line per grade, e.g. `HGD/tumor: AUC of 0.87 (±0.03)`, then the kappa.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for a in &self.auc {
            let mean = a.mean.map_or("n/a".to_string(), |m| format!("{m:.2}"));
            let sd = a.std_across_folds.map_or("n/a".to_string(), |s| format!("{s:.2}"));
            out.push_str(&format!("{}: AUC of {mean} (±{sd})\n", a.grade.name()));
        }
        out.push_str(&format!("overall quadratic weighted kappa: {:.2}\n", self.pooled_kappa));
        out.push_str(&format!("(± is the standard deviation across {} folds)\n", self.folds));
        out
    }
}
