use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    /// Class counts of the training samples that reached the leaf.
    Leaf(Vec<u32>),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A binary classification tree stored as a node array; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

pub(crate) struct TreeParams {
    pub n_classes: usize,
    pub max_features: usize,
    pub min_samples_split: usize,
}

impl DecisionTree {
    /// Grows a tree on `samples` (row indices, repeats allowed) until leaves
    /// are pure or hold fewer than `min_samples_split` samples.
    pub(crate) fn grow<R: Rng>(
        features: &[Vec<f64>],
        labels: &[usize],
        samples: Vec<usize>,
        params: &TreeParams,
        rng: &mut R,
    ) -> Self {
        let mut tree = DecisionTree { nodes: Vec::new() };
        tree.build(features, labels, samples, params, rng);
        tree
    }

    fn build<R: Rng>(
        &mut self,
        features: &[Vec<f64>],
        labels: &[usize],
        samples: Vec<usize>,
        params: &TreeParams,
        rng: &mut R,
    ) -> usize {
        let id = self.nodes.len();
        let mut counts = vec![0u32; params.n_classes];
        for &s in &samples {
            counts[labels[s]] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || samples.len() < params.min_samples_split {
            self.nodes.push(Node::Leaf(counts));
            return id;
        }
        let Some((feature, threshold)) = best_split(features, labels, &samples, params, rng) else {
            self.nodes.push(Node::Leaf(counts));
            return id;
        };
        self.nodes.push(Node::Leaf(Vec::new()));
        let (left_s, right_s): (Vec<usize>, Vec<usize>) =
            samples.into_iter().partition(|&s| features[s][feature] <= threshold);
        let left = self.build(features, labels, left_s, params, rng);
        let right = self.build(features, labels, right_s, params, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    pub fn leaf(&self, x: &[f64]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(counts) => return counts,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Leaf class frequencies for `x`.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let counts = self.leaf(x);
        let total: u32 = counts.iter().sum();
        counts.iter().map(|&c| f64::from(c) / f64::from(total)).collect()
    }
}

fn gini_weighted(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = f64::from(n);
    let sq: f64 = counts.iter().map(|&c| (f64::from(c) / n).powi(2)).sum();
    n * (1.0 - sq)
}

/// Lowest weighted child Gini over `max_features` randomly ordered features;
/// if none of those admits a split, the remaining features are tried in the
/// same random order.
fn best_split<R: Rng>(
    features: &[Vec<f64>],
    labels: &[usize],
    samples: &[usize],
    params: &TreeParams,
    rng: &mut R,
) -> Option<(usize, f64)> {
    let dim = features[samples[0]].len();
    let mut order: Vec<usize> = (0..dim).collect();
    order.shuffle(rng);
    let mut best: Option<(f64, usize, f64)> = None;
    let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
    let mut total = vec![0u32; params.n_classes];
    for &s in samples {
        total[labels[s]] += 1;
    }
    for (tried, &f) in order.iter().enumerate() {
        if tried >= params.max_features && best.is_some() {
            break;
        }
        sorted.clear();
        sorted.extend(samples.iter().map(|&s| (features[s][f], labels[s])));
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = vec![0u32; params.n_classes];
        let n = sorted.len() as u32;
        for i in 0..sorted.len() - 1 {
            left[sorted[i].1] += 1;
            let (a, b) = (sorted[i].0, sorted[i + 1].0);
            if a == b {
                continue;
            }
            let nl = i as u32 + 1;
            let right: Vec<u32> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = gini_weighted(&left, nl) + gini_weighted(&right, n - nl);
            if best.map_or(true, |(s, _, _)| score < s) {
                let mut threshold = a + (b - a) / 2.0;
                if threshold >= b {
                    threshold = a;
                }
                best = Some((score, f, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}
