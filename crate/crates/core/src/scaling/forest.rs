use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScalingError;
use crate::rng;

/// Random-forest hyperparameters. The tree count follows the pipeline's
/// fixed setting; the rest are common defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Fraction of features drawn (without replacement, at least one) as
    /// split candidates at every node.
    pub feature_fraction: f64,
    /// None grows trees until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            min_leaf: 2,
            feature_fraction: 1.0 / 3.0,
            max_depth: None,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ScalingError> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(ScalingError::InvalidConfig(
                "tree count and min leaf size must be positive".into(),
            ));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(ScalingError::InvalidConfig(format!(
                "feature fraction {} outside (0, 1]",
                self.feature_fraction
            )));
        }
        if self.max_depth == Some(0) {
            return Err(ScalingError::InvalidConfig("max depth 0 cannot hold a root".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// One CART regression tree as an index-linked node arena; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, input: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if input[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Bagged CART regression forest; prediction is the mean over trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    trees: Vec<RegressionTree>,
    tree_seeds: Vec<u64>,
    input_dim: usize,
    config: ForestConfig,
}

impl RegressionForest {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }
}

const TAG_TREE: u64 = 0x464f_0001;

/// Fits a regression forest: each tree sees a bootstrap resample (when
/// enabled) and greedy variance-reduction splits over per-node feature
/// subsets. Deterministic under (inputs, targets, config, seed).
pub fn fit_forest(
    inputs: &[Vec<f64>],
    targets: &[f64],
    config: &ForestConfig,
    seed: u64,
) -> Result<RegressionForest, ScalingError> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(ScalingError::EmptySet);
    }
    if inputs.len() != targets.len() {
        return Err(ScalingError::SizeMismatch { inputs: inputs.len(), targets: targets.len() });
    }
    if inputs.len() < 2 {
        return Err(ScalingError::InvalidConfig("forest needs at least 2 samples".into()));
    }
    let dim = inputs[0].len();
    if dim == 0 || inputs.iter().any(|i| i.len() != dim) {
        return Err(ScalingError::InvalidConfig("inputs must share one positive dimension".into()));
    }
    if inputs.iter().flatten().any(|v| !v.is_finite()) || targets.iter().any(|t| !t.is_finite()) {
        return Err(ScalingError::NonFinite);
    }

    let tree_seeds: Vec<u64> = (0..config.n_trees)
        .map(|t| rng::derive_seed(seed, TAG_TREE ^ (t as u64) << 16))
        .collect();
    let trees = tree_seeds
        .iter()
        .map(|&tree_seed| {
            let mut rng = rng::stream(tree_seed, TAG_TREE);
            let sample: Vec<usize> = if config.bootstrap {
                (0..inputs.len()).map(|_| rng.gen_range(0..inputs.len())).collect()
            } else {
                (0..inputs.len()).collect()
            };
            fit_tree(inputs, targets, sample, config, &mut rng)
        })
        .collect();
    Ok(RegressionForest { trees, tree_seeds, input_dim: dim, config: config.clone() })
}

/// Mean of the per-tree predictions.
pub fn forest_predict(forest: &RegressionForest, input: &[f64]) -> Result<f64, ScalingError> {
    if input.len() != forest.input_dim {
        return Err(ScalingError::DimensionMismatch {
            expected: forest.input_dim,
            got: input.len(),
        });
    }
    let total: f64 = forest.trees.iter().map(|t| t.predict(input)).sum();
    Ok(total / forest.trees.len() as f64)
}

/// A forest of `n_trees` identical single-leaf trees that always predicts
/// `value`; the degenerate case used to probe the multi-level predictor.
pub fn constant_forest(
    value: f64,
    input_dim: usize,
    n_trees: usize,
) -> Result<RegressionForest, ScalingError> {
    if !value.is_finite() {
        return Err(ScalingError::NonFinite);
    }
    if input_dim == 0 || n_trees == 0 {
        return Err(ScalingError::InvalidConfig(
            "constant forest needs a positive dimension and tree count".into(),
        ));
    }
    let tree = RegressionTree { nodes: vec![TreeNode::Leaf { value }] };
    Ok(RegressionForest {
        trees: vec![tree; n_trees],
        tree_seeds: vec![0; n_trees],
        input_dim,
        config: ForestConfig { n_trees, ..ForestConfig::default() },
    })
}

struct PendingNode {
    node: usize,
    samples: Vec<usize>,
    depth: usize,
}

fn fit_tree(
    inputs: &[Vec<f64>],
    targets: &[f64],
    root_samples: Vec<usize>,
    config: &ForestConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> RegressionTree {
    let dim = inputs[0].len();
    let n_candidates = ((dim as f64 * config.feature_fraction).ceil() as usize).clamp(1, dim);
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let mut pending = vec![PendingNode { node: 0, samples: root_samples, depth: 0 }];
    while let Some(PendingNode { node, samples, depth }) = pending.pop() {
        let mean = samples.iter().map(|&i| targets[i]).sum::<f64>() / samples.len() as f64;
        let at_cap = config.max_depth.is_some_and(|cap| depth + 1 >= cap);
        let splittable = samples.len() >= 2 * config.min_leaf && !at_cap;
        let best = if splittable {
            best_split(inputs, targets, &samples, n_candidates, config.min_leaf, dim, rng)
        } else {
            None
        };
        match best {
            None => nodes[node] = TreeNode::Leaf { value: mean },
            Some((feature, threshold)) => {
                let (left_samples, right_samples): (Vec<usize>, Vec<usize>) =
                    samples.iter().partition(|&&i| inputs[i][feature] <= threshold);
                let left = nodes.len();
                let right = nodes.len() + 1;
                nodes.push(TreeNode::Leaf { value: 0.0 });
                nodes.push(TreeNode::Leaf { value: 0.0 });
                nodes[node] = TreeNode::Split { feature, threshold, left, right };
                pending.push(PendingNode { node: left, samples: left_samples, depth: depth + 1 });
                pending.push(PendingNode { node: right, samples: right_samples, depth: depth + 1 });
            }
        }
    }
    RegressionTree { nodes }
}

/// Greedy minimum-SSE split over a random feature subset; None when every
/// candidate feature is constant on the node or no cut satisfies min_leaf.
fn best_split(
    inputs: &[Vec<f64>],
    targets: &[f64],
    samples: &[usize],
    n_candidates: usize,
    min_leaf: usize,
    dim: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<(usize, f64)> {
    // partial Fisher-Yates: first n_candidates entries are the drawn features
    let mut features: Vec<usize> = (0..dim).collect();
    for i in 0..n_candidates {
        let j = rng.gen_range(i..dim);
        features.swap(i, j);
    }
    let n = samples.len();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for &feature in &features[..n_candidates] {
        order.clear();
        order.extend_from_slice(samples);
        order.sort_by(|&a, &b| inputs[a][feature].partial_cmp(&inputs[b][feature]).unwrap());
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        let total_sum: f64 = order.iter().map(|&i| targets[i]).sum();
        let total_sq: f64 = order.iter().map(|&i| targets[i] * targets[i]).sum();
        for cut in 1..n {
            let y = targets[order[cut - 1]];
            left_sum += y;
            left_sq += y * y;
            if cut < min_leaf || n - cut < min_leaf {
                continue;
            }
            let lo = inputs[order[cut - 1]][feature];
            let hi = inputs[order[cut]][feature];
            if lo == hi {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / cut as f64)
                + (right_sq - right_sum * right_sum / (n - cut) as f64);
            let threshold = lo + (hi - lo) / 2.0;
            if best.map_or(true, |(b, _, _)| sse < b) {
                best = Some((sse, feature, threshold));
            }
        }
    }
    best.map(|(_, feature, threshold)| (feature, threshold))
}
