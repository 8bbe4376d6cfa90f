//! The tile score model: an MLP regressor trained with an ordinal
//! cross-entropy objective, so one continuous score both classifies tiles
//! (uninhabited / rural / urban via two thresholds) and preserves relative
//! development intensity within each class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{self, Activation, MlpParams, NeuralError, OptimizerState};
use crate::rng;
use crate::synthworld::{SurrogateLabel, Tile, TileClass, TileId, World};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid ordinal config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {scores} scores but {labels} labels")]
    BatchMismatch { scores: usize, labels: usize },
    #[error("labeled set mixes feature dimensions {0} and {1}")]
    MixedDimensions(usize, usize),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Thresholds, clamp range, and training hyperparameters for the score model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrdinalConfig {
    pub t1: f64,
    pub t2: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for OrdinalConfig {
    fn default() -> Self {
        Self {
            t1: 0.0,
            t2: 10.0,
            t_min: -10.0,
            t_max: 20.0,
            epochs: 100,
            batch_size: 50,
            learning_rate: 1e-4,
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

impl OrdinalConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let fail = |msg: String| Err(ScoreError::InvalidConfig(msg));
        if !(self.t_min < self.t1 && self.t1 < self.t2 && self.t2 < self.t_max) {
            return fail(format!(
                "need t_min < t1 < t2 < t_max, got {} / {} / {} / {}",
                self.t_min, self.t1, self.t2, self.t_max
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden layer sizes must be non-empty and positive".into());
        }
        Ok(())
    }
}

/// A trained tile scorer: MLP with a scalar head plus its ordinal config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreModel {
    params: MlpParams,
    config: OrdinalConfig,
}

impl ScoreModel {
    pub fn new(params: MlpParams, config: OrdinalConfig) -> Result<Self, ScoreError> {
        config.validate()?;
        if params.output_dim() != 1 {
            return Err(ScoreError::InvalidConfig(format!(
                "score model head must be scalar, got dimension {}",
                params.output_dim()
            )));
        }
        Ok(Self { params, config })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn config(&self) -> &OrdinalConfig {
        &self.config
    }

    /// Clamped development score of one feature vector.
    pub fn score(&self, features: &[f64]) -> Result<f64, ScoreError> {
        let raw = self.params.forward(features)?[0];
        Ok(clamp_score(raw, &self.config))
    }

    /// Class implied by the score thresholds.
    pub fn classify(&self, features: &[f64]) -> Result<TileClass, ScoreError> {
        Ok(classify_score(self.score(features)?, &self.config))
    }
}

/// One training example: a feature vector with a soft class label.
#[derive(Clone, Copy, Debug)]
pub struct LabeledTile<'a> {
    pub features: &'a [f64],
    pub soft: [f64; 3],
}

/// Joins sampled surrogate labels with their tiles' features.
pub fn labeled_set<'a>(world: &'a World, labels: &[SurrogateLabel]) -> Vec<LabeledTile<'a>> {
    labels
        .iter()
        .map(|l| LabeledTile { features: &world.tile(l.tile).features, soft: l.soft })
        .collect()
}

pub fn clamp_score(raw: f64, cfg: &OrdinalConfig) -> f64 {
    raw.max(cfg.t_min).min(cfg.t_max)
}

/// Ordinal logits: each component is the signed distance by which the score
/// sits inside that class's region.
pub fn ordinal_logits(score: f64, cfg: &OrdinalConfig) -> [f64; 3] {
    [
        cfg.t1 - score,
        (score - cfg.t1).min(cfg.t2 - score),
        score - cfg.t2,
    ]
}

/// Threshold classification; both inequalities are half-open so the upper
/// class wins exactly at a threshold.
pub fn classify_score(score: f64, cfg: &OrdinalConfig) -> TileClass {
    if score < cfg.t1 {
        TileClass::Uninhabited
    } else if score < cfg.t2 {
        TileClass::Rural
    } else {
        TileClass::Urban
    }
}

/// Loss and d(loss)/d(score) of one scored example against a soft label.
fn sample_loss_grad(score: f64, soft: &[f64; 3], cfg: &OrdinalConfig) -> (f64, f64) {
    let logits = ordinal_logits(score, cfg);
    let log_p = neural::log_softmax(&logits);
    let loss = -(soft[0] * log_p[0] + soft[1] * log_p[1] + soft[2] * log_p[2]);
    // the middle logit's slope flips at the midpoint of [t1, t2]
    let mid_slope = if score - cfg.t1 <= cfg.t2 - score { 1.0 } else { -1.0 };
    let grad = -(log_p[0].exp() - soft[0])
        + (log_p[1].exp() - soft[1]) * mid_slope
        + (log_p[2].exp() - soft[2]);
    (loss, grad)
}

/// Mean ordinal cross-entropy of a batch of already-computed scores.
pub fn class_loss(
    scores: &[f64],
    soft_labels: &[[f64; 3]],
    cfg: &OrdinalConfig,
) -> Result<f64, ScoreError> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(ScoreError::EmptyBatch);
    }
    if scores.len() != soft_labels.len() {
        return Err(ScoreError::BatchMismatch { scores: scores.len(), labels: soft_labels.len() });
    }
    let total: f64 = scores
        .iter()
        .zip(soft_labels)
        .map(|(&s, soft)| sample_loss_grad(s, soft, cfg).0)
        .sum();
    Ok(total / scores.len() as f64)
}

/// Batch loss and flat parameter gradient through the network, with the clamp
/// inside the graph (zero gradient where the raw output is out of range).
/// Shaped for `neural::grad_check`.
pub fn class_loss_grad(
    params: &MlpParams,
    batch: &[LabeledTile<'_>],
    cfg: &OrdinalConfig,
) -> Result<(f64, Vec<f64>), NeuralError> {
    let mut grad = vec![0.0; params.n_params()];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for example in batch {
        let trace = params.forward_trace(example.features)?;
        let raw = trace.output()[0];
        let clamped = clamp_score(raw, cfg);
        let (loss, d_score) = sample_loss_grad(clamped, &example.soft, cfg);
        total += loss * scale;
        let d_raw = if (cfg.t_min..=cfg.t_max).contains(&raw) { d_score } else { 0.0 };
        params.backward(example.features, &trace, &[d_raw * scale], &mut grad)?;
    }
    Ok((total, grad))
}

fn check_labeled_set(labeled: &[LabeledTile<'_>]) -> Result<usize, ScoreError> {
    let Some(first) = labeled.first() else {
        return Err(ScoreError::EmptyBatch);
    };
    let dim = first.features.len();
    for example in labeled {
        if example.features.len() != dim {
            return Err(ScoreError::MixedDimensions(dim, example.features.len()));
        }
    }
    Ok(dim)
}

const TAG_SCORE_INIT: u64 = 0x5343_0001;
const TAG_SCORE_EPOCH: u64 = 0x5343_0002;

pub fn train_score_model(
    labeled: &[LabeledTile<'_>],
    cfg: &OrdinalConfig,
    seed: u64,
) -> Result<ScoreModel, ScoreError> {
    Ok(train_score_model_with_curve(labeled, cfg, seed)?.0)
}

/// Trains the score model and also reports the full-dataset class loss after
/// each epoch (the training curve).
pub fn train_score_model_with_curve(
    labeled: &[LabeledTile<'_>],
    cfg: &OrdinalConfig,
    seed: u64,
) -> Result<(ScoreModel, Vec<f64>), ScoreError> {
    cfg.validate()?;
    let dim = check_labeled_set(labeled)?;
    let mut sizes = vec![dim];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let mut params =
        MlpParams::init(&sizes, cfg.activation, rng::derive_seed(seed, TAG_SCORE_INIT))?;
    let mut state = OptimizerState::new(params.n_params(), cfg.learning_rate);

    let n = labeled.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut objective = |p: &MlpParams, rng: &mut ChaCha8Rng| {
            if cursor == 0 {
                order.shuffle(rng);
            }
            let end = (cursor + cfg.batch_size).min(n);
            let batch: Vec<LabeledTile<'_>> = order[cursor..end].iter().map(|&i| labeled[i]).collect();
            cursor = if end == n { 0 } else { end };
            class_loss_grad(p, &batch, cfg)
        };
        params = neural::optimize(
            params,
            &mut objective,
            steps_per_epoch,
            &mut state,
            rng::derive_seed(seed, TAG_SCORE_EPOCH ^ (epoch as u64) << 16),
        )?;
        curve.push(dataset_loss(&params, labeled, cfg)?);
    }
    Ok((ScoreModel { params, config: cfg.clone() }, curve))
}

pub(crate) fn dataset_loss(
    params: &MlpParams,
    labeled: &[LabeledTile<'_>],
    cfg: &OrdinalConfig,
) -> Result<f64, ScoreError> {
    let mut scores = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    for example in labeled {
        scores.push(clamp_score(params.forward(example.features)?[0], cfg));
        labels.push(example.soft);
    }
    class_loss(&scores, &labels, cfg)
}

/// Clamped scores for a set of tiles.
pub fn score_tiles(model: &ScoreModel, tiles: &[Tile]) -> Result<BTreeMap<TileId, f64>, ScoreError> {
    tiles
        .iter()
        .map(|t| Ok((t.id, model.score(&t.features)?)))
        .collect()
}
