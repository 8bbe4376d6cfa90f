//! Feature encoders: fine-tuned copies of the score model whose penultimate
//! activations serve as tile embeddings. Semi-supervised training combines
//! the ordinal class loss on labeled tiles with a k-means pseudo-label
//! cross-entropy on unlabeled tiles; a proxy variant instead maximizes the
//! Pearson correlation between its scores and a nightlight-style intensity.

mod kmeans;

pub use kmeans::{kmeans, KmeansResult};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperlocal::{self, LabeledTile, OrdinalConfig, ScoreError, ScoreModel};
use crate::neural::{self, Activation, MlpParams, NeuralError, OptimizerState};
use crate::rng;
use crate::synthworld::{Tile, TileId};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{stratum} stratum has {size} tiles, fewer than n_c = {n_c}")]
    StratumTooSmall { stratum: &'static str, size: usize, n_c: usize },
    #[error("no pseudo-label for {0}")]
    MissingPseudoLabel(TileId),
    #[error("batch has no variance in scores or proxy intensities")]
    DegenerateBatch,
    #[error("every batch was degenerate; nothing to optimize")]
    AllBatchesDegenerate,
    #[error("k must be positive")]
    ZeroClusters,
    #[error("k-means needs at least {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("k-means points mix dimensions")]
    MixedPointDims,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Which data source an encoder was fine-tuned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    /// Labeled surrogate tiles plus clustering on the unlabeled pool.
    Surrogate,
    /// Proxy intensity correlation plus optional clustering.
    Proxy,
}

/// Hyperparameters shared by both encoder training modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Weight of the clustering loss in the combined objective.
    pub lambda: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Whether proxy-source members with n_c > 0 also train the clustering
    /// loss (the alternative is correlation only).
    pub proxy_cluster_loss: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            labeled_batch: 40,
            unlabeled_batch: 256,
            epochs: 5,
            learning_rate: 1e-4,
            proxy_cluster_loss: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.epochs == 0 {
            return Err(EncoderError::InvalidConfig(
                "batch sizes and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EncoderError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(EncoderError::InvalidConfig(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A fine-tuned encoder. The embedding is the network's penultimate
/// activation; the scalar head is kept for score-style outputs, and the
/// cluster head (when clustering was used) maps embeddings to pseudo-classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    network: MlpParams,
    /// Row-major (2·n_c) × embed_dim matrix; no bias.
    cluster_head: Option<Vec<f64>>,
    n_c: usize,
    source: EncoderSource,
}

impl Encoder {
    /// The starting point of fine-tuning: the score model itself, before any
    /// optimizer step. Its embeddings equal the score model's penultimate
    /// activations exactly.
    pub fn initialized_from(score_model: &ScoreModel, source: EncoderSource) -> Self {
        Self {
            network: score_model.params().clone(),
            cluster_head: None,
            n_c: 0,
            source,
        }
    }

    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>, EncoderError> {
        Ok(self.network.penultimate(features)?)
    }

    pub fn embed_dim(&self) -> usize {
        self.network.penultimate_dim()
    }

    /// Raw scalar-head output (unclamped).
    pub fn head_score(&self, features: &[f64]) -> Result<f64, EncoderError> {
        Ok(self.network.forward(features)?[0])
    }

    pub fn network(&self) -> &MlpParams {
        &self.network
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn source(&self) -> EncoderSource {
        self.source
    }

    pub fn cluster_head(&self) -> Option<&[f64]> {
        self.cluster_head.as_deref()
    }
}

/// Tiles whose model score clears the inhabited threshold t1.
pub fn filter_inhabited<'a>(
    model: &ScoreModel,
    tiles: &'a [Tile],
) -> Result<Vec<&'a Tile>, EncoderError> {
    let t1 = model.config().t1;
    let mut kept = Vec::new();
    for tile in tiles {
        if model.score(&tile.features)? >= t1 {
            kept.push(tile);
        }
    }
    Ok(kept)
}

const TAG_ENC_X_ORDER: u64 = 0x454e_0001;
const TAG_ENC_U_ORDER: u64 = 0x454e_0002;
const TAG_ENC_REFRESH: u64 = 0x454e_0003;
const TAG_ENC_HEAD: u64 = 0x454e_0004;
const TAG_HEAD_INIT: u64 = 0x454e_0005;
const TAG_PROXY_ORDER: u64 = 0x454e_0006;

/// Stratified pseudo-labels: tiles are split into rural and urban by the
/// frozen score model's t2 threshold, each stratum is clustered into n_c
/// groups over the encoder's embeddings, and urban cluster indices are offset
/// by n_c so labels cover [0, 2·n_c).
pub fn pseudo_labels(
    encoder: &Encoder,
    score_model: &ScoreModel,
    tiles: &[&Tile],
    n_c: usize,
    seed: u64,
) -> Result<BTreeMap<TileId, usize>, EncoderError> {
    if n_c == 0 {
        return Err(EncoderError::InvalidConfig("pseudo-labels need n_c > 0".into()));
    }
    let t2 = score_model.config().t2;
    let mut rural: Vec<&Tile> = Vec::new();
    let mut urban: Vec<&Tile> = Vec::new();
    for tile in tiles {
        if score_model.score(&tile.features)? >= t2 {
            urban.push(tile);
        } else {
            rural.push(tile);
        }
    }
    for (name, stratum) in [("rural", &rural), ("urban", &urban)] {
        if stratum.len() < n_c {
            return Err(EncoderError::StratumTooSmall {
                stratum: name,
                size: stratum.len(),
                n_c,
            });
        }
    }
    let mut labels = BTreeMap::new();
    for (offset, (stratum, tag)) in [(rural, 0u64), (urban, 1u64)].into_iter().enumerate() {
        let points: Vec<Vec<f64>> = stratum
            .iter()
            .map(|t| encoder.embed(&t.features))
            .collect::<Result<_, _>>()?;
        let clustering = kmeans(&points, n_c, rng::derive_seed(seed, tag))?;
        for (tile, &cluster) in stratum.iter().zip(&clustering.assignments) {
            labels.insert(tile.id, offset * n_c + cluster);
        }
    }
    Ok(labels)
}

/// Xavier-uniform cluster head: a flat `n_classes x embed_dim` weight matrix.
pub fn init_cluster_head(embed_dim: usize, n_classes: usize, seed: u64) -> Vec<f64> {
    let bound = (6.0 / (embed_dim + n_classes) as f64).sqrt();
    let mut rng = rng::stream(seed, TAG_HEAD_INIT);
    (0..n_classes * embed_dim).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Mean cross-entropy of the encoder's cluster head against pseudo-labels.
pub fn cluster_loss(
    encoder: &Encoder,
    tiles: &[&Tile],
    pseudo: &BTreeMap<TileId, usize>,
) -> Result<f64, EncoderError> {
    let Some(head) = &encoder.cluster_head else {
        return Err(EncoderError::InvalidConfig("encoder has no cluster head".into()));
    };
    if tiles.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let n_classes = 2 * encoder.n_c;
    let embed_dim = encoder.embed_dim();
    let mut total = 0.0;
    for tile in tiles {
        let label = *pseudo
            .get(&tile.id)
            .ok_or(EncoderError::MissingPseudoLabel(tile.id))?;
        let embed = encoder.embed(&tile.features)?;
        let logits: Vec<f64> = (0..n_classes)
            .map(|c| {
                head[c * embed_dim..(c + 1) * embed_dim]
                    .iter()
                    .zip(&embed)
                    .map(|(w, e)| w * e)
                    .sum()
            })
            .collect();
        total -= neural::log_softmax(&logits)[label];
    }
    Ok(total / tiles.len() as f64)
}

/// Clustering loss and gradients for one batch: accumulates λ-scaled body
/// gradients into the prefix of `grad_net` and head gradients into `grad_w`.
/// Returns the unweighted mean cross-entropy.
fn cluster_batch_grad(
    body: &MlpParams,
    activation: Activation,
    head: &[f64],
    n_classes: usize,
    batch: &[&Tile],
    pseudo: &BTreeMap<TileId, usize>,
    lambda: f64,
    grad_net: &mut [f64],
    grad_head: &mut [f64],
) -> Result<f64, EncoderError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let embed_dim = body.output_dim();
    let body_len = body.n_params();
    let scale = lambda / batch.len() as f64;
    let mut total = 0.0;
    for tile in batch {
        let label = *pseudo
            .get(&tile.id)
            .ok_or(EncoderError::MissingPseudoLabel(tile.id))?;
        let trace = body.forward_trace(&tile.features)?;
        let pre: Vec<f64> = trace.output().to_vec();
        let embed: Vec<f64> = pre.iter().map(|&z| activation.apply(z)).collect();
        let logits: Vec<f64> = (0..n_classes)
            .map(|c| {
                head[c * embed_dim..(c + 1) * embed_dim]
                    .iter()
                    .zip(&embed)
                    .map(|(w, e)| w * e)
                    .sum()
            })
            .collect();
        let log_p = neural::log_softmax(&logits);
        total -= log_p[label];
        let mut d_embed = vec![0.0; embed_dim];
        for c in 0..n_classes {
            let delta = (log_p[c].exp() - if c == label { 1.0 } else { 0.0 }) * scale;
            let row = &head[c * embed_dim..(c + 1) * embed_dim];
            for j in 0..embed_dim {
                grad_head[c * embed_dim + j] += delta * embed[j];
                d_embed[j] += delta * row[j];
            }
        }
        let d_pre: Vec<f64> = d_embed
            .iter()
            .zip(&pre)
            .map(|(g, &z)| g * activation.derivative(z))
            .collect();
        body.backward(&tile.features, &trace, &d_pre, &mut grad_net[..body_len])?;
    }
    Ok(total / batch.len() as f64)
}

/// Clustering loss and its gradient over the full network's parameter vector
/// for a fixed cluster head, shaped for `neural::grad_check`. The final layer
/// does not feed the embeddings, so its slots stay zero.
pub fn cluster_objective_grad(
    network: &MlpParams,
    head: &[f64],
    n_classes: usize,
    batch: &[&Tile],
    pseudo: &BTreeMap<TileId, usize>,
    lambda: f64,
) -> Result<(f64, Vec<f64>), EncoderError> {
    let body = network.body()?;
    let mut grad_net = vec![0.0; network.n_params()];
    let mut grad_head = vec![0.0; head.len()];
    let loss = cluster_batch_grad(
        &body,
        network.activation(),
        head,
        n_classes,
        batch,
        pseudo,
        lambda,
        &mut grad_net,
        &mut grad_head,
    )?;
    Ok((loss, grad_net))
}

/// Negative-correlation loss against the batch's proxy intensities and its
/// parameter gradient, shaped for `neural::grad_check`. Errors when either
/// side of the batch has no variance.
pub fn pearson_objective_grad(
    network: &MlpParams,
    ord: &OrdinalConfig,
    batch: &[&Tile],
) -> Result<(f64, Vec<f64>), EncoderError> {
    pearson_batch_grad(network, ord, batch)?.ok_or(EncoderError::DegenerateBatch)
}

/// Per-epoch full-dataset losses observed during encoder training.
#[derive(Clone, Debug)]
pub struct EncoderCurve {
    pub class_loss: Vec<f64>,
    /// Empty when no clustering loss was trained.
    pub cluster_loss: Vec<f64>,
}

pub fn train_encoder(
    labeled: &[LabeledTile<'_>],
    unlabeled: &[&Tile],
    score_model: &ScoreModel,
    n_c: usize,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<Encoder, EncoderError> {
    Ok(train_encoder_with_curve(labeled, unlabeled, score_model, n_c, cfg, seed)?.0)
}

/// Fine-tunes a surrogate-source encoder from the score model.
///
/// Each epoch is one pass over the labeled set (batches of
/// `cfg.labeled_batch`); when n_c > 0 every step also consumes a batch of
/// `cfg.unlabeled_batch` unlabeled tiles for the clustering loss, whose
/// pseudo-labels and cluster head are refreshed at the start of the epoch.
pub fn train_encoder_with_curve(
    labeled: &[LabeledTile<'_>],
    unlabeled: &[&Tile],
    score_model: &ScoreModel,
    n_c: usize,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<(Encoder, EncoderCurve), EncoderError> {
    train_encoder_impl(labeled, unlabeled, score_model, n_c, cfg, seed)
}

fn train_encoder_impl(
    labeled: &[LabeledTile<'_>],
    unlabeled: &[&Tile],
    score_model: &ScoreModel,
    n_c: usize,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<(Encoder, EncoderCurve), EncoderError> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(EncoderError::EmptyLabeledSet);
    }
    let ord = score_model.config().clone();
    let mut network = score_model.params().clone();
    let activation = network.activation();
    let embed_dim = network.penultimate_dim();
    let n_classes = 2 * n_c;

    let mut net_state = OptimizerState::new(network.n_params(), cfg.learning_rate);
    let n_labeled = labeled.len();
    let steps_per_epoch = n_labeled.div_ceil(cfg.labeled_batch);
    // the labeled and unlabeled batch schedules use separate streams so the
    // labeled trajectory is identical whether or not clustering is active
    let mut x_rng = rng::stream(seed, TAG_ENC_X_ORDER);
    let mut u_rng = rng::stream(seed, TAG_ENC_U_ORDER);
    let mut x_order: Vec<usize> = (0..n_labeled).collect();
    let mut x_cursor = 0usize;
    let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut u_cursor = 0usize;

    let mut head: Option<Vec<f64>> = None;
    let mut curve = EncoderCurve { class_loss: Vec::new(), cluster_loss: Vec::new() };
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut pseudo: Option<BTreeMap<TileId, usize>> = None;
        let mut head_state: Option<OptimizerState> = None;
        if n_c > 0 {
            // cluster identities change with the embeddings, so labels and the
            // head restart each epoch; the head's optimizer state restarts too
            let probe = Encoder {
                network: network.clone(),
                cluster_head: None,
                n_c: 0,
                source: EncoderSource::Surrogate,
            };
            let refresh_seed = rng::derive_seed(seed, TAG_ENC_REFRESH ^ ((epoch as u64) << 8));
            pseudo = Some(pseudo_labels(&probe, score_model, unlabeled, n_c, refresh_seed)?);
            let w = init_cluster_head(
                embed_dim,
                n_classes,
                rng::derive_seed(seed, TAG_ENC_HEAD ^ ((epoch as u64) << 8)),
            );
            head_state = Some(OptimizerState::new(w.len(), cfg.learning_rate));
            head = Some(w);
        }
        for _ in 0..steps_per_epoch {
            if x_cursor == 0 {
                x_order.shuffle(&mut x_rng);
            }
            let end = (x_cursor + cfg.labeled_batch).min(n_labeled);
            let batch: Vec<LabeledTile<'_>> =
                x_order[x_cursor..end].iter().map(|&i| labeled[i]).collect();
            x_cursor = if end == n_labeled { 0 } else { end };

            let (class_value, mut grad_net) = hyperlocal::class_loss_grad(&network, &batch, &ord)?;
            let mut grad_head = Vec::new();
            let mut cluster_value = 0.0;
            if let (Some(pseudo), Some(w)) = (&pseudo, &head) {
                if u_cursor == 0 {
                    u_order.shuffle(&mut u_rng);
                }
                let uend = (u_cursor + cfg.unlabeled_batch).min(unlabeled.len());
                let ubatch: Vec<&Tile> = u_order[u_cursor..uend].iter().map(|&i| unlabeled[i]).collect();
                u_cursor = if uend == unlabeled.len() { 0 } else { uend };
                grad_head = vec![0.0; w.len()];
                let body = network.body()?;
                cluster_value = cluster_batch_grad(
                    &body,
                    activation,
                    w,
                    n_classes,
                    &ubatch,
                    pseudo,
                    cfg.lambda,
                    &mut grad_net,
                    &mut grad_head,
                )?;
            }
            let finite = class_value.is_finite()
                && cluster_value.is_finite()
                && grad_net.iter().all(|g| g.is_finite())
                && grad_head.iter().all(|g| g.is_finite());
            if !finite {
                return Err(NeuralError::Divergence { step: global_step }.into());
            }
            if let (Some(w), Some(state)) = (&mut head, &mut head_state) {
                state.apply(w, &grad_head);
            }
            net_state.apply(network.values_mut(), &grad_net);
            global_step += 1;
        }
        curve.class_loss.push(hyperlocal::dataset_loss(&network, labeled, &ord)?);
        if let (Some(pseudo), Some(w)) = (&pseudo, &head) {
            let snapshot = Encoder {
                network: network.clone(),
                cluster_head: Some(w.clone()),
                n_c,
                source: EncoderSource::Surrogate,
            };
            curve.cluster_loss.push(cluster_loss(&snapshot, unlabeled, pseudo)?);
        }
    }
    Ok((
        Encoder { network, cluster_head: head, n_c, source: EncoderSource::Surrogate },
        curve,
    ))
}

/// Negative Pearson correlation between two batches.
pub fn pearson_loss(scores: &[f64], proxy: &[f64]) -> Result<f64, EncoderError> {
    if scores.len() != proxy.len() {
        return Err(EncoderError::LengthMismatch(scores.len(), proxy.len()));
    }
    match pearson_parts(scores, proxy) {
        Some((a, b, c)) => Ok(-a / (b * c).sqrt()),
        None => Err(EncoderError::DegenerateBatch),
    }
}

/// Centered cross and self products (A, B, C) with ρ = A/√(BC), or None when
/// the batch is too small or either side has (numerically) zero variance.
fn pearson_parts(scores: &[f64], proxy: &[f64]) -> Option<(f64, f64, f64)> {
    let n = scores.len();
    if n < 2 {
        return None;
    }
    let ms = scores.iter().sum::<f64>() / n as f64;
    let mp = proxy.iter().sum::<f64>() / n as f64;
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for (s, p) in scores.iter().zip(proxy) {
        let sh = s - ms;
        let ph = p - mp;
        a += sh * ph;
        b += sh * sh;
        c += ph * ph;
    }
    if b < 1e-12 || c < 1e-12 {
        return None;
    }
    Some((a, b, c))
}

/// Loss −ρ(clamped scores, proxy) over a batch, with gradients through the
/// network. Returns None when the batch is degenerate (skipped by training).
fn pearson_batch_grad(
    network: &MlpParams,
    ord: &OrdinalConfig,
    batch: &[&Tile],
) -> Result<Option<(f64, Vec<f64>)>, EncoderError> {
    let traces: Vec<_> = batch
        .iter()
        .map(|t| network.forward_trace(&t.features))
        .collect::<Result<_, _>>()?;
    let raw: Vec<f64> = traces.iter().map(|t| t.output()[0]).collect();
    let scores: Vec<f64> = raw.iter().map(|&r| hyperlocal::clamp_score(r, ord)).collect();
    let proxy: Vec<f64> = batch.iter().map(|t| t.proxy_intensity).collect();
    let Some((a, b, c)) = pearson_parts(&scores, &proxy) else {
        return Ok(None);
    };
    let n = batch.len() as f64;
    let ms = scores.iter().sum::<f64>() / n;
    let mp = proxy.iter().sum::<f64>() / n;
    let denom = (b * c).sqrt();
    let mut grad = vec![0.0; network.n_params()];
    for (i, tile) in batch.iter().enumerate() {
        let sh = scores[i] - ms;
        let ph = proxy[i] - mp;
        let d_score = -(ph - (a / b) * sh) / denom;
        let in_range = (ord.t_min..=ord.t_max).contains(&raw[i]);
        let d_raw = if in_range { d_score } else { 0.0 };
        network.backward(&tile.features, &traces[i], &[d_raw], &mut grad)?;
    }
    Ok(Some((-a / denom, grad)))
}

pub fn train_proxy_encoder(
    tiles: &[&Tile],
    score_model: &ScoreModel,
    n_c: usize,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<Encoder, EncoderError> {
    Ok(train_proxy_encoder_with_curve(tiles, score_model, n_c, cfg, seed)?.0)
}

/// Fine-tunes a proxy-source encoder from the score model by minimizing the
/// negative Pearson correlation between its (clamped) scores and the tiles'
/// proxy intensities, per batch; when n_c > 0 and the config enables it, the
/// clustering loss is trained alongside exactly as for the surrogate source.
///
/// The curve holds the full-dataset Pearson loss after each epoch.
pub fn train_proxy_encoder_with_curve(
    tiles: &[&Tile],
    score_model: &ScoreModel,
    n_c: usize,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<(Encoder, Vec<f64>), EncoderError> {
    cfg.validate()?;
    if tiles.len() < 2 {
        return Err(EncoderError::DegenerateBatch);
    }
    let ord = score_model.config().clone();
    let mut network = score_model.params().clone();
    let activation = network.activation();
    let embed_dim = network.penultimate_dim();
    let use_cluster = n_c > 0 && cfg.proxy_cluster_loss;
    let n_classes = 2 * n_c;

    let mut net_state = OptimizerState::new(network.n_params(), cfg.learning_rate);
    let steps_per_epoch = tiles.len().div_ceil(cfg.unlabeled_batch);
    let mut order_rng = rng::stream(seed, TAG_PROXY_ORDER);
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let mut cursor = 0usize;

    let mut head: Option<Vec<f64>> = None;
    let mut curve = Vec::new();
    let mut applied_pearson = 0usize;
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut pseudo: Option<BTreeMap<TileId, usize>> = None;
        let mut head_state: Option<OptimizerState> = None;
        if use_cluster {
            let probe = Encoder {
                network: network.clone(),
                cluster_head: None,
                n_c: 0,
                source: EncoderSource::Proxy,
            };
            let refresh_seed = rng::derive_seed(seed, TAG_ENC_REFRESH ^ ((epoch as u64) << 8) ^ 1);
            pseudo = Some(pseudo_labels(&probe, score_model, tiles, n_c, refresh_seed)?);
            let w = init_cluster_head(
                embed_dim,
                n_classes,
                rng::derive_seed(seed, TAG_ENC_HEAD ^ ((epoch as u64) << 8) ^ 1),
            );
            head_state = Some(OptimizerState::new(w.len(), cfg.learning_rate));
            head = Some(w);
        }
        for _ in 0..steps_per_epoch {
            if cursor == 0 {
                order.shuffle(&mut order_rng);
            }
            let end = (cursor + cfg.unlabeled_batch).min(tiles.len());
            let batch: Vec<&Tile> = order[cursor..end].iter().map(|&i| tiles[i]).collect();
            cursor = if end == tiles.len() { 0 } else { end };

            let mut grad_net = vec![0.0; network.n_params()];
            let mut loss = 0.0;
            if let Some((pearson, grad)) = pearson_batch_grad(&network, &ord, &batch)? {
                for (g, p) in grad_net.iter_mut().zip(&grad) {
                    *g += p;
                }
                loss += pearson;
                applied_pearson += 1;
            }
            let mut grad_head = Vec::new();
            if let (Some(pseudo), Some(w)) = (&pseudo, &head) {
                grad_head = vec![0.0; w.len()];
                let body = network.body()?;
                loss += cfg.lambda
                    * cluster_batch_grad(
                        &body,
                        activation,
                        w,
                        n_classes,
                        &batch,
                        pseudo,
                        cfg.lambda,
                        &mut grad_net,
                        &mut grad_head,
                    )?;
            }
            let finite = loss.is_finite()
                && grad_net.iter().all(|g| g.is_finite())
                && grad_head.iter().all(|g| g.is_finite());
            if !finite {
                return Err(NeuralError::Divergence { step: global_step }.into());
            }
            if let (Some(w), Some(state)) = (&mut head, &mut head_state) {
                state.apply(w, &grad_head);
            }
            net_state.apply(network.values_mut(), &grad_net);
            global_step += 1;
        }
        let scores: Vec<f64> = tiles
            .iter()
            .map(|t| network.forward(&t.features).map(|o| hyperlocal::clamp_score(o[0], &ord)))
            .collect::<Result<_, _>>()?;
        let proxies: Vec<f64> = tiles.iter().map(|t| t.proxy_intensity).collect();
        if let Ok(value) = pearson_loss(&scores, &proxies) {
            curve.push(value);
        }
    }
    if applied_pearson == 0 && !use_cluster {
        return Err(EncoderError::AllBatchesDegenerate);
    }
    Ok((
        Encoder { network, cluster_head: head, n_c, source: EncoderSource::Proxy },
        curve,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperlocal::{labeled_set, train_score_model};
    use crate::synthworld::{
        generate_world, sample_surrogate_labels, DistrictId, MixturePlan, TileClass, World,
        WorldSpec,
    };
    use proptest::prelude::*;

    /// Score model whose output is a fixed constant regardless of input.
    fn constant_score_model(dim: usize, value: f64) -> ScoreModel {
        let sizes = [dim, 1, 1];
        let mut values = vec![0.0; neural::param_count(&sizes)];
        *values.last_mut().unwrap() = value;
        let params = MlpParams::from_values(&sizes, Activation::Relu, values).unwrap();
        ScoreModel::new(params, OrdinalConfig { hidden: vec![1], ..OrdinalConfig::default() })
            .unwrap()
    }

    /// Score model computing score = features[0] (for non-negative inputs).
    fn passthrough_score_model() -> ScoreModel {
        // hidden: h = relu(x0); head: s = h
        let values = vec![1.0, 0.0, 0.0, 1.0, 0.0];
        let params = MlpParams::from_values(&[2, 1, 1], Activation::Relu, values).unwrap();
        ScoreModel::new(params, OrdinalConfig { hidden: vec![1], ..OrdinalConfig::default() })
            .unwrap()
    }

    fn tile(id: u32, features: Vec<f64>, proxy: f64) -> Tile {
        Tile {
            id: TileId(id),
            district: DistrictId(0),
            true_score: 0.0,
            true_class: TileClass::Rural,
            proxy_intensity: proxy,
            soft_label: None,
            features,
        }
    }

    fn fitted_world(seed: u64) -> (World, ScoreModel) {
        let world = generate_world(&WorldSpec::default(), seed).unwrap();
        let labels = sample_surrogate_labels(&world, 1000, seed ^ 1).unwrap();
        let labeled = labeled_set(&world, &labels);
        let model = train_score_model(&labeled, &OrdinalConfig::default(), seed ^ 2).unwrap();
        (world, model)
    }

    #[test]
    fn filtering_keeps_tiles_at_or_above_t1() {
        let world = generate_world(
            &WorldSpec { n_districts: 4, ..WorldSpec::default() },
            3,
        )
        .unwrap();
        let all_below = constant_score_model(16, -5.0);
        assert!(filter_inhabited(&all_below, world.tiles()).unwrap().is_empty());

        let all_above = constant_score_model(16, 5.0);
        assert_eq!(
            filter_inhabited(&all_above, world.tiles()).unwrap().len(),
            world.tiles().len()
        );

        let (world, model) = fitted_world(51);
        let kept = filter_inhabited(&model, world.tiles()).unwrap();
        let brute = world
            .tiles()
            .iter()
            .filter(|t| model.score(&t.features).unwrap() >= model.config().t1)
            .count();
        assert_eq!(kept.len(), brute);
        assert!(!kept.is_empty() && kept.len() < world.tiles().len());
    }

    #[test]
    fn degenerate_single_cluster_pseudo_labels_reproduce_the_strata() {
        let model = passthrough_score_model();
        let tiles: Vec<Tile> = (0..10)
            .map(|i| {
                // five rural (score 1..6) and five urban (score 11..16)
                let score = if i < 5 { 1.0 + i as f64 } else { 11.0 + (i - 5) as f64 };
                tile(i, vec![score, 0.0], 0.0)
            })
            .collect();
        let refs: Vec<&Tile> = tiles.iter().collect();
        let encoder = Encoder::initialized_from(&model, EncoderSource::Surrogate);
        let labels = pseudo_labels(&encoder, &model, &refs, 1, 7).unwrap();
        for tile in &refs {
            let expected = if tile.features[0] >= 10.0 { 1 } else { 0 };
            assert_eq!(labels[&tile.id], expected, "{}", tile.id);
        }
    }

    #[test]
    fn pseudo_labels_cover_every_tile_with_one_class_in_range() {
        let (world, model) = fitted_world(52);
        let inhabited = filter_inhabited(&model, world.tiles()).unwrap();
        let encoder = Encoder::initialized_from(&model, EncoderSource::Surrogate);
        let n_c = 30;
        let labels = pseudo_labels(&encoder, &model, &inhabited, n_c, 3).unwrap();
        assert_eq!(labels.len(), inhabited.len());
        let mut used = vec![false; 2 * n_c];
        for tile in &inhabited {
            let label = labels[&tile.id];
            assert!(label < 2 * n_c);
            used[label] = true;
        }
        // paper configuration: 30 clusters per stratum, 60 pseudo-classes
        assert!(used.iter().all(|&u| u), "some of the 2*n_c classes are unused");
    }

    #[test]
    fn undersized_strata_are_rejected() {
        let model = passthrough_score_model();
        let tiles: Vec<Tile> = (0..4)
            .map(|i| tile(i, vec![if i < 3 { 2.0 } else { 12.0 }, 0.0], 0.0))
            .collect();
        let refs: Vec<&Tile> = tiles.iter().collect();
        let encoder = Encoder::initialized_from(&model, EncoderSource::Surrogate);
        assert!(matches!(
            pseudo_labels(&encoder, &model, &refs, 2, 0),
            Err(EncoderError::StratumTooSmall { stratum: "urban", size: 1, n_c: 2 })
        ));
    }

    /// Encoder over 2-feature tiles whose embedding is relu(x) and whose
    /// cluster head is the given 2x2 matrix.
    fn toy_encoder(head: Vec<f64>) -> Encoder {
        let values = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let network = MlpParams::from_values(&[2, 2, 1], Activation::Relu, values).unwrap();
        Encoder { network, cluster_head: Some(head), n_c: 1, source: EncoderSource::Surrogate }
    }

    #[test]
    fn aligned_saturated_cluster_logits_give_near_zero_loss() {
        let encoder = toy_encoder(vec![10.0, 0.0, 0.0, 10.0]);
        let tiles = [tile(0, vec![1.0, 0.0], 0.0), tile(1, vec![0.0, 1.0], 0.0)];
        let refs: Vec<&Tile> = tiles.iter().collect();
        let pseudo: BTreeMap<TileId, usize> =
            [(TileId(0), 0usize), (TileId(1), 1usize)].into_iter().collect();
        let loss = cluster_loss(&encoder, &refs, &pseudo).unwrap();
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn uniform_cluster_logits_give_log_of_class_count() {
        let encoder = toy_encoder(vec![0.0; 4]);
        let tiles = [tile(0, vec![1.0, 2.0], 0.0), tile(1, vec![0.5, 0.1], 0.0)];
        let refs: Vec<&Tile> = tiles.iter().collect();
        let pseudo: BTreeMap<TileId, usize> =
            [(TileId(0), 1usize), (TileId(1), 0usize)].into_iter().collect();
        let loss = cluster_loss(&encoder, &refs, &pseudo).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_pseudo_label_is_an_error() {
        let encoder = toy_encoder(vec![0.0; 4]);
        let tiles = [tile(0, vec![1.0, 0.0], 0.0)];
        let refs: Vec<&Tile> = tiles.iter().collect();
        assert!(matches!(
            cluster_loss(&encoder, &refs, &BTreeMap::new()),
            Err(EncoderError::MissingPseudoLabel(TileId(0)))
        ));
    }

    #[test]
    fn cluster_gradients_pass_finite_difference_checks() {
        let network = MlpParams::init(&[4, 6, 1], Activation::Tanh, 5).unwrap();
        let mut rng = rng::stream(1, 2);
        let tiles: Vec<Tile> = (0..10)
            .map(|i| tile(i, (0..4).map(|_| rng::normal(&mut rng)).collect(), 0.0))
            .collect();
        let refs: Vec<&Tile> = tiles.iter().collect();
        let pseudo: BTreeMap<TileId, usize> =
            tiles.iter().enumerate().map(|(i, t)| (t.id, i % 4)).collect();
        let head = init_cluster_head(6, 4, 9);

        // network side, via the shared checker (head params see zero gradient)
        let objective = |p: &MlpParams| {
            let body = p.body()?;
            let mut grad = vec![0.0; p.n_params()];
            let mut grad_head = vec![0.0; head.len()];
            let loss = cluster_batch_grad(
                &body, Activation::Tanh, &head, 4, &refs, &pseudo, 1.0, &mut grad, &mut grad_head,
            )
            .map_err(|_| NeuralError::NonFiniteEval)?;
            Ok((loss, grad))
        };
        let err = neural::grad_check(objective, &network, 1e-5).unwrap();
        assert!(err < 1e-4, "network gradient error {err}");

        // head side, by direct central differences
        let body = network.body().unwrap();
        let mut grad = vec![0.0; network.n_params()];
        let mut grad_head = vec![0.0; head.len()];
        cluster_batch_grad(
            &body, Activation::Tanh, &head, 4, &refs, &pseudo, 1.0, &mut grad, &mut grad_head,
        )
        .unwrap();
        let eval = |w: &[f64]| {
            let mut g = vec![0.0; network.n_params()];
            let mut gh = vec![0.0; w.len()];
            cluster_batch_grad(&body, Activation::Tanh, w, 4, &refs, &pseudo, 1.0, &mut g, &mut gh)
                .unwrap()
        };
        let mut probe = head.clone();
        for i in 0..head.len() {
            let h = 1e-5;
            probe[i] = head[i] + h;
            let plus = eval(&probe);
            probe[i] = head[i] - h;
            let minus = eval(&probe);
            probe[i] = head[i];
            let central = (plus - minus) / (2.0 * h);
            let rel = (grad_head[i] - central).abs() / central.abs().max(1.0);
            assert!(rel < 1e-4, "head grad {i}: rel {rel}");
        }
    }

    #[test]
    fn initial_encoder_embeddings_equal_score_model_penultimate_activations() {
        let (world, model) = fitted_world(53);
        let encoder = Encoder::initialized_from(&model, EncoderSource::Surrogate);
        for tile in world.tiles().iter().take(50) {
            let e = encoder.embed(&tile.features).unwrap();
            let p = model.params().penultimate(&tile.features).unwrap();
            assert_eq!(e, p);
        }
    }

    #[test]
    fn zero_lambda_matches_class_only_training_exactly() {
        let (world, model) = fitted_world(54);
        let labels = sample_surrogate_labels(&world, 200, 9).unwrap();
        let labeled = labeled_set(&world, &labels);
        let inhabited = filter_inhabited(&model, world.tiles()).unwrap();
        let cfg_zero = EncoderConfig { lambda: 0.0, epochs: 2, ..EncoderConfig::default() };
        let cfg_plain = EncoderConfig { epochs: 2, ..EncoderConfig::default() };
        let with_clusters =
            train_encoder(&labeled, &inhabited, &model, 5, &cfg_zero, 42).unwrap();
        let class_only = train_encoder(&labeled, &inhabited, &model, 0, &cfg_plain, 42).unwrap();
        assert_eq!(with_clusters.network().values(), class_only.network().values());
        assert!(with_clusters.cluster_head().is_some());
        assert!(class_only.cluster_head().is_none());
    }

    #[test]
    fn encoder_training_is_deterministic() {
        let (world, model) = fitted_world(55);
        let labels = sample_surrogate_labels(&world, 120, 2).unwrap();
        let labeled = labeled_set(&world, &labels);
        let inhabited = filter_inhabited(&model, world.tiles()).unwrap();
        let cfg = EncoderConfig { epochs: 2, ..EncoderConfig::default() };
        let a = train_encoder(&labeled, &inhabited, &model, 3, &cfg, 7).unwrap();
        let b = train_encoder(&labeled, &inhabited, &model, 3, &cfg, 7).unwrap();
        assert_eq!(a.network().values(), b.network().values());
        assert_eq!(a.cluster_head(), b.cluster_head());
        let c = train_encoder(&labeled, &inhabited, &model, 3, &cfg, 8).unwrap();
        assert_ne!(a.network().values(), c.network().values());
    }

    #[test]
    fn paper_default_encoder_losses_are_finite_and_improve() {
        let (world, model) = fitted_world(56);
        let labels = sample_surrogate_labels(&world, 1000, 4).unwrap();
        let labeled = labeled_set(&world, &labels);
        let inhabited = filter_inhabited(&model, world.tiles()).unwrap();
        let cfg = EncoderConfig::default();
        let (encoder, curve) =
            train_encoder_with_curve(&labeled, &inhabited, &model, 30, &cfg, 21).unwrap();
        assert_eq!(encoder.n_c(), 30);
        assert_eq!(curve.class_loss.len(), 5);
        assert_eq!(curve.cluster_loss.len(), 5);
        assert!(curve.class_loss.iter().all(|l| l.is_finite()));
        assert!(curve.cluster_loss.iter().all(|l| l.is_finite()));
        // fine-tuning starts from the class loss's own optimum, so the cluster
        // objective can only trade against it; the ordering must survive
        assert!(
            *curve.class_loss.last().unwrap() < curve.class_loss.first().unwrap() + 0.2,
            "class loss degraded too far: {:?}",
            curve.class_loss
        );
        assert!(
            curve.cluster_loss.last().unwrap() < curve.cluster_loss.first().unwrap(),
            "cluster loss did not improve: {:?}",
            curve.cluster_loss
        );
    }

    #[test]
    fn pearson_loss_matches_its_analytic_cases() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let same = pearson_loss(&xs, &xs).unwrap();
        assert!((same + 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let flipped = pearson_loss(&xs, &neg).unwrap();
        assert!((flipped - 1.0).abs() < 1e-12);
        let affine: Vec<f64> = xs.iter().map(|x| 2.5 * x + 7.0).collect();
        let scaled = pearson_loss(&xs, &affine).unwrap();
        assert!((scaled + 1.0).abs() < 1e-12);

        assert!(matches!(
            pearson_loss(&[1.0, 1.0, 1.0], &xs[..3]),
            Err(EncoderError::DegenerateBatch)
        ));
        assert!(matches!(pearson_loss(&[1.0], &[2.0]), Err(EncoderError::DegenerateBatch)));
        assert!(matches!(
            pearson_loss(&[1.0, 2.0], &[1.0]),
            Err(EncoderError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn pearson_gradient_passes_the_finite_difference_check() {
        let network = MlpParams::init(&[3, 5, 1], Activation::Tanh, 77).unwrap();
        let ord = OrdinalConfig::default();
        let mut rng = rng::stream(4, 4);
        let tiles: Vec<Tile> = (0..16)
            .map(|i| {
                let features: Vec<f64> = (0..3).map(|_| rng::normal(&mut rng)).collect();
                let proxy = features[0] + 0.1 * rng::normal(&mut rng);
                tile(i, features, proxy)
            })
            .collect();
        let refs: Vec<&Tile> = tiles.iter().collect();
        let objective = |p: &MlpParams| match pearson_batch_grad(p, &ord, &refs) {
            Ok(Some(pair)) => Ok(pair),
            Ok(None) => Err(NeuralError::NonFiniteEval),
            Err(_) => Err(NeuralError::NonFiniteEval),
        };
        let err = neural::grad_check(objective, &network, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn proxy_encoder_tracks_the_latent_score_on_the_zero_noise_world() {
        let spec = WorldSpec {
            feature_noise: 0.0,
            proxy_noise: 0.0,
            flip_prob: 0.0,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec, 61).unwrap();
        let labels = sample_surrogate_labels(&world, 1000, 1).unwrap();
        let labeled = labeled_set(&world, &labels);
        let ord = OrdinalConfig { epochs: 40, ..OrdinalConfig::default() };
        let model = train_score_model(&labeled, &ord, 13).unwrap();

        let half = world.tiles().len() / 2;
        let train: Vec<&Tile> = world.tiles()[..half].iter().collect();
        let held_out: Vec<&Tile> = world.tiles()[half..].iter().collect();
        let encoder =
            train_proxy_encoder(&train, &model, 0, &EncoderConfig::default(), 17).unwrap();
        assert_eq!(encoder.source(), EncoderSource::Proxy);

        let scores: Vec<f64> = held_out
            .iter()
            .map(|t| encoder.head_score(&t.features).unwrap())
            .collect();
        let proxies: Vec<f64> = held_out.iter().map(|t| t.proxy_intensity).collect();
        let rho = -pearson_loss(&scores, &proxies).unwrap();
        assert!(rho >= 0.9, "held-out pearson {rho}");
    }

    #[test]
    fn proxy_training_descends_and_is_deterministic() {
        let (world, model) = fitted_world(57);
        let tiles: Vec<&Tile> = world.tiles().iter().collect();
        let cfg = EncoderConfig { epochs: 3, ..EncoderConfig::default() };
        let (encoder, curve) =
            train_proxy_encoder_with_curve(&tiles, &model, 0, &cfg, 19).unwrap();
        assert!(curve.len() == 3 && curve.iter().all(|l| l.is_finite()));
        assert!(
            curve.last().unwrap() <= curve.first().unwrap(),
            "pearson loss did not descend: {curve:?}"
        );
        let again = train_proxy_encoder(&tiles, &model, 0, &cfg, 19).unwrap();
        assert_eq!(encoder.network().values(), again.network().values());
    }

    #[test]
    fn constant_proxy_world_cannot_train_a_pure_pearson_member() {
        let spec = WorldSpec {
            class_mixture: MixturePlan::Uniform { weights: [1.0, 0.0, 0.0] },
            proxy_noise: 0.0,
            n_districts: 3,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec, 5).unwrap();
        let tiles: Vec<&Tile> = world.tiles().iter().collect();
        let model = constant_score_model(16, 5.0);
        assert!(matches!(
            train_proxy_encoder(&tiles, &model, 0, &EncoderConfig::default(), 0),
            Err(EncoderError::AllBatchesDegenerate)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pearson_loss_is_affine_invariant_and_sign_flipping(
            xs in proptest::collection::vec(-50.0f64..50.0, 5..20),
            scale in 0.1f64..10.0,
            shift in -100.0f64..100.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x + (i as f64) * 3.0).collect();
            prop_assume!(pearson_parts(&xs, &ys).is_some());
            let base = pearson_loss(&xs, &ys).unwrap();
            let stretched: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            let invariant = pearson_loss(&stretched, &ys).unwrap();
            prop_assert!((base - invariant).abs() < 1e-9);
            let negated: Vec<f64> = xs.iter().map(|x| -x).collect();
            let flipped = pearson_loss(&negated, &ys).unwrap();
            prop_assert!((base + flipped).abs() < 1e-9);
        }
    }
}
