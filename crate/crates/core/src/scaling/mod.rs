//! Step 3: pairwise-union augmentation of labeled districts, log-ratio
//! scaling targets, the forest regressor fit on them, and the multi-level
//! predictor that multiplies the district-scale signal back out. Also hosts
//! the stage-wise pipeline that trains all three steps in order.

mod forest;

pub use forest::{
    constant_forest, fit_forest, forest_predict, ForestConfig, RegressionForest, RegressionTree,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::districtrep::{
    district_score_sum, ensemble_feature, fit_pca, merge_representations,
    DistrictRepresentation, ProjectedEncoder, RepError, DEFAULT_PCA_COMPONENTS,
};
use crate::encfeat::{
    filter_inhabited, train_encoder, train_proxy_encoder, Encoder, EncoderConfig, EncoderError,
    EncoderSource,
};
use crate::hyperlocal::{labeled_set, train_score_model, OrdinalConfig, ScoreError, ScoreModel};
use crate::rng;
use crate::synthworld::{
    sample_surrogate_labels, District, DistrictId, IndicatorKind, Tile, World, WorldError,
};

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("invalid scaling config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptySet,
    #[error("{inputs} inputs but {targets} targets")]
    SizeMismatch { inputs: usize, targets: usize },
    #[error("input length {got} does not match the trained dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in scaling inputs")]
    NonFinite,
    #[error("label {label} is not positive; log-ratio targets need positive labels")]
    NonPositiveLabel { label: f64 },
    #[error("duplicate {0} in the training districts")]
    DuplicateDistrict(DistrictId),
    #[error("{0} has no tiles")]
    EmptyDistrict(DistrictId),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ScalingError>,
    },
    #[error(transparent)]
    Rep(#[from] RepError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Wraps a stage's failure with the stage name for pipeline error reports.
fn stage<E: Into<ScalingError>>(name: &'static str) -> impl FnOnce(E) -> ScalingError {
    move |e| ScalingError::Stage { stage: name, source: Box::new(e.into()) }
}

/// How a union district's label aggregates its parts'.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Extensive indicators add across a union.
    Sum,
    /// Intensive indicators combine as a tile-count-weighted mean.
    TileWeightedMean,
}

impl LabelMode {
    pub fn for_indicator(kind: IndicatorKind) -> Self {
        match kind {
            IndicatorKind::Extensive => LabelMode::Sum,
            IndicatorKind::Intensive => LabelMode::TileWeightedMean,
        }
    }
}

/// Where an augmented entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original(DistrictId),
    Union(DistrictId, DistrictId),
}

/// One training district (original or synthetic union) with its label.
#[derive(Clone, Debug)]
pub struct AugmentedEntry {
    pub district: District,
    pub label: f64,
    pub provenance: Provenance,
}

/// All original districts followed by their pairwise unions.
#[derive(Clone, Debug)]
pub struct AugmentedSet {
    pub entries: Vec<AugmentedEntry>,
}

const TAG_AUGMENT: u64 = 0x4155_0001;

/// Expands N labeled districts into N + C(N, 2) entries: the originals plus
/// every unordered pair merged into a union district whose label aggregates
/// per `mode`. Union districts get fresh ids above the largest original id.
pub fn augment_districts(
    districts: &[(District, f64)],
    mode: LabelMode,
) -> Result<AugmentedSet, ScalingError> {
    augment_districts_capped(districts, mode, None, 0)
}

/// As [`augment_districts`], but keeps at most `max_pairs` unions, sampled
/// uniformly without replacement under `seed` when the cap binds.
pub fn augment_districts_capped(
    districts: &[(District, f64)],
    mode: LabelMode,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<AugmentedSet, ScalingError> {
    if districts.is_empty() {
        return Err(ScalingError::EmptySet);
    }
    let mut seen = BTreeSet::new();
    let mut max_id = 0u32;
    for (district, label) in districts {
        if !label.is_finite() {
            return Err(ScalingError::NonFinite);
        }
        if district.tiles.is_empty() {
            return Err(ScalingError::EmptyDistrict(district.id));
        }
        if !seen.insert(district.id) {
            return Err(ScalingError::DuplicateDistrict(district.id));
        }
        max_id = max_id.max(district.id.0);
    }

    let n = districts.len();
    let mut entries: Vec<AugmentedEntry> = districts
        .iter()
        .map(|(district, label)| AugmentedEntry {
            district: district.clone(),
            label: *label,
            provenance: Provenance::Original(district.id),
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    if let Some(cap) = max_pairs {
        if pairs.len() > cap {
            let mut pair_rng = rng::stream(seed, TAG_AUGMENT);
            // partial Fisher-Yates: the first cap entries are the kept sample
            for i in 0..cap {
                let j = pair_rng.gen_range(i..pairs.len());
                pairs.swap(i, j);
            }
            pairs.truncate(cap);
        }
    }

    for (k, &(i, j)) in pairs.iter().enumerate() {
        let (a, ya) = &districts[i];
        let (b, yb) = &districts[j];
        let mut tiles = Vec::with_capacity(a.tiles.len() + b.tiles.len());
        tiles.extend_from_slice(&a.tiles);
        tiles.extend_from_slice(&b.tiles);
        let label = match mode {
            LabelMode::Sum => ya + yb,
            LabelMode::TileWeightedMean => {
                let (na, nb) = (a.tiles.len() as f64, b.tiles.len() as f64);
                (na * ya + nb * yb) / (na + nb)
            }
        };
        entries.push(AugmentedEntry {
            district: District {
                id: DistrictId(max_id + 1 + k as u32),
                tiles,
                labels: BTreeMap::new(),
            },
            label,
            provenance: Provenance::Union(a.id, b.id),
        });
    }
    Ok(AugmentedSet { entries })
}

/// A log-ratio regression target; `guarded` marks a denominator the eps floor
/// replaced (non-positive or tiny base signal).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTarget {
    pub value: f64,
    pub guarded: bool,
}

/// ln(label / max(base, eps)) for a district whose base signal is already
/// summed. The guard keeps the logarithm defined when scores sum below eps;
/// such targets are flagged rather than rejected.
pub fn scaling_target_from_sum(
    label: f64,
    base: f64,
    eps: f64,
) -> Result<ScalingTarget, ScalingError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(ScalingError::InvalidConfig(format!("eps {eps} must be a positive real")));
    }
    if !label.is_finite() || !base.is_finite() {
        return Err(ScalingError::NonFinite);
    }
    if label <= 0.0 {
        return Err(ScalingError::NonPositiveLabel { label });
    }
    let guarded = base < eps;
    Ok(ScalingTarget { value: (label / base.max(eps)).ln(), guarded })
}

/// The regression target for one district under the score model.
pub fn scaling_target(
    district: &District,
    label: f64,
    score_model: &ScoreModel,
    world: &World,
    eps: f64,
) -> Result<ScalingTarget, ScalingError> {
    let sum = district_score_sum(score_model, district, world)?;
    scaling_target_from_sum(label, sum, eps)
}

/// Pipeline variants matching the ablation rows of the experiments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// A single surrogate encoder (n_c = 30) instead of the six-member
    /// ensemble.
    NoEnsemble,
    /// Encoders stay at the score-model body; fine-tuning is skipped.
    NoFinetune,
    /// Tile count replaces the score sum as the scaling base signal.
    NoHyperlocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub ordinal: OrdinalConfig,
    pub encoder: EncoderConfig,
    pub forest: ForestConfig,
    /// Number of tiles given surrogate soft labels for the score model.
    pub surrogate_labels: usize,
    /// Cluster counts for the encoder ensemble; each appears once per source.
    pub cluster_sizes: Vec<usize>,
    pub pca_components: usize,
    /// Floor for the base-signal denominator in the scaling target.
    pub eps: f64,
    /// Optional cap on the number of union pairs during augmentation.
    pub max_pairs: Option<usize>,
    /// Disable to fit the forest on original districts only.
    pub augment: bool,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ordinal: OrdinalConfig::default(),
            encoder: EncoderConfig::default(),
            forest: ForestConfig::default(),
            surrogate_labels: 1000,
            cluster_sizes: vec![0, 30, 90],
            pca_components: DEFAULT_PCA_COMPONENTS,
            eps: 1e-6,
            max_pairs: None,
            augment: true,
            ablation: Ablation::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ScalingError> {
        self.ordinal.validate()?;
        self.encoder.validate()?;
        self.forest.validate()?;
        if self.surrogate_labels == 0 {
            return Err(ScalingError::InvalidConfig("surrogate label count must be positive".into()));
        }
        if self.cluster_sizes.is_empty() {
            return Err(ScalingError::InvalidConfig("at least one cluster size is required".into()));
        }
        if self.pca_components == 0 {
            return Err(ScalingError::InvalidConfig("PCA component count must be positive".into()));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(ScalingError::InvalidConfig(format!(
                "eps {} must be a positive real",
                self.eps
            )));
        }
        Ok(())
    }

    /// The (source, n_c) layout of the ensemble under the chosen ablation:
    /// every cluster size per source, surrogate members first.
    fn member_slots(&self) -> Vec<(EncoderSource, usize)> {
        match self.ablation {
            Ablation::NoEnsemble => vec![(EncoderSource::Surrogate, 30)],
            _ => {
                let mut slots = Vec::with_capacity(2 * self.cluster_sizes.len());
                for &n_c in &self.cluster_sizes {
                    slots.push((EncoderSource::Surrogate, n_c));
                }
                for &n_c in &self.cluster_sizes {
                    slots.push((EncoderSource::Proxy, n_c));
                }
                slots
            }
        }
    }
}

/// The district-scale multiplier in the final prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSignal {
    /// Sum of tile scores.
    ScoreSum,
    /// Plain tile count; the stand-in when tile scoring is ablated.
    TileCount,
}

/// The trained three-step predictor: tile scorer, projected encoder ensemble,
/// and the forest over district representations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiLevelModel {
    score_model: ScoreModel,
    members: Vec<ProjectedEncoder>,
    forest: RegressionForest,
    eps: f64,
    base: BaseSignal,
}

impl MultiLevelModel {
    /// Assembles a model from trained parts, checking that the forest input
    /// length matches the ensemble's representation length.
    pub fn from_parts(
        score_model: ScoreModel,
        members: Vec<ProjectedEncoder>,
        forest: RegressionForest,
        eps: f64,
        base: BaseSignal,
    ) -> Result<Self, ScalingError> {
        if members.is_empty() {
            return Err(ScalingError::Rep(RepError::EmptyEnsemble));
        }
        let components = members[0].projector.n_components();
        if members.iter().any(|m| m.projector.n_components() != components) {
            return Err(ScalingError::InvalidConfig(
                "ensemble members disagree on PCA component count".into(),
            ));
        }
        let expected = 2 * members.len() * components + 1;
        if forest.input_dim() != expected {
            return Err(ScalingError::DimensionMismatch { expected, got: forest.input_dim() });
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(ScalingError::InvalidConfig(format!("eps {eps} must be a positive real")));
        }
        Ok(Self { score_model, members, forest, eps, base })
    }

    pub fn score_model(&self) -> &ScoreModel {
        &self.score_model
    }

    pub fn members(&self) -> &[ProjectedEncoder] {
        &self.members
    }

    pub fn forest(&self) -> &RegressionForest {
        &self.forest
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn base(&self) -> BaseSignal {
        self.base
    }

    /// The district representation under this model's ensemble.
    pub fn represent(
        &self,
        district: &District,
        world: &World,
    ) -> Result<DistrictRepresentation, ScalingError> {
        Ok(ensemble_feature(&self.members, &self.score_model, district, world)?)
    }

    fn base_value(&self, rep: &DistrictRepresentation, district: &District) -> f64 {
        match self.base {
            BaseSignal::ScoreSum => rep.score_sum(),
            BaseSignal::TileCount => district.tiles.len() as f64,
        }
    }

    /// Final district prediction: the eps-floored base signal times the
    /// exponentiated forest output on the district representation.
    pub fn predict_district(
        &self,
        district: &District,
        world: &World,
    ) -> Result<f64, ScalingError> {
        let rep = self.represent(district, world)?;
        let h = forest_predict(&self.forest, rep.values())?;
        Ok(self.base_value(&rep, district).max(self.eps) * h.exp())
    }
}

/// Outputs of the first two training steps, reusable across forest fits on
/// different district splits.
#[derive(Clone, Debug)]
pub struct Stage12 {
    pub score_model: ScoreModel,
    pub members: Vec<ProjectedEncoder>,
}

/// Counts reported alongside the fitted forest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Report {
    /// Training entries after augmentation.
    pub entries: usize,
    /// Targets whose denominator hit the eps floor.
    pub guarded_targets: usize,
}

const TAG_PIPE_LABELS: u64 = 0x5049_0001;
const TAG_PIPE_SCORE: u64 = 0x5049_0002;
const TAG_PIPE_MEMBER: u64 = 0x5049_0003;
const TAG_PIPE_FOREST: u64 = 0x5049_0004;
const TAG_PIPE_PAIRS: u64 = 0x5049_0005;

/// Trains the score model and the encoder ensemble with per-member PCA
/// projectors fitted on the inhabited training tiles' embeddings.
pub fn train_stage12(
    world: &World,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Stage12, ScalingError> {
    cfg.validate()?;
    let labels = sample_surrogate_labels(
        world,
        cfg.surrogate_labels,
        rng::derive_seed(seed, TAG_PIPE_LABELS),
    )
    .map_err(stage("surrogate sampling"))?;
    let labeled = labeled_set(world, &labels);
    let score_model =
        train_score_model(&labeled, &cfg.ordinal, rng::derive_seed(seed, TAG_PIPE_SCORE))
            .map_err(stage("score model"))?;
    let inhabited =
        filter_inhabited(&score_model, world.tiles()).map_err(stage("inhabited filter"))?;
    let all: Vec<&Tile> = world.tiles().iter().collect();

    let mut members = Vec::new();
    for (slot, (source, n_c)) in cfg.member_slots().into_iter().enumerate() {
        let member_seed = rng::derive_seed(seed, TAG_PIPE_MEMBER ^ ((slot as u64) << 8));
        let encoder = match (cfg.ablation, source) {
            (Ablation::NoFinetune, _) => Encoder::initialized_from(&score_model, source),
            (_, EncoderSource::Surrogate) => {
                train_encoder(&labeled, &inhabited, &score_model, n_c, &cfg.encoder, member_seed)
                    .map_err(stage("encoder fine-tuning"))?
            }
            (_, EncoderSource::Proxy) => {
                // Clustering members train on the inhabited-filtered pool the
                // pseudo-labeling expects; the pure-correlation member sees
                // every tile.
                let tiles: &[&Tile] = if n_c > 0 && cfg.encoder.proxy_cluster_loss {
                    &inhabited
                } else {
                    &all
                };
                train_proxy_encoder(tiles, &score_model, n_c, &cfg.encoder, member_seed)
                    .map_err(stage("encoder fine-tuning"))?
            }
        };
        let embeddings: Vec<Vec<f64>> = inhabited
            .iter()
            .map(|t| encoder.embed(&t.features))
            .collect::<Result<_, _>>()
            .map_err(stage("PCA fit"))?;
        let projector =
            fit_pca(&embeddings, cfg.pca_components).map_err(stage("PCA fit"))?;
        members.push(ProjectedEncoder { encoder, projector });
    }
    Ok(Stage12 { score_model, members })
}

/// Builds the augmented training set over the given districts, computes the
/// log-ratio targets, and fits the forest, producing the full predictor.
/// Union representations are merged from the parts' population moments, so
/// their score-sum coordinate is exactly the sum of the parts'.
pub fn train_stage3(
    world: &World,
    indicator: &str,
    train_districts: &[DistrictId],
    stage12: &Stage12,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(MultiLevelModel, Stage3Report), ScalingError> {
    cfg.validate()?;
    if train_districts.is_empty() {
        return Err(ScalingError::EmptySet);
    }
    let kind = world.indicator_kind(indicator).map_err(stage("augmentation"))?;
    let truth = world.ground_truth(indicator).map_err(stage("augmentation"))?;
    let mut originals = Vec::with_capacity(train_districts.len());
    for &id in train_districts {
        let district = world
            .districts()
            .get(id.0 as usize)
            .ok_or(WorldError::UnknownDistrict(id))
            .map_err(stage("augmentation"))?;
        originals.push((district.clone(), truth[&district.id]));
    }
    let mode = LabelMode::for_indicator(kind);
    let cap = if cfg.augment { cfg.max_pairs } else { Some(0) };
    let augmented =
        augment_districts_capped(&originals, mode, cap, rng::derive_seed(seed, TAG_PIPE_PAIRS))
            .map_err(stage("augmentation"))?;

    let base = match cfg.ablation {
        Ablation::NoHyperlocal => BaseSignal::TileCount,
        _ => BaseSignal::ScoreSum,
    };

    // Representations are summarized once per original district; unions
    // combine the parts' moments instead of re-walking their tiles.
    let mut reps: BTreeMap<DistrictId, (DistrictRepresentation, usize)> = BTreeMap::new();
    for (district, _) in &originals {
        let rep = ensemble_feature(&stage12.members, &stage12.score_model, district, world)
            .map_err(stage("district representation"))?;
        reps.insert(district.id, (rep, district.tiles.len()));
    }

    let mut inputs = Vec::with_capacity(augmented.entries.len());
    let mut targets = Vec::with_capacity(augmented.entries.len());
    let mut guarded_targets = 0usize;
    for entry in &augmented.entries {
        let rep = match entry.provenance {
            Provenance::Original(id) => reps[&id].0.clone(),
            Provenance::Union(i, j) => {
                let (ra, na) = &reps[&i];
                let (rb, nb) = &reps[&j];
                merge_representations(ra, *na, rb, *nb)
                    .map_err(stage("district representation"))?
            }
        };
        let base_value = match base {
            BaseSignal::ScoreSum => rep.score_sum(),
            BaseSignal::TileCount => entry.district.tiles.len() as f64,
        };
        let target = scaling_target_from_sum(entry.label, base_value, cfg.eps)
            .map_err(stage("scaling targets"))?;
        guarded_targets += target.guarded as usize;
        targets.push(target.value);
        inputs.push(rep.values().to_vec());
    }

    let forest = fit_forest(&inputs, &targets, &cfg.forest, rng::derive_seed(seed, TAG_PIPE_FOREST))
        .map_err(stage("forest fit"))?;
    let model = MultiLevelModel::from_parts(
        stage12.score_model.clone(),
        stage12.members.clone(),
        forest,
        cfg.eps,
        base,
    )?;
    Ok((model, Stage3Report { entries: augmented.entries.len(), guarded_targets }))
}

/// Runs all three training steps on one world and district split.
pub fn train_pipeline(
    world: &World,
    indicator: &str,
    train_districts: &[DistrictId],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MultiLevelModel, ScalingError> {
    Ok(train_pipeline_with_report(world, indicator, train_districts, cfg, seed)?.0)
}

pub fn train_pipeline_with_report(
    world: &World,
    indicator: &str,
    train_districts: &[DistrictId],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(MultiLevelModel, Stage3Report), ScalingError> {
    let stage12 = train_stage12(world, cfg, seed)?;
    train_stage3(world, indicator, train_districts, &stage12, cfg, seed)
}
