//! Evaluation metrics and experiment harnesses: repeated-split district
//! evaluation, data-shortage robustness, cross-world transfer, tile-level
//! score quality, and inequality summaries.

mod metrics;

pub use metrics::{
    correlation, fractional_ranks, gini, median_of, r_squared, zipf_fit, CorrelationKind, ZipfFit,
};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;
use crate::scaling::{
    forest_predict, train_pipeline, train_stage12, train_stage3, MultiLevelModel, PipelineConfig,
    ScalingError, Stage12,
};
use crate::synthworld::{DistrictId, World, WorldError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sequence lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{len} values where at least {needed} are required")]
    TooShort { len: usize, needed: usize },
    #[error("degenerate variance; the statistic is undefined")]
    DegenerateVariance,
    #[error("non-finite value in a metric input")]
    NonFinite,
    #[error("negative value in a Gini input")]
    NegativeValue,
    #[error("Gini of an all-zero sequence is undefined")]
    AllZero,
    #[error("non-positive value in a rank-size input")]
    NonPositive,
    #[error("{kept} points after the quantile filter where at least {needed} are required")]
    TooFewPoints { kept: usize, needed: usize },
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
    #[error("worlds disagree on feature dimension: {source_dim} vs {target_dim}")]
    FeatureDimMismatch { source_dim: usize, target_dim: usize },
    #[error("repetition {index}: {source}")]
    Repetition {
        index: usize,
        #[source]
        source: Box<AnalysisError>,
    },
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Settings for the repeated-split evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pipeline: PipelineConfig,
    pub train_fraction: f64,
    pub repetitions: usize,
    /// Train the score model and encoders once and share them across splits.
    /// Those stages never see district labels, so no split information leaks;
    /// the augmentation and forest are always refit per split.
    pub share_stage12: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            train_fraction: 0.8,
            repetitions: 100,
            share_stage12: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        self.pipeline.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(AnalysisError::InvalidConfig(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.repetitions == 0 {
            return Err(AnalysisError::InvalidConfig("at least one repetition is required".into()));
        }
        Ok(())
    }
}

/// Per-repetition out-of-sample R² values with their summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_squared: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the repetitions.
    pub std_dev: f64,
    /// Eps-guard hits in each repetition's scaling targets.
    pub guarded_targets: Vec<usize>,
    /// Digest of (config, world seed, indicator, seed) naming the run setup.
    pub fingerprint: String,
}

impl EvalReport {
    fn from_values(r_squared: Vec<f64>, guarded_targets: Vec<usize>, fingerprint: String) -> Self {
        let n = r_squared.len() as f64;
        let mean = r_squared.iter().sum::<f64>() / n;
        let var = r_squared.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Self { r_squared, mean, std_dev: var.sqrt(), guarded_targets, fingerprint }
    }

    pub fn median(&self) -> f64 {
        median_of(&self.r_squared).expect("reports hold at least one repetition")
    }
}

const TAG_EVAL_STAGE12: u64 = 0x414e_0001;
const TAG_EVAL_SPLIT: u64 = 0x414e_0002;
const TAG_EVAL_REP: u64 = 0x414e_0003;

fn fingerprint(cfg: &EvalConfig, world: &World, indicator: &str, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("configs serialize"));
    hasher.update(indicator.as_bytes());
    hasher.update(world.seed().to_le_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded shuffle split of the world's districts into train and test ids.
pub fn split_districts(
    world: &World,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<DistrictId>, Vec<DistrictId>), AnalysisError> {
    let n = world.districts().len();
    if n < 2 {
        return Err(AnalysisError::TooShort { len: n, needed: 2 });
    }
    let n_train = (((n as f64) * train_fraction).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<DistrictId> = world.districts().iter().map(|d| d.id).collect();
    let mut split_rng = rng::stream(seed, TAG_EVAL_SPLIT);
    for i in 0..n {
        let j = split_rng.gen_range(i..n);
        ids.swap(i, j);
    }
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

/// The repeated-split protocol: for each repetition, a seeded train/test
/// district split, a forest fit on the training side, and out-of-sample R²
/// on the test districts in the label's original scale.
pub fn evaluate(
    world: &World,
    indicator: &str,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport, AnalysisError> {
    cfg.validate()?;
    world.indicator_kind(indicator)?;
    let truth = world.ground_truth(indicator)?;
    let shared = if cfg.share_stage12 {
        Some(train_stage12(world, &cfg.pipeline, rng::derive_seed(seed, TAG_EVAL_STAGE12))?)
    } else {
        None
    };
    let mut r2 = Vec::with_capacity(cfg.repetitions);
    let mut guarded = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let run = || -> Result<(f64, usize), AnalysisError> {
            let rep_seed = rng::derive_seed(seed, TAG_EVAL_REP ^ ((rep as u64) << 16));
            let (train, test) = split_districts(world, cfg.train_fraction, rep_seed)?;
            let local;
            let stage12: &Stage12 = match &shared {
                Some(s) => s,
                None => {
                    local = train_stage12(world, &cfg.pipeline, rep_seed)?;
                    &local
                }
            };
            let (model, report) =
                train_stage3(world, indicator, &train, stage12, &cfg.pipeline, rep_seed)?;
            let mut t = Vec::with_capacity(test.len());
            let mut p = Vec::with_capacity(test.len());
            for id in &test {
                t.push(truth[id]);
                p.push(model.predict_district(world.district(*id), world)?);
            }
            Ok((r_squared(&t, &p)?, report.guarded_targets))
        };
        let (r, g) = run()
            .map_err(|e| AnalysisError::Repetition { index: rep, source: Box::new(e) })?;
        r2.push(r);
        guarded.push(g);
    }
    Ok(EvalReport::from_values(r2, guarded, fingerprint(cfg, world, indicator, seed)))
}

/// One train-fraction setting of the robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub fraction: f64,
    pub report: EvalReport,
}

/// Runs the evaluation protocol at each train fraction with augmentation
/// toggled, sharing the seed so a fraction matching `base.train_fraction`
/// reproduces `evaluate`'s output exactly.
pub fn robustness_curve(
    world: &World,
    indicator: &str,
    fractions: &[f64],
    with_augmentation: bool,
    base: &EvalConfig,
    seed: u64,
) -> Result<Vec<RobustnessPoint>, AnalysisError> {
    if fractions.is_empty() {
        return Err(AnalysisError::InvalidConfig("at least one train fraction is required".into()));
    }
    let n = world.districts().len();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(AnalysisError::InvalidConfig(format!(
                "train fraction {fraction} outside (0, 1)"
            )));
        }
        let n_train = (((n as f64) * fraction).round() as usize).min(n.saturating_sub(1));
        if n_train < 5 {
            return Err(AnalysisError::InvalidConfig(format!(
                "fraction {fraction} leaves {n_train} training districts; at least 5 are required"
            )));
        }
    }
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut cfg = base.clone();
        cfg.train_fraction = fraction;
        cfg.pipeline.augment = with_augmentation;
        points.push(RobustnessPoint { fraction, report: evaluate(world, indicator, &cfg, seed)? });
    }
    Ok(points)
}

/// Trains on every district of the source world and reports the Spearman
/// correlation of predictions against truth on the target world.
pub fn transfer_eval(
    source: &World,
    target: &World,
    indicator: &str,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let (sd, td) = (source.spec().feature_dim, target.spec().feature_dim);
    if sd != td {
        return Err(AnalysisError::FeatureDimMismatch { source_dim: sd, target_dim: td });
    }
    let ids: Vec<DistrictId> = source.districts().iter().map(|d| d.id).collect();
    let model = train_pipeline(source, indicator, &ids, cfg, seed)?;
    let truth = target.ground_truth(indicator)?;
    let mut t = Vec::with_capacity(target.districts().len());
    let mut p = Vec::with_capacity(target.districts().len());
    for district in target.districts() {
        t.push(truth[&district.id]);
        p.push(model.predict_district(district, target)?);
    }
    correlation(&t, &p, CorrelationKind::Spearman)
}

/// Each district's predicted scale factor e^{h} under the model.
pub fn district_multipliers(
    world: &World,
    model: &MultiLevelModel,
) -> Result<BTreeMap<DistrictId, f64>, AnalysisError> {
    let mut out = BTreeMap::new();
    for district in world.districts() {
        let rep = model.represent(district, world)?;
        let h = forest_predict(model.forest(), rep.values()).map_err(AnalysisError::from)?;
        out.insert(district.id, h.exp());
    }
    Ok(out)
}

/// Tile-level correlations of the original and district-adjusted scores
/// against the latent tile truth max(0, s)·m.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperlocalEval {
    pub pearson_original: f64,
    pub pearson_adjusted: f64,
    pub spearman_original: f64,
    pub spearman_adjusted: f64,
}

pub fn hyperlocal_eval(
    world: &World,
    model: &MultiLevelModel,
) -> Result<HyperlocalEval, AnalysisError> {
    let multipliers = district_multipliers(world, model)?;
    let n = world.tiles().len();
    let mut truth = Vec::with_capacity(n);
    let mut original = Vec::with_capacity(n);
    let mut adjusted = Vec::with_capacity(n);
    for tile in world.tiles() {
        truth.push(tile.true_score.max(0.0) * world.factor(tile.district));
        let f = model
            .score_model()
            .score(&tile.features)
            .map_err(|e| AnalysisError::Scaling(e.into()))?;
        original.push(f);
        adjusted.push(f * multipliers[&tile.district]);
    }
    Ok(HyperlocalEval {
        pearson_original: correlation(&truth, &original, CorrelationKind::Pearson)?,
        pearson_adjusted: correlation(&truth, &adjusted, CorrelationKind::Pearson)?,
        spearman_original: correlation(&truth, &original, CorrelationKind::Spearman)?,
        spearman_adjusted: correlation(&truth, &adjusted, CorrelationKind::Spearman)?,
    })
}

/// Within-district and national inequality summaries of the model's scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityEval {
    /// Gini of clamped-positive tile scores within each district.
    pub district_gini: BTreeMap<DistrictId, f64>,
    /// Gini over every tile's clamped-positive score.
    pub national_score_gini: f64,
    /// Gini over the districts' predicted scale factors.
    pub national_factor_gini: f64,
    /// Gini over every tile's adjusted score.
    pub national_adjusted_gini: f64,
}

/// Computes the inequality summaries. `factor_per_tile` switches the factor
/// Gini's population from one observation per district to one per tile.
pub fn inequality_eval(
    world: &World,
    model: &MultiLevelModel,
    factor_per_tile: bool,
) -> Result<InequalityEval, AnalysisError> {
    let multipliers = district_multipliers(world, model)?;
    let score = |tile: &crate::synthworld::Tile| -> Result<f64, AnalysisError> {
        model
            .score_model()
            .score(&tile.features)
            .map_err(|e| AnalysisError::Scaling(e.into()))
    };

    let mut district_gini = BTreeMap::new();
    let mut national_scores = Vec::with_capacity(world.tiles().len());
    let mut national_adjusted = Vec::with_capacity(world.tiles().len());
    for district in world.districts() {
        let mut clamped = Vec::with_capacity(district.tiles.len());
        for tile in world.district_tiles(district.id) {
            let s = score(tile)?.max(0.0);
            clamped.push(s);
            national_scores.push(s);
            national_adjusted.push(s * multipliers[&district.id]);
        }
        district_gini.insert(district.id, gini(&clamped)?);
    }

    let factors: Vec<f64> = if factor_per_tile {
        world
            .districts()
            .iter()
            .flat_map(|d| std::iter::repeat(multipliers[&d.id]).take(d.tiles.len()))
            .collect()
    } else {
        multipliers.values().copied().collect()
    };

    Ok(InequalityEval {
        district_gini,
        national_score_gini: gini(&national_scores)?,
        national_factor_gini: gini(&factors)?,
        national_adjusted_gini: gini(&national_adjusted)?,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::hyperlocal::OrdinalConfig;
    use crate::encfeat::EncoderConfig;
    use crate::scaling::{constant_forest, BaseSignal, ForestConfig};
    use crate::synthworld::{generate_world, TileCountRange, WorldSpec};

    fn tiny_world(seed: u64) -> World {
        let spec = WorldSpec {
            n_districts: 12,
            tiles_per_district: TileCountRange { min: 30, max: 50 },
            ..WorldSpec::default()
        };
        generate_world(&spec, seed).unwrap()
    }

    fn tiny_eval_config() -> EvalConfig {
        EvalConfig {
            pipeline: PipelineConfig {
                ordinal: OrdinalConfig { epochs: 40, ..OrdinalConfig::default() },
                encoder: EncoderConfig { epochs: 1, ..EncoderConfig::default() },
                forest: ForestConfig { n_trees: 25, ..ForestConfig::default() },
                surrogate_labels: 300,
                cluster_sizes: vec![0],
                ..PipelineConfig::default()
            },
            train_fraction: 0.75,
            repetitions: 3,
            share_stage12: true,
        }
    }

    struct Fixture {
        world: World,
        model: MultiLevelModel,
    }

    fn fixture() -> &'static Fixture {
        static FIXTURE: OnceLock<Fixture> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let world = tiny_world(5001);
            let ids: Vec<DistrictId> = world.districts().iter().map(|d| d.id).collect();
            let model =
                train_pipeline(&world, "power", &ids, &tiny_eval_config().pipeline, 17).unwrap();
            Fixture { world, model }
        })
    }

    #[test]
    fn split_is_seeded_and_respects_the_fraction() {
        let world = tiny_world(600);
        let (train, test) = split_districts(&world, 0.75, 3).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 3);
        let mut all: Vec<u32> = train.iter().chain(&test).map(|d| d.0).collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        let (again, _) = split_districts(&world, 0.75, 3).unwrap();
        assert_eq!(train, again);
        let (other, _) = split_districts(&world, 0.75, 4).unwrap();
        assert_ne!(train, other);
    }

    #[test]
    fn evaluate_is_reproducible_and_sized() {
        let world = tiny_world(601);
        let cfg = tiny_eval_config();
        let a = evaluate(&world, "power", &cfg, 11).unwrap();
        let b = evaluate(&world, "power", &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.r_squared.len(), 3);
        assert_eq!(a.guarded_targets.len(), 3);
        assert_eq!(a.fingerprint.len(), 64);
        let n = a.r_squared.len() as f64;
        let mean = a.r_squared.iter().sum::<f64>() / n;
        assert!((a.mean - mean).abs() < 1e-15);
        let var = a.r_squared.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        assert!((a.std_dev - var.sqrt()).abs() < 1e-15);

        let c = evaluate(&world, "power", &cfg, 12).unwrap();
        assert_ne!(a.fingerprint == c.fingerprint, true);
        assert_ne!(a.r_squared, c.r_squared);
    }

    #[test]
    fn unshared_stage12_retrains_per_repetition() {
        let world = tiny_world(602);
        let mut cfg = tiny_eval_config();
        cfg.repetitions = 2;
        cfg.share_stage12 = false;
        let report = evaluate(&world, "power", &cfg, 21).unwrap();
        assert_eq!(report.r_squared.len(), 2);
        assert!(report.r_squared.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn robustness_point_reproduces_the_evaluate_protocol() {
        let world = tiny_world(603);
        let cfg = tiny_eval_config();
        let points =
            robustness_curve(&world, "power", &[0.5, 0.75], true, &cfg, 31).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].fraction, 0.5);
        let direct = evaluate(&world, "power", &cfg, 31).unwrap();
        assert_eq!(points[1].report, direct);

        // fraction 0.1 of 12 districts rounds to one training district
        let err = robustness_curve(&world, "power", &[0.1], true, &cfg, 31).unwrap_err();
        assert!(matches!(err, AnalysisError::InvalidConfig(_)));
        assert!(matches!(
            robustness_curve(&world, "power", &[], true, &cfg, 31),
            Err(AnalysisError::InvalidConfig(_))
        ));
    }

    #[test]
    fn transfer_eval_is_deterministic_and_bounded() {
        let source = tiny_world(604);
        let target = tiny_world(605);
        let cfg = tiny_eval_config().pipeline;
        let a = transfer_eval(&source, &target, "power", &cfg, 41).unwrap();
        let b = transfer_eval(&source, &target, "power", &cfg, 41).unwrap();
        assert_eq!(a, b);
        assert!((-1.0..=1.0).contains(&a));

        let narrow = WorldSpec { feature_dim: 8, ..WorldSpec::default() };
        let other = generate_world(&narrow, 606).unwrap();
        assert!(matches!(
            transfer_eval(&source, &other, "power", &cfg, 41),
            Err(AnalysisError::FeatureDimMismatch { source_dim: 16, target_dim: 8 })
        ));
    }

    #[test]
    fn hyperlocal_eval_reports_bounded_correlations() {
        let fx = fixture();
        let eval = hyperlocal_eval(&fx.world, &fx.model).unwrap();
        for v in [
            eval.pearson_original,
            eval.pearson_adjusted,
            eval.spearman_original,
            eval.spearman_adjusted,
        ] {
            assert!((-1.0..=1.0).contains(&v), "{eval:?}");
        }
        let multipliers = district_multipliers(&fx.world, &fx.model).unwrap();
        assert_eq!(multipliers.len(), 12);
        assert!(multipliers.values().all(|m| m.is_finite() && *m > 0.0));
    }

    #[test]
    fn forcing_a_zero_forest_makes_adjusted_equal_original() {
        let fx = fixture();
        let components = fx.model.members()[0].projector.n_components();
        let dim = 2 * fx.model.members().len() * components + 1;
        let flat = MultiLevelModel::from_parts(
            fx.model.score_model().clone(),
            fx.model.members().to_vec(),
            constant_forest(0.0, dim, 2).unwrap(),
            fx.model.eps(),
            BaseSignal::ScoreSum,
        )
        .unwrap();
        let eval = hyperlocal_eval(&fx.world, &flat).unwrap();
        assert!((eval.pearson_original - eval.pearson_adjusted).abs() < 1e-9);
        assert!((eval.spearman_original - eval.spearman_adjusted).abs() < 1e-9);
    }

    #[test]
    fn inequality_eval_covers_every_district_with_bounded_ginis() {
        let fx = fixture();
        let eval = inequality_eval(&fx.world, &fx.model, false).unwrap();
        assert_eq!(eval.district_gini.len(), 12);
        for g in eval.district_gini.values() {
            assert!((0.0..1.0).contains(g), "district gini {g}");
        }
        for g in [
            eval.national_score_gini,
            eval.national_factor_gini,
            eval.national_adjusted_gini,
        ] {
            assert!((0.0..1.0).contains(&g), "national gini {g}");
        }
        // twelve districts of equal factor-population vs tile-weighted
        let per_tile = inequality_eval(&fx.world, &fx.model, true).unwrap();
        assert_eq!(per_tile.district_gini, eval.district_gini);
        assert_ne!(per_tile.national_factor_gini, eval.national_factor_gini);
    }

    #[test]
    fn invalid_eval_configs_are_rejected() {
        let world = tiny_world(607);
        let mut cfg = tiny_eval_config();
        cfg.train_fraction = 1.0;
        assert!(matches!(
            evaluate(&world, "power", &cfg, 1),
            Err(AnalysisError::InvalidConfig(_))
        ));
        let mut cfg = tiny_eval_config();
        cfg.repetitions = 0;
        assert!(matches!(
            evaluate(&world, "power", &cfg, 1),
            Err(AnalysisError::InvalidConfig(_))
        ));
        let cfg = tiny_eval_config();
        assert!(matches!(
            evaluate(&world, "missing", &cfg, 1),
            Err(AnalysisError::World(WorldError::UnknownIndicator(_)))
        ));
    }
}
