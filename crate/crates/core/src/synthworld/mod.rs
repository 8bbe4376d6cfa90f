//! Seeded synthetic "countries": tiles with latent development scores grouped
//! into districts, with ground-truth indicator labels built in the same
//! multiplicative form the pipeline assumes. Because the latents are known,
//! every downstream stage can be scored against an exact oracle.

pub mod dataset;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("unknown indicator {0:?}")]
    UnknownIndicator(String),
    #[error("unknown {0}")]
    UnknownDistrict(DistrictId),
    #[error("requested {requested} surrogate labels but the world has {available} tiles")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("degenerate world: {0}")]
    Degenerate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistrictId(pub u32);

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tile {}", self.0)
    }
}

impl fmt::Display for DistrictId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "district {}", self.0)
    }
}

/// Ground-truth settlement class of a tile, in ordinal order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileClass {
    Uninhabited,
    Rural,
    Urban,
}

pub const N_CLASSES: usize = 3;

impl TileClass {
    pub const ALL: [TileClass; N_CLASSES] =
        [TileClass::Uninhabited, TileClass::Rural, TileClass::Urban];

    pub fn index(self) -> usize {
        match self {
            TileClass::Uninhabited => 0,
            TileClass::Rural => 1,
            TileClass::Urban => 2,
        }
    }
}

/// Closed real interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.lo + rng.gen::<f64>() * (self.hi - self.lo)
    }

    /// Sample from the sub-interval of relative width `width` whose position
    /// slides from the low end (`pos` = 0) to the high end (`pos` = 1).
    fn sample_window(&self, rng: &mut impl Rng, pos: f64, width: f64) -> f64 {
        let span = self.hi - self.lo;
        let start = self.lo + pos * (1.0 - width) * span;
        start + rng.gen::<f64>() * (width * span)
    }
}

/// Latent score interval per settlement class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRanges {
    pub uninhabited: Interval,
    pub rural: Interval,
    pub urban: Interval,
}

impl ScoreRanges {
    pub fn for_class(&self, class: TileClass) -> Interval {
        match class {
            TileClass::Uninhabited => self.uninhabited,
            TileClass::Rural => self.rural,
            TileClass::Urban => self.urban,
        }
    }
}

/// Per-district class mixture, possibly varying across the country.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "snake_case")]
pub enum MixturePlan {
    /// Every district draws classes from the same weights.
    Uniform { weights: [f64; 3] },
    /// One weight vector per district.
    Explicit { weights: Vec<[f64; 3]> },
    /// Linear interpolation from the first district's weights to the last's.
    Gradient { start: [f64; 3], end: [f64; 3] },
    /// Interpolation from start to end weights along a power-law quantile
    /// grid instead of an even one: most districts sit near the start mixture
    /// and a thin tail reaches the end, so per-district development
    /// composition spans a heavy-tailed range with the given tail shape.
    PowerTail { start: [f64; 3], end: [f64; 3], shape: f64 },
}

fn default_score_window() -> f64 {
    0.35
}

fn lerp3(start: &[f64; 3], end: &[f64; 3], t: f64) -> [f64; 3] {
    [
        (1.0 - t) * start[0] + t * end[0],
        (1.0 - t) * start[1] + t * end[1],
        (1.0 - t) * start[2] + t * end[2],
    ]
}

impl MixturePlan {
    pub fn mixture_for(&self, district: usize, n_districts: usize) -> [f64; 3] {
        match self {
            MixturePlan::Uniform { weights } => *weights,
            MixturePlan::Explicit { weights } => weights[district],
            MixturePlan::Gradient { start, end } | MixturePlan::PowerTail { start, end, .. } => {
                lerp3(start, end, self.position_for(district, n_districts))
            }
        }
    }

    /// Development position of a district within the plan, in [0, 1]: the
    /// interpolation parameter for `Gradient` and `PowerTail`, the relative
    /// index for `Explicit`, and 0.5 for `Uniform` (all districts alike).
    pub fn position_for(&self, district: usize, n_districts: usize) -> f64 {
        match self {
            MixturePlan::Uniform { .. } => 0.5,
            _ if n_districts <= 1 => 0.0,
            MixturePlan::Explicit { .. } | MixturePlan::Gradient { .. } => {
                district as f64 / (n_districts - 1) as f64
            }
            MixturePlan::PowerTail { shape, .. } => {
                // Pareto quantiles at centered ranks, rescaled so the first
                // district sits exactly at 0 and the last exactly at 1.
                let n = n_districts as f64;
                let q = |p: f64| (1.0 - p).powf(-1.0 / shape);
                let lo = q(0.5 / n);
                let hi = q((n - 0.5) / n);
                (q((district as f64 + 0.5) / n) - lo) / (hi - lo)
            }
        }
    }
}

/// Pareto law for the latent district factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorLaw {
    pub shape: f64,
    pub scale: f64,
}

/// Whether an indicator sums or averages when districts merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    /// Sums under district union (e.g. total purchasing power).
    Extensive,
    /// Tile-count-weighted mean under district union (a per-tile rate).
    Intensive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileCountRange {
    pub min: usize,
    pub max: usize,
}

/// Everything needed to generate a world, minus the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_districts: usize,
    pub tiles_per_district: TileCountRange,
    pub feature_dim: usize,
    pub class_mixture: MixturePlan,
    pub true_score_ranges: ScoreRanges,
    /// Width, as a fraction of each class's score interval, of the window a
    /// district's tile scores are drawn from. Each district places the window
    /// independently at random, once for its inhabited classes jointly (a
    /// prosperity level the class mixture alone does not reveal) and once for
    /// its uninhabited terrain; 1.0 widens every window to the full interval,
    /// removing both effects.
    #[serde(default = "default_score_window")]
    pub score_window: f64,
    pub district_factor_law: FactorLaw,
    pub feature_noise: f64,
    pub proxy_noise: f64,
    pub flip_prob: f64,
    pub indicators: BTreeMap<String, IndicatorKind>,
    /// Seed of the latent-to-feature embedding. Held fixed across worlds by
    /// default so that models trained on one country see the same feature
    /// semantics in another (the transferability setting).
    pub embedding_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let mut indicators = BTreeMap::new();
        indicators.insert("power".to_string(), IndicatorKind::Extensive);
        indicators.insert("power_per_tile".to_string(), IndicatorKind::Intensive);
        Self {
            n_districts: 60,
            tiles_per_district: TileCountRange { min: 40, max: 160 },
            feature_dim: 16,
            class_mixture: MixturePlan::PowerTail {
                start: [0.07875, 0.89125, 0.03],
                end: [0.65625, 0.09375, 0.25],
                shape: 1.2,
            },
            true_score_ranges: ScoreRanges {
                uninhabited: Interval { lo: -5.0, hi: -0.5 },
                rural: Interval { lo: 1.5, hi: 6.5 },
                urban: Interval { lo: 11.0, hi: 18.0 },
            },
            score_window: 0.35,
            district_factor_law: FactorLaw { shape: 1.2, scale: 1.0 },
            feature_noise: 0.3,
            proxy_noise: 0.5,
            flip_prob: 0.05,
            indicators,
            embedding_seed: 0x454d_4245,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |msg: String| Err(WorldError::InvalidSpec(msg));
        if self.n_districts == 0 {
            return fail("n_districts must be positive".into());
        }
        let range = self.tiles_per_district;
        if range.min == 0 || range.min > range.max {
            return fail(format!(
                "tiles_per_district must satisfy 1 <= min <= max, got [{}, {}]",
                range.min, range.max
            ));
        }
        if self.feature_dim < 4 {
            // the latent embedding maps a 4-vector (class one-hot, score) into
            // feature space; fewer dimensions cannot hold it
            return fail(format!("feature_dim must be at least 4, got {}", self.feature_dim));
        }
        for (name, iv) in [
            ("uninhabited", self.true_score_ranges.uninhabited),
            ("rural", self.true_score_ranges.rural),
            ("urban", self.true_score_ranges.urban),
        ] {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                return fail(format!("{name} score range [{}, {}] is not a valid interval", iv.lo, iv.hi));
            }
        }
        if self.true_score_ranges.uninhabited.hi >= self.true_score_ranges.rural.lo
            || self.true_score_ranges.rural.hi >= self.true_score_ranges.urban.lo
        {
            return fail("score ranges must be ordered uninhabited < rural < urban without overlap".into());
        }
        if let MixturePlan::PowerTail { shape, .. } = &self.class_mixture {
            if !(*shape > 0.0) {
                return fail(format!("power-tail mixture needs shape > 0, got {shape}"));
            }
        }
        if !(self.score_window > 0.0 && self.score_window <= 1.0) {
            return fail(format!("score_window {} outside (0, 1]", self.score_window));
        }
        for d in 0..self.n_districts {
            if let MixturePlan::Explicit { weights } = &self.class_mixture {
                if weights.len() != self.n_districts {
                    return fail(format!(
                        "explicit mixture has {} entries for {} districts",
                        weights.len(),
                        self.n_districts
                    ));
                }
            }
            let w = self.class_mixture.mixture_for(d, self.n_districts);
            if w.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return fail(format!("district {d} mixture {w:?} has weights outside [0, 1]"));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return fail(format!("district {d} mixture {w:?} sums to {total}, not 1"));
            }
        }
        if !(self.district_factor_law.shape > 0.0) || !(self.district_factor_law.scale > 0.0) {
            return fail("district factor law needs shape > 0 and scale > 0".into());
        }
        if self.feature_noise < 0.0 || self.proxy_noise < 0.0 {
            return fail("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if self.indicators.is_empty() {
            return fail("at least one indicator must be defined".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tile {
    pub id: TileId,
    pub district: DistrictId,
    pub features: Vec<f64>,
    /// Latent development score. Hidden from training, used by evaluation.
    pub true_score: f64,
    pub true_class: TileClass,
    /// Nightlight analog: thresholded noisy view of the latent score.
    pub proxy_intensity: f64,
    pub soft_label: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct District {
    pub id: DistrictId,
    pub tiles: Vec<TileId>,
    pub labels: BTreeMap<String, f64>,
}

/// A generated country. Immutable apart from surrogate-label attachment.
#[derive(Clone, Debug)]
pub struct World {
    spec: WorldSpec,
    seed: u64,
    tiles: Vec<Tile>,
    districts: Vec<District>,
    factors: Vec<f64>,
}

/// One sampled human-annotation analog.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateLabel {
    pub tile: TileId,
    pub soft: [f64; 3],
}

const TAG_COUNTS: u64 = 0x5753_0001;
const TAG_CLASSES: u64 = 0x5753_0002;
const TAG_FEATURES: u64 = 0x5753_0003;
const TAG_PROXY: u64 = 0x5753_0004;
const TAG_FACTORS: u64 = 0x5753_0005;
const TAG_EMBED: u64 = 0x5753_0006;
const TAG_SURROGATE: u64 = 0x5753_0007;

/// Fixed orthonormal embedding of the latent (class one-hot, score) 4-vector
/// into feature space. Orthonormality makes the zero-noise embedding exactly
/// invertible by its transpose.
struct LatentEmbedding {
    cols: [Vec<f64>; 4],
}

/// Magnitude given to the class one-hot before embedding. Kept well below the
/// latent score's scale: the score direction must dominate the features so
/// that ordinal training aligns with it instead of settling on class-indicator
/// shortcuts that leave urban scores short of the upper threshold.
const CLASS_SIGNAL: f64 = 0.5;

impl LatentEmbedding {
    fn build(spec: &WorldSpec) -> Result<Self, WorldError> {
        let d = spec.feature_dim;
        let mut rng = rng::stream(spec.embedding_seed, TAG_EMBED);
        let mut cols: [Vec<f64>; 4] = std::array::from_fn(|_| {
            (0..d).map(|_| rng::normal(&mut rng)).collect()
        });
        for j in 0..4 {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let prev = cols[k].clone();
                for (c, p) in cols[j].iter_mut().zip(&prev) {
                    *c -= dot * p;
                }
            }
            let norm = cols[j].iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(WorldError::Degenerate(
                    "latent embedding columns are linearly dependent".into(),
                ));
            }
            for c in cols[j].iter_mut() {
                *c /= norm;
            }
        }
        Ok(Self { cols })
    }

    fn latent(class: TileClass, score: f64) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[class.index()] = CLASS_SIGNAL;
        v[3] = score;
        v
    }

    fn project(&self, class: TileClass, score: f64) -> Vec<f64> {
        let v = Self::latent(class, score);
        let d = self.cols[0].len();
        let mut x = vec![0.0; d];
        for (j, col) in self.cols.iter().enumerate() {
            for (xi, ci) in x.iter_mut().zip(col) {
                *xi += v[j] * ci;
            }
        }
        x
    }

    #[cfg(test)]
    fn invert(&self, features: &[f64]) -> [f64; 4] {
        std::array::from_fn(|j| {
            self.cols[j].iter().zip(features).map(|(c, x)| c * x).sum()
        })
    }
}

/// Labels for one district's tile set under factor `m`, for every indicator.
fn indicator_labels(
    tiles: &[&Tile],
    factor: f64,
    indicators: &BTreeMap<String, IndicatorKind>,
) -> BTreeMap<String, f64> {
    let base: f64 = tiles.iter().map(|t| t.true_score.max(0.0)).sum();
    indicators
        .iter()
        .map(|(name, kind)| {
            let value = match kind {
                IndicatorKind::Extensive => base * factor,
                IndicatorKind::Intensive => base * factor / tiles.len() as f64,
            };
            (name.clone(), value)
        })
        .collect()
}

pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<World, WorldError> {
    spec.validate()?;
    let embedding = LatentEmbedding::build(spec)?;
    let mut count_rng = rng::stream(seed, TAG_COUNTS);
    let mut class_rng = rng::stream(seed, TAG_CLASSES);
    let mut feature_rng = rng::stream(seed, TAG_FEATURES);
    let mut proxy_rng = rng::stream(seed, TAG_PROXY);
    let mut factor_rng = rng::stream(seed, TAG_FACTORS);

    let mut tiles: Vec<Tile> = Vec::new();
    let mut district_tiles: Vec<Vec<TileId>> = Vec::with_capacity(spec.n_districts);
    for d in 0..spec.n_districts {
        let range = spec.tiles_per_district;
        let count = count_rng.gen_range(range.min..=range.max);
        let weights = spec.class_mixture.mixture_for(d, spec.n_districts);
        let permits_inhabited = weights[1] + weights[2] > 0.0;

        // Two independent per-district window positions: one shared by the
        // inhabited classes (how far up their score intervals this district's
        // settlement sits) and one for uninhabited terrain (how far below zero
        // its empty land sits). Drawing them once per district, before the
        // redraw loop, keeps a redraw from shifting the district's character.
        let window_inhabited: f64 = class_rng.gen();
        let window_uninhabited: f64 = class_rng.gen();

        // Redraw a district that came out entirely uninhabited even though its
        // mixture permits settlement; such a district would carry a zero label
        // that no scaling target can represent.
        let mut drawn: Vec<(TileClass, f64)> = Vec::new();
        let mut accepted = false;
        for _ in 0..100 {
            drawn.clear();
            for _ in 0..count {
                let u: f64 = class_rng.gen();
                let class = if u < weights[0] {
                    TileClass::Uninhabited
                } else if u < weights[0] + weights[1] {
                    TileClass::Rural
                } else {
                    TileClass::Urban
                };
                let range = spec.true_score_ranges.for_class(class);
                let pos = if class == TileClass::Uninhabited {
                    window_uninhabited
                } else {
                    window_inhabited
                };
                let score = range.sample_window(&mut class_rng, pos, spec.score_window);
                drawn.push((class, score));
            }
            if !permits_inhabited || drawn.iter().any(|(c, _)| *c != TileClass::Uninhabited) {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(WorldError::Degenerate(format!(
                "district {d} drew only uninhabited tiles in 100 attempts"
            )));
        }

        let mut ids = Vec::with_capacity(count);
        for (class, score) in drawn {
            let id = TileId(tiles.len() as u32);
            let mut features = embedding.project(class, score);
            for f in features.iter_mut() {
                *f += spec.feature_noise * rng::normal(&mut feature_rng);
            }
            let proxy = (score + spec.proxy_noise * rng::normal(&mut proxy_rng)).max(0.0);
            tiles.push(Tile {
                id,
                district: DistrictId(d as u32),
                features,
                true_score: score,
                true_class: class,
                proxy_intensity: proxy,
                soft_label: None,
            });
            ids.push(id);
        }
        district_tiles.push(ids);
    }

    // District factors follow the Pareto law marginally; ranks are tied to the
    // districts' urban tile share so the factor is recoverable from observable
    // structure rather than pure noise.
    let mut draws: Vec<f64> = (0..spec.n_districts)
        .map(|_| {
            rng::pareto(
                &mut factor_rng,
                spec.district_factor_law.shape,
                spec.district_factor_law.scale,
            )
        })
        .collect();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut by_composition: Vec<usize> = (0..spec.n_districts).collect();
    let composition: Vec<f64> = district_tiles
        .iter()
        .map(|ids| {
            let urban =
                ids.iter().filter(|id| tiles[id.0 as usize].true_class == TileClass::Urban).count();
            urban as f64 / ids.len() as f64
        })
        .collect();
    by_composition.sort_by(|&a, &b| {
        composition[a].partial_cmp(&composition[b]).unwrap().then(a.cmp(&b))
    });
    let mut factors = vec![0.0; spec.n_districts];
    for (rank, &district) in by_composition.iter().enumerate() {
        factors[district] = draws[rank];
    }

    let districts = district_tiles
        .into_iter()
        .enumerate()
        .map(|(d, ids)| {
            let refs: Vec<&Tile> = ids.iter().map(|id| &tiles[id.0 as usize]).collect();
            District {
                id: DistrictId(d as u32),
                labels: indicator_labels(&refs, factors[d], &spec.indicators),
                tiles: ids,
            }
        })
        .collect();

    Ok(World {
        spec: spec.clone(),
        seed,
        tiles,
        districts,
        factors,
    })
}

impl World {
    /// Rebuilds a world from stored parts, enforcing the structural invariants.
    pub(crate) fn from_parts(
        spec: WorldSpec,
        seed: u64,
        tiles: Vec<Tile>,
        districts: Vec<District>,
        factors: Vec<f64>,
    ) -> Result<Self, WorldError> {
        spec.validate()?;
        let fail = |msg: String| Err(WorldError::Degenerate(msg));
        if factors.len() != districts.len() {
            return fail(format!(
                "{} factors for {} districts",
                factors.len(),
                districts.len()
            ));
        }
        for (i, tile) in tiles.iter().enumerate() {
            if tile.id.0 as usize != i {
                return fail(format!("tile ids are not dense: position {i} holds {}", tile.id));
            }
            if tile.features.len() != spec.feature_dim {
                return fail(format!("{} has {} features, spec says {}", tile.id, tile.features.len(), spec.feature_dim));
            }
            if !tile.features.iter().all(|f| f.is_finite()) {
                return fail(format!("{} has non-finite features", tile.id));
            }
            if let Some(soft) = tile.soft_label {
                let total: f64 = soft.iter().sum();
                if soft.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return fail(format!("{} soft label {soft:?} is not on the simplex", tile.id));
                }
            }
        }
        let mut seen = vec![false; tiles.len()];
        for (i, district) in districts.iter().enumerate() {
            if district.id.0 as usize != i {
                return fail(format!(
                    "district ids are not dense: position {i} holds {}",
                    district.id
                ));
            }
            if district.tiles.is_empty() {
                return fail(format!("{} has no tiles", district.id));
            }
            for &tid in &district.tiles {
                let Some(slot) = seen.get_mut(tid.0 as usize) else {
                    return fail(format!("{} references unknown {tid}", district.id));
                };
                if *slot {
                    return fail(format!("{tid} appears in two districts"));
                }
                *slot = true;
                if tiles[tid.0 as usize].district != district.id {
                    return fail(format!("{tid} disagrees with {} about membership", district.id));
                }
            }
            if district.labels.values().any(|v| !v.is_finite()) {
                return fail(format!("{} has non-finite labels", district.id));
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return fail(format!("tile {orphan} belongs to no district"));
        }
        Ok(Self { spec, seed, tiles, districts, factors })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn tile(&self, id: TileId) -> &Tile {
        &self.tiles[id.0 as usize]
    }

    pub fn districts(&self) -> &[District] {
        &self.districts
    }

    pub fn district(&self, id: DistrictId) -> &District {
        &self.districts[id.0 as usize]
    }

    pub fn district_tiles(&self, id: DistrictId) -> impl Iterator<Item = &Tile> {
        self.district(id).tiles.iter().map(|t| self.tile(*t))
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn factor(&self, id: DistrictId) -> f64 {
        self.factors[id.0 as usize]
    }

    pub fn indicator_kind(&self, indicator: &str) -> Result<IndicatorKind, WorldError> {
        self.spec
            .indicators
            .get(indicator)
            .copied()
            .ok_or_else(|| WorldError::UnknownIndicator(indicator.to_string()))
    }

    /// Constructed ground-truth labels for one indicator.
    pub fn ground_truth(&self, indicator: &str) -> Result<BTreeMap<DistrictId, f64>, WorldError> {
        self.indicator_kind(indicator)?;
        Ok(self
            .districts
            .iter()
            .map(|d| (d.id, d.labels[indicator]))
            .collect())
    }

    /// Ground-truth label for the union of several districts' tile sets,
    /// recomputed from the latent scores and factors rather than read off the
    /// stored per-district labels. Each tile keeps the development factor of
    /// the district it came from, so extensive indicators add across the parts
    /// and intensive ones combine as a tile-count-weighted mean.
    pub fn union_ground_truth(
        &self,
        indicator: &str,
        parts: &[DistrictId],
    ) -> Result<f64, WorldError> {
        let kind = self.indicator_kind(indicator)?;
        if parts.is_empty() {
            return Err(WorldError::Degenerate("empty district union".into()));
        }
        let mut total = 0.0;
        let mut tiles = 0usize;
        for &id in parts {
            let district = self
                .districts
                .get(id.0 as usize)
                .ok_or(WorldError::UnknownDistrict(id))?;
            let base: f64 = district
                .tiles
                .iter()
                .map(|t| self.tile(*t).true_score.max(0.0))
                .sum();
            total += base * self.factor(id);
            tiles += district.tiles.len();
        }
        Ok(match kind {
            IndicatorKind::Extensive => total,
            IndicatorKind::Intensive => total / tiles as f64,
        })
    }

    /// Attaches sampled soft labels to their tiles (for export).
    pub fn attach_labels(&mut self, labels: &[SurrogateLabel]) {
        for l in labels {
            self.tiles[l.tile.0 as usize].soft_label = Some(l.soft);
        }
    }
}

/// Uniformly samples `n` tiles without replacement and attaches soft labels:
/// the true-class one-hot with `flip_prob` of its mass moved to the ordinally
/// adjacent classes (split evenly for rural, whole for the extremes).
/// Annotation confusion is between neighbors; far-class mass on an extreme
/// label would pin its score on the wrong side of the distant threshold.
pub fn sample_surrogate_labels(
    world: &World,
    n: usize,
    seed: u64,
) -> Result<Vec<SurrogateLabel>, WorldError> {
    let total = world.tiles.len();
    if n > total {
        return Err(WorldError::SampleTooLarge { requested: n, available: total });
    }
    let mut rng = rng::stream(seed, TAG_SURROGATE);
    // partial Fisher-Yates: the first n slots end up a uniform sample
    let mut pool: Vec<u32> = (0..total as u32).collect();
    for i in 0..n {
        let j = rng.gen_range(i..total);
        pool.swap(i, j);
    }
    let p = world.spec.flip_prob;
    Ok(pool[..n]
        .iter()
        .map(|&idx| {
            let tile = &world.tiles[idx as usize];
            let mut soft = [0.0; 3];
            soft[tile.true_class.index()] = 1.0 - p;
            match tile.true_class {
                TileClass::Uninhabited | TileClass::Urban => soft[1] += p,
                TileClass::Rural => {
                    soft[0] += p / 2.0;
                    soft[2] += p / 2.0;
                }
            }
            SurrogateLabel { tile: tile.id, soft }
        })
        .collect())
}
