//! District representations: PCA-projected encoder embeddings summarized per
//! district as per-coordinate means and standard deviations, concatenated
//! with the district's summed hyperlocal score. An ensemble of encoders
//! contributes one mean block and one standard-deviation block each.

mod pca;

pub use pca::{fit_pca, PcaProjector};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encfeat::{Encoder, EncoderError};
use crate::hyperlocal::{ScoreError, ScoreModel};
use crate::synthworld::{District, DistrictId, World};

/// Principal components kept per encoder.
pub const DEFAULT_PCA_COMPONENTS: usize = 3;

#[derive(Debug, Error)]
pub enum RepError {
    #[error("invalid component request: {0}")]
    InvalidComponents(String),
    #[error("PCA needs at least {needed} points, got {points}")]
    TooFewPoints { points: usize, needed: usize },
    #[error("points mix dimensions")]
    MixedDims,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance is zero: all points identical")]
    DegenerateCovariance,
    #[error("{0} has no tiles")]
    EmptyDistrict(DistrictId),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("non-finite value in input")]
    NonFinite,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// An encoder paired with the PCA projector fitted on its embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectedEncoder {
    pub encoder: Encoder,
    pub projector: PcaProjector,
}

impl ProjectedEncoder {
    /// Embeds one tile's features and projects them to PCA coordinates.
    pub fn project(&self, features: &[f64]) -> Result<Vec<f64>, RepError> {
        self.projector.apply(&self.encoder.embed(features)?)
    }
}

/// Fixed-length district summary: the mean blocks of all ensemble members,
/// then their standard-deviation blocks, then the summed hyperlocal score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistrictRepresentation {
    values: Vec<f64>,
    members: usize,
    components: usize,
}

impl DistrictRepresentation {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn mean_block(&self, member: usize) -> &[f64] {
        &self.values[member * self.components..(member + 1) * self.components]
    }

    pub fn std_block(&self, member: usize) -> &[f64] {
        let off = (self.members + member) * self.components;
        &self.values[off..off + self.components]
    }

    pub fn score_sum(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// Per-coordinate mean and population standard deviation of the member's
/// projections over the given tiles.
fn member_blocks(
    member: &ProjectedEncoder,
    district: &District,
    world: &World,
) -> Result<(Vec<f64>, Vec<f64>), RepError> {
    let c = member.projector.n_components();
    let n = district.tiles.len() as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for &id in &district.tiles {
        let proj = member.project(&world.tile(id).features)?;
        for ((m, s), v) in mean.iter_mut().zip(&mut sq).zip(&proj) {
            *m += v;
            *s += v * v;
        }
    }
    for (m, s) in mean.iter_mut().zip(&mut sq) {
        *m /= n;
        *s = (*s / n - *m * *m).max(0.0).sqrt();
    }
    Ok((mean, sq))
}

/// Sum of the score model's (clamped) scores over a district's tiles.
pub fn district_score_sum(
    score_model: &ScoreModel,
    district: &District,
    world: &World,
) -> Result<f64, RepError> {
    let mut total = 0.0;
    for &id in &district.tiles {
        total += score_model.score(&world.tile(id).features)?;
    }
    Ok(total)
}

/// Representation of one district under a single encoder: [mean block,
/// standard-deviation block, score sum].
pub fn district_feature(
    member: &ProjectedEncoder,
    score_model: &ScoreModel,
    district: &District,
    world: &World,
) -> Result<DistrictRepresentation, RepError> {
    ensemble_feature(std::slice::from_ref(member), score_model, district, world)
}

/// Representation of one district under an encoder ensemble: all members'
/// mean blocks, then all their standard-deviation blocks, then the score sum.
/// Length 2·M·components + 1.
pub fn ensemble_feature(
    members: &[ProjectedEncoder],
    score_model: &ScoreModel,
    district: &District,
    world: &World,
) -> Result<DistrictRepresentation, RepError> {
    if members.is_empty() {
        return Err(RepError::EmptyEnsemble);
    }
    if district.tiles.is_empty() {
        return Err(RepError::EmptyDistrict(district.id));
    }
    let components = members[0].projector.n_components();
    if members.iter().any(|m| m.projector.n_components() != components) {
        return Err(RepError::InvalidComponents(
            "ensemble members disagree on component count".into(),
        ));
    }
    let mut means = Vec::with_capacity(members.len() * components);
    let mut stds = Vec::with_capacity(members.len() * components);
    for member in members {
        let (mean, std) = member_blocks(member, district, world)?;
        means.extend(mean);
        stds.extend(std);
    }
    let mut values = means;
    values.extend(stds);
    values.push(district_score_sum(score_model, district, world)?);
    Ok(DistrictRepresentation { values, members: members.len(), components })
}

/// Representation of the disjoint union of two districts, combined from the
/// parts' population moments: means merge count-weighted, variances through
/// E[x²] − µ², and the score-sum coordinate is the exact sum of the parts'.
pub fn merge_representations(
    a: &DistrictRepresentation,
    n_a: usize,
    b: &DistrictRepresentation,
    n_b: usize,
) -> Result<DistrictRepresentation, RepError> {
    if a.members != b.members || a.components != b.components {
        return Err(RepError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if n_a == 0 || n_b == 0 {
        return Err(RepError::InvalidComponents("merge counts must be positive".into()));
    }
    let (wa, wb) = (n_a as f64, n_b as f64);
    let n = wa + wb;
    let block = a.members * a.components;
    let mut values = Vec::with_capacity(a.len());
    for i in 0..block {
        values.push((wa * a.values[i] + wb * b.values[i]) / n);
    }
    for i in 0..block {
        let (ma, mb) = (a.values[i], b.values[i]);
        let (sa, sb) = (a.values[block + i], b.values[block + i]);
        let mu = values[i];
        let second = (wa * (sa * sa + ma * ma) + wb * (sb * sb + mb * mb)) / n;
        values.push((second - mu * mu).max(0.0).sqrt());
    }
    values.push(a.score_sum() + b.score_sum());
    Ok(DistrictRepresentation { values, members: a.members, components: a.components })
}
