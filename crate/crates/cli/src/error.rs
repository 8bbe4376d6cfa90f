//! The binary's error taxonomy. Every failure is folded into one of four
//! categories, each with its own exit code, so scripts can distinguish a bad
//! config from a diverged training run without parsing messages.

use geolevels_core::analysis::AnalysisError;
use geolevels_core::encfeat::EncoderError;
use geolevels_core::districtrep::RepError;
use geolevels_core::hyperlocal::ScoreError;
use geolevels_core::neural::NeuralError;
use geolevels_core::scaling::ScalingError;
use geolevels_core::synthworld::dataset::DatasetError;
use geolevels_core::synthworld::WorldError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

/// Which exit category an error belongs to; carried by every classifier below
/// so nested wrappers can delegate to their source's classification.
enum Category {
    Config,
    Data,
    Divergence,
}

fn wrap(category: Category, message: String) -> CliError {
    match category {
        Category::Config => CliError::Config(message),
        Category::Data => CliError::Data(message),
        Category::Divergence => CliError::Divergence(message),
    }
}

fn neural_category(e: &NeuralError) -> Category {
    match e {
        NeuralError::Divergence { .. } | NeuralError::NonFiniteEval => Category::Divergence,
        NeuralError::ShapeMismatch { .. } | NeuralError::InvalidShape(_) => Category::Data,
    }
}

fn world_category(e: &WorldError) -> Category {
    match e {
        WorldError::InvalidSpec(_)
        | WorldError::UnknownIndicator(_)
        | WorldError::SampleTooLarge { .. } => Category::Config,
        WorldError::UnknownDistrict(_) | WorldError::Degenerate(_) => Category::Data,
    }
}

fn score_category(e: &ScoreError) -> Category {
    match e {
        ScoreError::InvalidConfig(_) => Category::Config,
        ScoreError::Neural(inner) => neural_category(inner),
        _ => Category::Data,
    }
}

fn encoder_category(e: &EncoderError) -> Category {
    match e {
        EncoderError::InvalidConfig(_) => Category::Config,
        EncoderError::Neural(inner) => neural_category(inner),
        EncoderError::Score(inner) => score_category(inner),
        _ => Category::Data,
    }
}

fn rep_category(e: &RepError) -> Category {
    match e {
        RepError::InvalidComponents(_) => Category::Config,
        RepError::NonFinite => Category::Divergence,
        RepError::Encoder(inner) => encoder_category(inner),
        RepError::Score(inner) => score_category(inner),
        _ => Category::Data,
    }
}

fn scaling_category(e: &ScalingError) -> Category {
    match e {
        ScalingError::InvalidConfig(_) => Category::Config,
        ScalingError::NonFinite => Category::Divergence,
        ScalingError::Stage { source, .. } => scaling_category(source),
        ScalingError::Rep(inner) => rep_category(inner),
        ScalingError::Encoder(inner) => encoder_category(inner),
        ScalingError::Score(inner) => score_category(inner),
        ScalingError::World(inner) => world_category(inner),
        _ => Category::Data,
    }
}

fn analysis_category(e: &AnalysisError) -> Category {
    match e {
        AnalysisError::InvalidConfig(_) => Category::Config,
        AnalysisError::NonFinite => Category::Divergence,
        AnalysisError::Repetition { source, .. } => analysis_category(source),
        AnalysisError::Scaling(inner) => scaling_category(inner),
        AnalysisError::World(inner) => world_category(inner),
        _ => Category::Data,
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        wrap(world_category(&e), e.to_string())
    }
}

impl From<ScalingError> for CliError {
    fn from(e: ScalingError) -> Self {
        wrap(scaling_category(&e), e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        wrap(analysis_category(&e), e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}
