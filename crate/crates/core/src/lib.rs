//! Multi-level development estimation from tile features.
//!
//! The library builds the full pipeline: an ordinal score model over tiles, a
//! set of fine-tuned encoders summarized into district representations, and a
//! district-level scaling model that converts aggregated tile scores into
//! absolute indicator estimates. A synthetic world generator with known ground
//! truth backs evaluation, robustness, transfer, and inequality analyses.

pub mod analysis;
pub mod districtrep;
pub mod encfeat;
pub mod hyperlocal;
pub mod neural;
pub mod rng;
pub mod scaling;
pub mod synthworld;
