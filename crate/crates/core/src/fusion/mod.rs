//! Per-view uncertainty ensembles and precision-weighted Gaussian fusion.
//!
//! Each view owns a block of `T` member networks predicting a diagonal
//! Gaussian `(μ_t, σ_t)` over the per-primitive state vector. A block reduces
//! its members to a mean `μ̂`, an aleatoric part `AU = mean σ_t`, an
//! epistemic part `EU = mean (μ_t − μ̂)²` and the total `σ̂ = AU + EU`. Views
//! are fused elementwise by precision: `Σ = (Σ_i 1/σ̂_i)⁻¹`,
//! `μ = Σ · Σ_i μ̂_i/σ̂_i`.

mod aggregate;
mod block;
mod pipeline;

use thiserror::Error;

pub use aggregate::{
    aggregate_nodes, block_aggregate, fuse_nodes, gaussian_fuse, uniform_fuse, DistNodes,
    FusedNodes, FusedState, StateDistribution,
};
pub use block::{member_forward, Member, UncertaintyBlock};
pub use pipeline::{consistency_nll, fuse_pipeline, write_diagnostics, PipelineNodes};

use crate::features::ViewKind;

/// Members per block unless configured otherwise.
pub const DEFAULT_MEMBERS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("a block needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("nothing to fuse")]
    NoViews,
    #[error("variance {0} is below the floor")]
    BelowFloor(f64),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("no feature supplied for the {} block", .0.name())]
    MissingView(ViewKind),
}

/// How view estimates are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Precision-weighted Gaussian fusion.
    Uncertainty,
    /// Plain average of the view means.
    Uniform,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Uncertainty => "uncertainty",
            FusionMode::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "uncertainty" => Some(FusionMode::Uncertainty),
            "uniform" => Some(FusionMode::Uniform),
            _ => None,
        }
    }
}
