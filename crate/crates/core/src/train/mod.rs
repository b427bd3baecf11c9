//! Image losses and metrics, the synthetic talking-head harness, the
//! two-stage training schedule, evaluation and the fusion ablation.

mod dataset;
mod fit;
pub mod harness;
mod loss;
mod model;

use thiserror::Error;

pub use dataset::{Dataset, BACKGROUND};
pub use fit::{
    ablate_fusion, branch_gradients, evaluate, init_model, inputs_for, joint_gradients,
    moving_average, render_frame, trace_csv, trace_losses, train, train_model, train_with,
    write_trace, AblationReport, AblationRow, EvalReport, FrameMetrics, LossWeights, Stage,
    StepGradients, TraceRow, TrainConfig, TrainOutput,
};
pub use harness::HarnessConfig;
pub use loss::{
    emotion_stage2_loss, l1_loss, loss_branch, loss_branch_grad, loss_fuse, loss_fuse_grad, mse,
    psnr, psnr_from_mse, recon_loss, ssim, ssim_with_grad, ImageLoss, LpipsStub, Perceptual,
    PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use model::{
    fourier_state, frame_inputs, normalized_positions, BranchModel, BranchNodes, EmotionModule,
    FrameInputs, Model, ModelConfig, SceneParams,
};

use crate::autodiff::{AdamError, AutodiffError};
use crate::deform::DeformError;
use crate::features::FeatureError;
use crate::fusion::FusionError;
use crate::splat::SplatError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("image {width}x{height} is smaller than the 11x11 SSIM window")]
    TooSmall { width: usize, height: usize },
    #[error("label is not one-hot")]
    NotOneHot,
    #[error("nothing to train or evaluate on")]
    Empty,
    #[error("loss diverged in the {stage} stage at iteration {iteration}")]
    Diverged {
        stage: &'static str,
        iteration: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
