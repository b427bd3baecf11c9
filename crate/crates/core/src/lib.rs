//! Uncertainty-aware deformable Gaussian splatting.
//!
//! A deformable scene of anisotropic Gaussians is conditioned on several
//! per-frame feature views. Each view feeds an ensemble of small networks
//! whose predictions are reduced to a mean and a variance (split into an
//! aleatoric and an epistemic part); the views are then combined by
//! precision-weighted Gaussian fusion and decoded into per-primitive
//! position, rotation and scale offsets before rasterization.

pub mod autodiff;
pub mod deform;
pub mod features;
pub mod fusion;
pub mod rng;
pub mod splat;
pub mod train;
