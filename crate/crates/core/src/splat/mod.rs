//! Static Gaussian scenes and their differentiable rasterization.

mod camera;
mod image;
mod primitive;
mod project;
mod raster;
pub mod snapshot;

use thiserror::Error;

pub use camera::Camera;
pub use image::Image;
pub use primitive::{
    identity_quat, quat_from_axis_angle, quat_mul, quat_to_matrix, Branch, GaussianPrimitive,
    Scene, QUAT_TOLERANCE,
};
pub use project::{
    covariance_from, gaussian_weight, project, ProjectedSplat, Projection, MIN_DETERMINANT,
    NEAR_PLANE,
};
pub use raster::{
    rasterize, rasterize_grad, PrimitiveGrad, MAX_ALPHA, SUPPORT_RADIUS_SQ, TILE_SIZE,
};

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("quaternion norm {0} is not 1")]
    NonUnitQuaternion(f64),
    #[error("scales must be positive")]
    NonPositiveScale,
    #[error("opacity {0} outside [0, 1]")]
    OpacityOutOfRange(f64),
    #[error("color entries must lie in [0, 1]")]
    ColorOutOfRange,
    #[error("non-finite primitive field")]
    NonFinite,
    #[error("primitive {0}: {1}")]
    Primitive(usize, Box<SplatError>),
    #[error("{primitives} primitives but {tags} branch tags")]
    BranchCount { primitives: usize, tags: usize },
    #[error("color dimension differs between primitives and background")]
    ColorDim,
    #[error("image dimensions do not match")]
    ImageSize,
    #[error("invalid camera: {0}")]
    BadCamera(&'static str),
    #[error("PPM: {0}")]
    Ppm(&'static str),
    #[error("scene snapshot line {0}: {1}")]
    Snapshot(usize, &'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
