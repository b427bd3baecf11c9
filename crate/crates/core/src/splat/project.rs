use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::primitive::{quat_to_matrix, GaussianPrimitive, QUAT_TOLERANCE};
use super::{Camera, SplatError};

/// Primitives closer than this (camera-space z) are not rendered.
pub const NEAR_PLANE: f64 = 1e-4;

/// Projected covariances with a determinant at or below this are skipped.
pub const MIN_DETERMINANT: f64 = 1e-12;

/// World-space covariance `R · diag(s)² · Rᵀ` of a scale and unit quaternion.
pub fn covariance_from(
    scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
) -> Result<Matrix3<f64>, SplatError> {
    if (rotation.norm() - 1.0).abs() > QUAT_TOLERANCE {
        return Err(SplatError::NonUnitQuaternion(rotation.norm()));
    }
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(SplatError::NonPositiveScale);
    }
    Ok(covariance_unchecked(scale, rotation))
}

/// Same as [`covariance_from`] but normalizes the quaternion instead of
/// rejecting it.
pub(crate) fn covariance_unchecked(scale: &Vector3<f64>, rotation: &Vector4<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(&(rotation / rotation.norm()));
    let m = r * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Visible(ProjectedSplat),
    /// Center at or behind the near plane; the primitive is excluded.
    Excluded {
        depth: f64,
    },
}

impl Projection {
    pub fn visible(self) -> Option<ProjectedSplat> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::Excluded { .. } => None,
        }
    }
}

/// Jacobian of the pinhole map at camera-space point `p`.
pub(crate) fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

/// Perspective splatting of one primitive: pinhole mean and the leading
/// `2 × 2` block of `J W Σ Wᵀ Jᵀ`.
pub fn project(prim: &GaussianPrimitive, cam: &Camera) -> Projection {
    project_parts(&prim.center, &prim.scale, &prim.rotation, cam)
}

pub(crate) fn project_parts(
    center: &Vector3<f64>,
    scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
    cam: &Camera,
) -> Projection {
    let p = cam.to_camera(center);
    if p.z <= NEAR_PLANE {
        return Projection::Excluded { depth: p.z };
    }
    let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let t = projection_jacobian(cam, &p) * cam.rotation;
    let cov = t * covariance_unchecked(scale, rotation) * t.transpose();
    Projection::Visible(ProjectedSplat {
        mean,
        cov,
        depth: p.z,
    })
}

/// `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`, or `None` when `Σ` is numerically singular.
pub fn gaussian_weight(x: &Vector2<f64>, mean: &Vector2<f64>, cov: &Matrix2<f64>) -> Option<f64> {
    mahalanobis_sq(x, mean, cov).map(|d2| (-0.5 * d2).exp())
}

pub(crate) fn mahalanobis_sq(
    x: &Vector2<f64>,
    mean: &Vector2<f64>,
    cov: &Matrix2<f64>,
) -> Option<f64> {
    let det = cov.determinant();
    if !(det > MIN_DETERMINANT) {
        return None;
    }
    let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let d = x - mean;
    Some((d.transpose() * inv * d)[(0, 0)])
}
