use nalgebra::{Matrix3, Vector3, Vector4};

use super::SplatError;

/// Which half of the head a primitive animates with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Face,
    Mouth,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Face => "face",
            Branch::Mouth => "mouth",
        }
    }

    pub fn parse(s: &str) -> Option<Branch> {
        match s {
            "face" => Some(Branch::Face),
            "mouth" => Some(Branch::Mouth),
            _ => None,
        }
    }
}

/// Unit-norm tolerance for stored quaternions.
pub const QUAT_TOLERANCE: f64 = 1e-6;

/// One anisotropic 3D Gaussian.
///
/// Rotation is stored as `(w, x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity: f64,
    pub color: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn new(
        center: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Vector4<f64>,
        opacity: f64,
        color: Vec<f64>,
    ) -> Self {
        Self {
            center,
            scale,
            rotation,
            opacity,
            color,
        }
    }

    pub fn isotropic(center: Vector3<f64>, radius: f64, opacity: f64, color: Vec<f64>) -> Self {
        Self::new(
            center,
            Vector3::repeat(radius),
            identity_quat(),
            opacity,
            color,
        )
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        let finite = self
            .center
            .iter()
            .chain(self.scale.iter())
            .chain(self.rotation.iter())
            .all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite());
        if !finite {
            return Err(SplatError::NonFinite);
        }
        if (self.rotation.norm() - 1.0).abs() > QUAT_TOLERANCE {
            return Err(SplatError::NonUnitQuaternion(self.rotation.norm()));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(SplatError::NonPositiveScale);
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(SplatError::OpacityOutOfRange(self.opacity));
        }
        if self.color.is_empty() || self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(SplatError::ColorOutOfRange);
        }
        Ok(())
    }
}

pub fn identity_quat() -> Vector4<f64> {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

/// Rotation matrix of `(w, x, y, z)`; the quaternion is used as given.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Vector4<f64> {
    let a = axis.normalize() * (angle / 2.0).sin();
    Vector4::new((angle / 2.0).cos(), a[0], a[1], a[2])
}

/// Static scene: primitives plus their fixed branch tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    primitives: Vec<GaussianPrimitive>,
    branches: Vec<Branch>,
}

impl Scene {
    pub fn new(
        primitives: Vec<GaussianPrimitive>,
        branches: Vec<Branch>,
    ) -> Result<Self, SplatError> {
        if primitives.len() != branches.len() {
            return Err(SplatError::BranchCount {
                primitives: primitives.len(),
                tags: branches.len(),
            });
        }
        let z = primitives.first().map(|p| p.color.len());
        for (i, p) in primitives.iter().enumerate() {
            p.validate()
                .map_err(|e| SplatError::Primitive(i, Box::new(e)))?;
            if Some(p.color.len()) != z {
                return Err(SplatError::ColorDim);
            }
        }
        Ok(Self {
            primitives,
            branches,
        })
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn color_dim(&self) -> Option<usize> {
        self.primitives.first().map(|p| p.color.len())
    }

    /// Indices of the primitives tagged `branch`, in scene order.
    pub fn indices_of(&self, branch: Branch) -> Vec<usize> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, b)| **b == branch)
            .map(|(i, _)| i)
            .collect()
    }

    /// Primitives of one branch, in scene order.
    pub fn branch_primitives(&self, branch: Branch) -> Vec<GaussianPrimitive> {
        self.indices_of(branch)
            .into_iter()
            .map(|i| self.primitives[i].clone())
            .collect()
    }

    /// Axis-aligned bounds of the centers, padded so no axis is degenerate.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            lo = lo.inf(&p.center);
            hi = hi.sup(&p.center);
        }
        for k in 0..3 {
            if !(hi[k] - lo[k] > 1e-9) {
                lo[k] -= 0.5;
                hi[k] += 0.5;
            }
        }
        (lo, hi)
    }
}
