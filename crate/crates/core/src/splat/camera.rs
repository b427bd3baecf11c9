use nalgebra::{Matrix3, Vector3};

use super::SplatError;

/// Pinhole camera. Camera space is x right, y down, z forward; pixel `(i, j)`
/// has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, SplatError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(SplatError::BadCamera("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(SplatError::BadCamera("image must have at least one pixel"));
        }
        if (rotation.transpose() * rotation - Matrix3::identity()).norm() > 1e-9 {
            return Err(SplatError::BadCamera("pose rotation is not orthonormal"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Identity pose looking down +z with the principal point at the image center.
    pub fn axis_aligned(fx: f64, fy: f64, width: usize, height: usize) -> Result<Self, SplatError> {
        Self::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            Matrix3::identity(),
            Vector3::zeros(),
            width,
            height,
        )
    }

    /// Camera at `eye` looking at `target`, with `up` pointing toward the top of the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, SplatError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
