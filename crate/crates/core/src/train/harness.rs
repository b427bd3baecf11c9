use std::f64::consts::PI;

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::TrainError;
use crate::features::AudioClip;
use crate::rng::SeedTree;
use crate::splat::{
    identity_quat, quat_from_axis_angle, quat_mul, Branch, Camera, GaussianPrimitive, Scene,
};

/// Head center in camera space.
pub const HEAD_CENTER: [f64; 3] = [0.0, 0.0, 4.0];
/// Ellipsoid semi-axes of the head shell.
pub const HEAD_AXES: [f64; 3] = [0.85, 1.05, 0.8];
/// Peak downward mouth displacement at full drive.
pub const MOUTH_OPEN: f64 = 0.12;
/// Yaw (radians) per unit of drive away from 0.5.
pub const FACE_YAW: f64 = 0.15;

/// Mouth opening in shell direction coordinates: x half-width, y center, y half-height.
const MOUTH_HOLE: (f64, f64, f64) = (0.32, 0.45, 0.2);
/// Mouth band in shell direction coordinates.
const MOUTH_BAND_X: (f64, f64) = (-0.3, 0.3);
const MOUTH_BAND_Y: (f64, f64) = (0.3, 0.6);
/// How far behind the shell surface the mouth band sits.
const MOUTH_DEPTH: f64 = 0.08;
/// Lowest camera-facing component of a face shell direction.
const CAP_MIN: f64 = -0.2;

/// Synthetic talking-head harness.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub primitives: usize,
    pub mouth_primitives: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    pub heldout: usize,
    pub fps: f64,
    /// Drive period in frames.
    pub period: f64,
    /// Drive phase in radians.
    pub phase: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            primitives: 200,
            mouth_primitives: 40,
            width: 64,
            height: 64,
            focal: 100.0,
            frames: 120,
            heldout: 20,
            fps: 25.0,
            period: 30.0,
            phase: 0.0,
            sample_rate: 16000,
            seed: 7,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.frames == 0 {
            return bad("at least one frame is required");
        }
        if self.heldout >= self.frames {
            return bad("held-out frames must leave at least one training frame");
        }
        if self.mouth_primitives == 0 || self.mouth_primitives >= self.primitives {
            return bad("mouth primitives must be between 1 and primitives - 1");
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive");
        }
        if !(self.fps > 0.0) || !(self.period > 0.0) || !self.phase.is_finite() {
            return bad("fps and period must be positive");
        }
        Ok(())
    }

    pub fn face_primitives(&self) -> usize {
        self.primitives - self.mouth_primitives
    }

    pub fn camera(&self) -> Result<Camera, TrainError> {
        // keep the framing fixed when the resolution changes
        let f = self.focal * self.width as f64 / 64.0;
        Ok(Camera::axis_aligned(f, f, self.width, self.height)?)
    }

    /// `0.5 + 0.5 sin(2π t / period + phase)` at a (possibly fractional) frame time.
    pub fn drive(&self, t: f64) -> f64 {
        0.5 + 0.5 * (2.0 * PI * t / self.period + self.phase).sin()
    }

    pub fn train_frames(&self) -> std::ops::Range<usize> {
        0..self.frames - self.heldout
    }

    pub fn heldout_frames(&self) -> std::ops::Range<usize> {
        self.frames - self.heldout..self.frames
    }
}

fn center() -> Vector3<f64> {
    Vector3::from(HEAD_CENTER)
}

fn axes() -> Vector3<f64> {
    Vector3::from(HEAD_AXES)
}

fn in_mouth_hole(d: &Vector3<f64>) -> bool {
    let (hx, cy, hy) = MOUTH_HOLE;
    d.z < 0.0 && (d.x / hx).powi(2) + ((d.y - cy) / hy).powi(2) < 1.0
}

/// Quaternion turning `−z` onto the unit vector `n`.
fn align_neg_z(n: &Vector3<f64>) -> Vector4<f64> {
    let from = -Vector3::z();
    let axis = from.cross(n);
    let s = axis.norm();
    if s < 1e-12 {
        return identity_quat();
    }
    quat_from_axis_angle(&(axis / s), from.dot(n).clamp(-1.0, 1.0).acos())
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Canonical scene: a camera-facing ellipsoid cap of face primitives with a
/// mouth opening, and a mouth band just behind it. Face primitives come first.
pub fn build_scene(cfg: &HarnessConfig) -> Result<Scene, TrainError> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed).child("harness");
    let mut rng = tree.stream("face");
    let (c, a) = (center(), axes());
    let golden = PI * (3.0 - 5f64.sqrt());
    let n_face = cfg.face_primitives();

    // area-uniform Fibonacci points on the cap, grown until enough survive the hole
    let mut k = n_face;
    let dirs = loop {
        let dirs: Vec<Vector3<f64>> = (0..k)
            .map(|i| {
                let w = 1.0 - (1.0 - CAP_MIN) * (i as f64 + 0.5) / k as f64;
                let r = (1.0 - w * w).max(0.0).sqrt();
                let phi = i as f64 * golden;
                Vector3::new(r * phi.cos(), r * phi.sin(), -w)
            })
            .filter(|d| !in_mouth_hole(d))
            .collect();
        if dirs.len() >= n_face {
            break dirs;
        }
        k += 1;
    };
    let spacing = (2.0 * PI * (1.0 - CAP_MIN) * a.x * a.y / k as f64).sqrt();
    let mut prims = Vec::with_capacity(cfg.primitives);
    let mut branches = Vec::with_capacity(cfg.primitives);
    for d in dirs.into_iter().take(n_face) {
        let p = c + a.component_mul(&d);
        let normal = d.component_div(&a).normalize();
        let shade = 0.65 + 0.35 * (-normal.z).max(0.0);
        let jitter: f64 = rng.gen_range(-0.08..0.08);
        let color = vec![
            clamp01((0.86 + jitter) * shade),
            clamp01((0.64 + jitter) * shade),
            clamp01((0.50 + 0.5 * jitter) * shade),
        ];
        let spin = quat_from_axis_angle(&Vector3::z(), rng.gen_range(0.0..PI));
        let rotation = quat_mul(&align_neg_z(&normal), &spin);
        let scale = Vector3::new(0.75 * spacing, 0.6 * spacing, 0.2 * spacing);
        prims.push(GaussianPrimitive::new(p, scale, rotation, 0.9, color));
        branches.push(Branch::Face);
    }

    let mut rng = tree.stream("mouth");
    let n_mouth = cfg.mouth_primitives;
    let cols = ((n_mouth as f64 * 2.5).sqrt().ceil() as usize).max(1);
    let rows = n_mouth.div_ceil(cols);
    let cell = ((MOUTH_BAND_X.1 - MOUTH_BAND_X.0) / cols as f64)
        .min((MOUTH_BAND_Y.1 - MOUTH_BAND_Y.0) / rows as f64);
    for i in 0..n_mouth {
        let (row, col) = (i / cols, i % cols);
        let dx = MOUTH_BAND_X.0
            + (MOUTH_BAND_X.1 - MOUTH_BAND_X.0) * (col as f64 + 0.5 + rng.gen_range(-0.2..0.2))
                / cols as f64;
        let dy = MOUTH_BAND_Y.0
            + (MOUTH_BAND_Y.1 - MOUTH_BAND_Y.0) * (row as f64 + 0.5 + rng.gen_range(-0.2..0.2))
                / rows as f64;
        let dz = -(1.0 - dx * dx - dy * dy).max(0.0).sqrt();
        let p =
            c + a.component_mul(&Vector3::new(dx, dy, dz)) + Vector3::new(0.0, 0.0, MOUTH_DEPTH);
        let lip = ((dy - 0.45) / 0.15).abs().min(1.0);
        let j: f64 = rng.gen_range(-0.05..0.05);
        let color = vec![
            clamp01(0.25 + 0.5 * lip + j),
            clamp01(0.05 + 0.1 * lip + j),
            clamp01(0.08 + 0.12 * lip + j),
        ];
        let s = 0.9 * cell * a.x;
        prims.push(GaussianPrimitive::new(
            p,
            Vector3::new(s, 0.8 * s, 0.5 * s),
            identity_quat(),
            0.95,
            color,
        ));
        branches.push(Branch::Mouth);
    }
    Ok(Scene::new(prims, branches)?)
}

/// Share of the full mouth displacement a mouth primitive takes: zero at the
/// top of the band, one at the bottom.
pub fn mouth_weight(y: f64) -> f64 {
    let top = center().y + axes().y * MOUTH_BAND_Y.0;
    let bottom = center().y + axes().y * MOUTH_BAND_Y.1;
    ((y - top) / (bottom - top)).clamp(0.0, 1.0)
}

/// Ground-truth deformation at drive `d`: mouth primitives drop by
/// `0.12·d·w(y)`, face primitives yaw by `0.15·(d − 0.5)` about the head center.
pub fn deform_scene(scene: &Scene, drive: f64) -> Result<Scene, TrainError> {
    let yaw = FACE_YAW * (drive - 0.5);
    let q = quat_from_axis_angle(&Vector3::y(), yaw);
    let r = crate::splat::quat_to_matrix(&q);
    let c = center();
    let prims = scene
        .primitives()
        .iter()
        .zip(scene.branches())
        .map(|(p, b)| {
            let mut p = p.clone();
            match b {
                Branch::Face => {
                    p.center = c + r * (p.center - c);
                    p.rotation = quat_mul(&q, &p.rotation).normalize();
                }
                Branch::Mouth => p.center.y += MOUTH_OPEN * drive * mouth_weight(p.center.y),
            }
            p
        })
        .collect();
    Ok(Scene::new(prims, scene.branches().to_vec())?)
}

/// Voiced tone tracking the drive: pitch `150 + 250·d` Hz, amplitude
/// `0.2 + 0.6·d`, plus a second harmonic and faint noise.
pub fn synth_audio(cfg: &HarnessConfig) -> Result<AudioClip, TrainError> {
    let sr = cfg.sample_rate as f64;
    let n = ((cfg.frames as f64 / cfg.fps) * sr).ceil() as usize;
    let mut rng = SeedTree::new(cfg.seed).child("harness").stream("audio");
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let d = cfg.drive(i as f64 / sr * cfg.fps);
            phase += 2.0 * PI * (150.0 + 250.0 * d) / sr;
            let amp = 0.2 + 0.6 * d;
            let noise: f64 = rng.sample(StandardNormal);
            (amp * (phase.sin() + 0.3 * (2.0 * phase).sin()) / 1.3 + 0.01 * noise).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(AudioClip::new(samples, cfg.sample_rate)?)
}
