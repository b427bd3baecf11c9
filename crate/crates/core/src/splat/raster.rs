//! Tiled front-to-back compositing and its reverse pass.
//!
//! Each primitive's kernel is supported on the ellipse of Mahalanobis radius
//! 3 around its projected mean; outside it the primitive contributes nothing.
//! The screen-space bounding box of that ellipse drives tile binning, so
//! culling never drops a non-zero contribution.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::primitive::{quat_to_matrix, GaussianPrimitive};
use super::project::{
    covariance_unchecked, project_parts, projection_jacobian, Projection, MIN_DETERMINANT,
};
use super::{Camera, Image, SplatError};

pub const TILE_SIZE: usize = 16;
pub const MAX_ALPHA: f64 = 0.999;
/// Squared Mahalanobis radius of the kernel support (3 sigma).
pub const SUPPORT_RADIUS_SQ: f64 = 9.0;

#[derive(Clone, Debug)]
struct Prepared {
    index: usize,
    depth: f64,
    mean: Vector2<f64>,
    /// Inverse covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Per-pixel contribution of one prepared splat.
#[derive(Clone, Copy, Debug)]
struct Hit {
    alpha: f64,
    weight: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

impl Prepared {
    #[inline]
    fn hit(&self, px: usize, py: usize) -> Option<Hit> {
        if px < self.x0 || px > self.x1 || py < self.y0 || py > self.y1 {
            return None;
        }
        let dx = px as f64 + 0.5 - self.mean.x;
        let dy = py as f64 + 0.5 - self.mean.y;
        let [a, b, c] = self.conic;
        let d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if d2 > SUPPORT_RADIUS_SQ {
            return None;
        }
        let weight = (-0.5 * d2).exp();
        let raw = self.opacity * weight;
        if raw <= 0.0 {
            return None;
        }
        Some(Hit {
            alpha: raw.min(MAX_ALPHA),
            weight,
            clamped: raw > MAX_ALPHA,
            dx,
            dy,
        })
    }
}

fn prepare(prims: &[GaussianPrimitive], cam: &Camera) -> Vec<Prepared> {
    let mut out = Vec::with_capacity(prims.len());
    for (index, p) in prims.iter().enumerate() {
        let Projection::Visible(s) = project_parts(&p.center, &p.scale, &p.rotation, cam) else {
            continue;
        };
        let det = s.cov.determinant();
        if !(det > MIN_DETERMINANT) {
            continue;
        }
        let conic = [
            s.cov[(1, 1)] / det,
            -s.cov[(0, 1)] / det,
            s.cov[(0, 0)] / det,
        ];
        // tight box of the support ellipse
        let rx = (SUPPORT_RADIUS_SQ * s.cov[(0, 0)]).sqrt();
        let ry = (SUPPORT_RADIUS_SQ * s.cov[(1, 1)]).sqrt();
        let lo_x = (s.mean.x - rx - 0.5).ceil();
        let hi_x = (s.mean.x + rx - 0.5).floor();
        let lo_y = (s.mean.y - ry - 0.5).ceil();
        let hi_y = (s.mean.y + ry - 0.5).floor();
        if hi_x < 0.0
            || hi_y < 0.0
            || lo_x > (cam.width - 1) as f64
            || lo_y > (cam.height - 1) as f64
        {
            continue;
        }
        if !(lo_x <= hi_x && lo_y <= hi_y) {
            continue;
        }
        out.push(Prepared {
            index,
            depth: s.depth,
            mean: s.mean,
            conic,
            opacity: p.opacity,
            x0: lo_x.max(0.0) as usize,
            x1: (hi_x as usize).min(cam.width - 1),
            y0: lo_y.max(0.0) as usize,
            y1: (hi_y as usize).min(cam.height - 1),
        });
    }
    // canonical order: depth, then submission index
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

struct Tiling {
    tiles_x: usize,
    tiles_y: usize,
    /// Positions into the sorted prepared list, per tile, front to back.
    lists: Vec<Vec<usize>>,
}

fn bin(prepared: &[Prepared], cam: &Camera) -> Tiling {
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in prepared.iter().enumerate() {
        for ty in s.y0 / TILE_SIZE..=s.y1 / TILE_SIZE {
            for tx in s.x0 / TILE_SIZE..=s.x1 / TILE_SIZE {
                lists[ty * tiles_x + tx].push(pos);
            }
        }
    }
    Tiling {
        tiles_x,
        tiles_y,
        lists,
    }
}

fn check_inputs(prims: &[GaussianPrimitive], background: &[f64]) -> Result<(), SplatError> {
    if background.is_empty() {
        return Err(SplatError::ColorDim);
    }
    if prims.iter().any(|p| p.color.len() != background.len()) {
        return Err(SplatError::ColorDim);
    }
    Ok(())
}

fn tile_pixels(t: usize, tiling: &Tiling, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (t % tiling.tiles_x, t / tiling.tiles_x);
    let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
    let (x1, y1) = (
        (x0 + TILE_SIZE).min(cam.width),
        (y0 + TILE_SIZE).min(cam.height),
    );
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders `prims` through `cam` over a constant `background`.
pub fn rasterize(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    background: &[f64],
) -> Result<Image, SplatError> {
    check_inputs(prims, background)?;
    let z = background.len();
    let prepared = prepare(prims, cam);
    let tiling = bin(&prepared, cam);
    let tiles: Vec<Vec<(usize, usize, Vec<f64>)>> = (0..tiling.tiles_x * tiling.tiles_y)
        .into_par_iter()
        .map(|t| {
            let list = &tiling.lists[t];
            tile_pixels(t, &tiling, cam)
                .map(|(x, y)| {
                    let mut color = vec![0.0; z];
                    let mut trans = 1.0;
                    for &pos in list {
                        let s = &prepared[pos];
                        if let Some(h) = s.hit(x, y) {
                            let w = h.alpha * trans;
                            for (c, v) in color.iter_mut().zip(&prims[s.index].color) {
                                *c += v * w;
                            }
                            trans *= 1.0 - h.alpha;
                        }
                    }
                    for (c, b) in color.iter_mut().zip(background) {
                        *c += trans * b;
                    }
                    (x, y, color)
                })
                .collect()
        })
        .collect();
    let mut img = Image::filled(cam.width, cam.height, background);
    for tile in tiles {
        for (x, y, color) in tile {
            img.pixel_mut(x, y).copy_from_slice(&color);
        }
    }
    Ok(img)
}

/// Gradient of a scalar loss with respect to one primitive's fields.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity: f64,
    pub color: Vec<f64>,
}

impl PrimitiveGrad {
    fn zero(z: usize) -> Self {
        Self {
            center: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: Vector4::zeros(),
            opacity: 0.0,
            color: vec![0.0; z],
        }
    }
}

#[derive(Clone, Debug)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vec<f64>,
}

impl ScreenGrad {
    fn zero(z: usize) -> Self {
        Self {
            mean: Vector2::zeros(),
            conic: [0.0; 3],
            opacity: 0.0,
            color: vec![0.0; z],
        }
    }

    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        for (a, b) in self.color.iter_mut().zip(&o.color) {
            *a += b;
        }
    }
}

/// Reverse pass of [`rasterize`]: given `dL/dC` per pixel and channel,
/// returns `dL/d` every primitive field (zero for primitives that do not
/// reach any pixel). Per-tile partial sums are reduced in tile order, so the
/// result does not depend on scheduling.
pub fn rasterize_grad(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    background: &[f64],
    upstream: &Image,
) -> Result<Vec<PrimitiveGrad>, SplatError> {
    check_inputs(prims, background)?;
    let z = background.len();
    if upstream.width != cam.width || upstream.height != cam.height || upstream.channels != z {
        return Err(SplatError::ImageSize);
    }
    let prepared = prepare(prims, cam);
    let tiling = bin(&prepared, cam);

    let partials: Vec<Vec<(usize, ScreenGrad)>> = (0..tiling.tiles_x * tiling.tiles_y)
        .into_par_iter()
        .map(|t| {
            let list = &tiling.lists[t];
            let mut acc: Vec<ScreenGrad> = vec![ScreenGrad::zero(z); list.len()];
            let mut hits: Vec<(usize, Hit, f64)> = Vec::with_capacity(list.len());
            let mut behind = vec![0.0; z];
            for (x, y) in tile_pixels(t, &tiling, cam) {
                let up = upstream.pixel(x, y);
                hits.clear();
                let mut trans = 1.0;
                for (k, &pos) in list.iter().enumerate() {
                    if let Some(h) = prepared[pos].hit(x, y) {
                        hits.push((k, h, trans));
                        trans *= 1.0 - h.alpha;
                    }
                }
                for (b, bg) in behind.iter_mut().zip(background) {
                    *b = trans * bg;
                }
                for &(k, h, t_i) in hits.iter().rev() {
                    let s = &prepared[list[k]];
                    let color = &prims[s.index].color;
                    let g = &mut acc[k];
                    let mut d_alpha = 0.0;
                    for ch in 0..z {
                        g.color[ch] += up[ch] * h.alpha * t_i;
                        d_alpha += up[ch] * (color[ch] * t_i - behind[ch] / (1.0 - h.alpha));
                    }
                    for ch in 0..z {
                        behind[ch] += color[ch] * h.alpha * t_i;
                    }
                    if h.clamped {
                        continue;
                    }
                    g.opacity += d_alpha * h.weight;
                    let d_weight = d_alpha * s.opacity;
                    // weight = exp(-d2/2)
                    let d_d2 = -0.5 * h.weight * d_weight;
                    let [a, b, c] = s.conic;
                    g.conic[0] += d_d2 * h.dx * h.dx;
                    g.conic[1] += d_d2 * 2.0 * h.dx * h.dy;
                    g.conic[2] += d_d2 * h.dy * h.dy;
                    g.mean.x -= d_d2 * (2.0 * a * h.dx + 2.0 * b * h.dy);
                    g.mean.y -= d_d2 * (2.0 * b * h.dx + 2.0 * c * h.dy);
                }
            }
            list.iter().copied().zip(acc).collect()
        })
        .collect();

    let mut screen = vec![ScreenGrad::zero(z); prepared.len()];
    for tile in &partials {
        for (pos, g) in tile {
            screen[*pos].add(g);
        }
    }

    let mut out = vec![PrimitiveGrad::zero(z); prims.len()];
    for (s, g) in prepared.iter().zip(&screen) {
        out[s.index] = chain_to_world(&prims[s.index], cam, s, g);
    }
    Ok(out)
}

/// Pulls screen-space gradients back through projection and the covariance
/// construction.
fn chain_to_world(
    prim: &GaussianPrimitive,
    cam: &Camera,
    s: &Prepared,
    g: &ScreenGrad,
) -> PrimitiveGrad {
    let w = cam.rotation;
    let p = cam.to_camera(&prim.center);
    let (x, y, zc) = (p.x, p.y, p.z);
    let j = projection_jacobian(cam, &p);
    let t = j * w;
    let sigma = covariance_unchecked(&prim.scale, &prim.rotation);

    // conic = cov2⁻¹ ⇒ dL/dcov2 = −K (dL/dK) K, with the off-diagonal split evenly
    let k = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let dk = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let d_cov2 = -(k * dk * k);

    let d_sigma = t.transpose() * d_cov2 * t;
    let d_t = 2.0 * d_cov2 * t * sigma;
    let d_j = d_t * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = zc * zc;
    let z3 = z2 * zc;
    let mut dp = Vector3::new(
        d_j[(0, 2)] * (-fx / z2),
        d_j[(1, 2)] * (-fy / z2),
        d_j[(0, 0)] * (-fx / z2)
            + d_j[(0, 2)] * (2.0 * fx * x / z3)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(1, 2)] * (2.0 * fy * y / z3),
    );
    dp.x += g.mean.x * fx / zc;
    dp.y += g.mean.y * fy / zc;
    dp.z += g.mean.x * (-fx * x / z2) + g.mean.y * (-fy * y / z2);
    let center = w.transpose() * dp;

    let qn = prim.rotation.norm();
    let qh = prim.rotation / qn;
    let r = quat_to_matrix(&qh);
    let m = r * Matrix3::from_diagonal(&prim.scale);
    let d_m = 2.0 * d_sigma * m;
    let d_r = d_m * Matrix3::from_diagonal(&prim.scale);
    let scale = Vector3::from_fn(|c, _| (0..3).map(|i| d_m[(i, c)] * r[(i, c)]).sum());
    let d_qh = quat_matrix_grad(&qh, &d_r);
    let rotation = (d_qh - qh * qh.dot(&d_qh)) / qn;

    PrimitiveGrad {
        center,
        scale,
        rotation,
        opacity: g.opacity,
        color: g.color.clone(),
    }
}

/// `Σ_ij dL/dR_ij · ∂R_ij/∂q` for the unnormalized rotation polynomial.
fn quat_matrix_grad(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    2.0 * Vector4::new(
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    )
}
