use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;

use super::FeatureError;
use crate::autodiff::{Axis, GatherTaps, Graph, Linear, NodeId, ParamId, ParamStore, Tensor};

/// Coordinate pairs addressed by the three planes: (X,Y), (X,Z), (Y,Z).
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three axis-aligned code grids per scale. The grid at scale `s` has
/// `base_res · s` nodes per side spanning `[0, 1]` end to end; plane
/// tensors are `(res²) × code_dim` with row `i · res + j` holding node `(i, j)`.
#[derive(Clone, Debug)]
pub struct FeaturePlanes {
    pub base_res: usize,
    pub code_dim: usize,
    pub scales: Vec<usize>,
    pub planes: Vec<[ParamId; 3]>,
}

impl FeaturePlanes {
    /// Codes start at `1 + U(−spread, spread)`, so the product of three
    /// planes starts near one.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        base_res: usize,
        scales: &[usize],
        code_dim: usize,
        spread: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(base_res >= 2, "a plane needs at least two nodes per side");
        let planes = scales
            .iter()
            .map(|&s| {
                let res = base_res * s;
                std::array::from_fn(|p| {
                    let data = (0..res * res * code_dim)
                        .map(|_| {
                            1.0 + if spread > 0.0 {
                                rng.gen_range(-spread..spread)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    store.add(
                        format!("{name}.s{s}.p{p}"),
                        Tensor::matrix(res * res, code_dim, data),
                    )
                })
            })
            .collect();
        Self {
            base_res,
            code_dim,
            scales: scales.to_vec(),
            planes,
        }
    }

    pub fn resolution(&self, scale_index: usize) -> usize {
        self.base_res * self.scales[scale_index]
    }

    pub fn out_dim(&self) -> usize {
        self.code_dim * self.scales.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.planes.iter().flatten().copied().collect()
    }
}

/// Bilinear taps into a `res × res` grid for each position's `axes` pair.
/// Positions outside the unit cube are clamped.
pub fn plane_taps(positions: &[Vector3<f64>], res: usize, axes: (usize, usize)) -> GatherTaps {
    let mut rows = Vec::with_capacity(positions.len());
    let mut weights = Vec::with_capacity(positions.len());
    let locate = |x: f64| {
        let u = x.clamp(0.0, 1.0) * (res - 1) as f64;
        let i = (u.floor() as usize).min(res - 2);
        (i, u - i as f64)
    };
    for p in positions {
        let (i, fu) = locate(p[axes.0]);
        let (j, fv) = locate(p[axes.1]);
        rows.push([
            i * res + j,
            i * res + j + 1,
            (i + 1) * res + j,
            (i + 1) * res + j + 1,
        ]);
        weights.push([
            (1.0 - fu) * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * (1.0 - fv),
            fu * fv,
        ]);
    }
    GatherTaps { rows, weights }
}

/// Taps for a fixed set of positions, one set per scale and plane.
#[derive(Clone, Debug)]
pub struct EmotionTaps {
    pub taps: Vec<[Arc<GatherTaps>; 3]>,
    pub count: usize,
}

impl EmotionTaps {
    pub fn new(planes: &FeaturePlanes, positions: &[Vector3<f64>]) -> Self {
        let taps = (0..planes.scales.len())
            .map(|si| {
                let res = planes.resolution(si);
                std::array::from_fn(|p| Arc::new(plane_taps(positions, res, PLANE_AXES[p])))
            })
            .collect();
        Self {
            taps,
            count: positions.len(),
        }
    }
}

/// Multi-scale tri-plane encoding: per scale, the Hadamard product of the
/// three interpolated codes times a per-scale projection of `f_emo_attn`;
/// scales concatenated. Returns `positions × (scales · code_dim)`.
pub fn encode_emotion(
    g: &mut Graph,
    store: &ParamStore,
    planes: &FeaturePlanes,
    taps: &EmotionTaps,
    f_emo_attn: NodeId,
    scale_proj: &[Linear],
) -> Result<NodeId, FeatureError> {
    if scale_proj.len() != planes.scales.len() || taps.taps.len() != planes.scales.len() {
        return Err(FeatureError::Dim(format!(
            "{} scales, {} projections, {} tap sets",
            planes.scales.len(),
            scale_proj.len(),
            taps.taps.len()
        )));
    }
    let fdim = g.value(f_emo_attn).cols();
    let mut parts = Vec::with_capacity(planes.scales.len());
    for (si, proj) in scale_proj.iter().enumerate() {
        if proj.in_dim != fdim || proj.out_dim != planes.code_dim {
            return Err(FeatureError::Dim(format!(
                "scale projection {}x{} for a {fdim}-wide feature and {}-wide codes",
                proj.in_dim, proj.out_dim, planes.code_dim
            )));
        }
        let mut prod = None;
        for p in 0..3 {
            let table = g.param(store, planes.planes[si][p]);
            let code = g.gather(table, taps.taps[si][p].clone());
            prod = Some(match prod {
                None => code,
                Some(acc) => g.mul(acc, code),
            });
        }
        let fs = proj.forward(g, store, f_emo_attn);
        parts.push(g.mul(prod.unwrap(), fs));
    }
    Ok(g.concat(&parts, Axis::Cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_and_midpoint_taps() {
        let t = plane_taps(&[Vector3::new(0.0, 1.0, 0.5)], 5, (0, 1));
        // x = 0 lands on row 0, y = 1 on the last node via the clamped cell
        assert_eq!(t.rows[0], [3, 4, 8, 9]);
        assert_eq!(t.weights[0], [0.0, 1.0, 0.0, 0.0]);
        let mid = plane_taps(&[Vector3::new(0.125, 0.375, 0.0)], 5, (0, 1));
        assert_eq!(mid.rows[0], [1, 2, 6, 7]);
        assert_eq!(mid.weights[0], [0.25; 4]);
    }

    #[test]
    fn outside_positions_clamp() {
        let a = plane_taps(&[Vector3::new(-3.0, 2.0, 0.0)], 4, (0, 1));
        let b = plane_taps(&[Vector3::new(0.0, 1.0, 0.0)], 4, (0, 1));
        assert_eq!(a, b);
    }
}
