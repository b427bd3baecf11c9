//! Multi-head deformation decoder and the application of its offsets to
//! canonical primitives.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{
    Activation, Axis, Graph, Linear, MlpBlock, NodeId, ParamId, ParamStore, Tensor,
};
use crate::splat::{identity_quat, Branch, GaussianPrimitive};

/// Quaternion sums shorter than this fall back to the identity rotation.
pub const MIN_QUAT_NORM: f64 = 1e-8;

/// Trunk hidden widths.
pub const TRUNK_WIDTHS: [usize; 2] = [64, 64];

#[derive(Debug, Error, PartialEq)]
pub enum DeformError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

/// Per-primitive offsets: position, additive quaternion, log-scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationDelta {
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
}

impl DeformationDelta {
    pub fn zero() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Vector4::zeros(),
            log_scale: Vector3::zeros(),
        }
    }

    pub fn translation(d: Vector3<f64>) -> Self {
        Self {
            position: d,
            ..Self::zero()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.rotation.iter())
            .chain(self.log_scale.iter())
            .all(|v| v.is_finite())
    }
}

/// How the output heads start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    /// All head weights zero: the decoder starts as the identity deformation.
    Zero,
    Glorot,
}

#[derive(Clone, Debug)]
pub struct DeformDecoder {
    pub branch: Branch,
    pub trunk: MlpBlock,
    pub position: Linear,
    /// Absent in mouth mode.
    pub rotation: Option<Linear>,
    pub scale: Option<Linear>,
}

impl DeformDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        branch: Branch,
        state_dim: usize,
        init: HeadInit,
        rng: &mut impl Rng,
    ) -> Self {
        let widths = [state_dim, TRUNK_WIDTHS[0], TRUNK_WIDTHS[1]];
        let trunk = MlpBlock::new(
            store,
            &format!("{name}.trunk"),
            &widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let h = TRUNK_WIDTHS[1];
        let mut head = |store: &mut ParamStore, head: &str, out: usize| match init {
            HeadInit::Zero => Linear::zeroed(store, &format!("{name}.{head}"), h, out),
            HeadInit::Glorot => Linear::new(store, &format!("{name}.{head}"), h, out, rng),
        };
        let position = head(store, "position", 3);
        let (rotation, scale) = match branch {
            Branch::Face => (
                Some(head(store, "rotation", 4)),
                Some(head(store, "scale", 3)),
            ),
            Branch::Mouth => (None, None),
        };
        Self {
            branch,
            trunk,
            position,
            rotation,
            scale,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        for head in [
            Some(&self.position),
            self.rotation.as_ref(),
            self.scale.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            p.extend(head.params());
        }
        p
    }

    /// Plain decode of one state vector.
    pub fn decode(
        &self,
        store: &ParamStore,
        state: &[f64],
    ) -> Result<DeformationDelta, DeformError> {
        if state.len() != self.state_dim() {
            return Err(DeformError::Dim(format!(
                "state has {} entries, decoder expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        let mut h = state.to_vec();
        for layer in &self.trunk.layers {
            h = layer.apply_row(store, &h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let p = self.position.apply_row(store, &h);
        let mut delta = DeformationDelta::translation(Vector3::from_column_slice(&p));
        if let Some(r) = &self.rotation {
            delta.rotation = Vector4::from_column_slice(&r.apply_row(store, &h));
        }
        if let Some(s) = &self.scale {
            delta.log_scale = Vector3::from_column_slice(&s.apply_row(store, &h));
        }
        Ok(delta)
    }

    /// Row-batched decode of an `n × D` state.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: NodeId,
    ) -> Result<DeltaNodes, DeformError> {
        let (n, d) = g.value(state).dims2();
        if d != self.state_dim() {
            return Err(DeformError::Dim(format!(
                "state is {n}x{d}, decoder expects {} columns",
                self.state_dim()
            )));
        }
        let h = self.trunk.forward(g, store, state);
        Ok(DeltaNodes {
            position: self.position.forward(g, store, h),
            rotation: self.rotation.as_ref().map(|l| l.forward(g, store, h)),
            log_scale: self.scale.as_ref().map(|l| l.forward(g, store, h)),
        })
    }
}

/// Graph offsets for `n` primitives; `None` heads mean zero.
#[derive(Clone, Copy, Debug)]
pub struct DeltaNodes {
    pub position: NodeId,
    pub rotation: Option<NodeId>,
    pub log_scale: Option<NodeId>,
}

impl DeltaNodes {
    /// Plain offsets of row `i`.
    pub fn row(&self, g: &Graph, i: usize) -> DeformationDelta {
        let mut d = DeformationDelta::translation(Vector3::from_column_slice(
            g.value(self.position).row_slice(i),
        ));
        if let Some(r) = self.rotation {
            d.rotation = Vector4::from_column_slice(g.value(r).row_slice(i));
        }
        if let Some(s) = self.log_scale {
            d.log_scale = Vector3::from_column_slice(g.value(s).row_slice(i));
        }
        d
    }
}

/// Deformed primitive plus whether the rotation fell back to the identity.
pub fn apply_delta(
    prim: &GaussianPrimitive,
    delta: &DeformationDelta,
) -> (GaussianPrimitive, bool) {
    let sum = prim.rotation + delta.rotation;
    let norm = sum.norm();
    let (rotation, fallback) = if norm < MIN_QUAT_NORM {
        (identity_quat(), true)
    } else {
        (sum / norm, false)
    };
    let scale = prim.scale.component_mul(&delta.log_scale.map(f64::exp));
    let out = GaussianPrimitive::new(
        prim.center + delta.position,
        scale,
        rotation,
        prim.opacity,
        prim.color.clone(),
    );
    (out, fallback)
}

/// Deformed geometry as graph nodes: centers `n × 3`, unit quaternions
/// `n × 4`, positive scales `n × 3`.
#[derive(Clone, Copy, Debug)]
pub struct DeformedNodes {
    pub center: NodeId,
    pub rotation: NodeId,
    pub scale: NodeId,
}

/// Differentiable [`apply_delta`] on canonical geometry given as centers,
/// quaternions and log-scales. Returns the rows that fell back to identity.
pub fn apply_delta_nodes(
    g: &mut Graph,
    center: NodeId,
    rotation: NodeId,
    log_scale: NodeId,
    delta: &DeltaNodes,
) -> Result<(DeformedNodes, Vec<usize>), DeformError> {
    let n = g.value(center).rows();
    for (what, node, cols) in [
        ("center", center, 3),
        ("rotation", rotation, 4),
        ("log-scale", log_scale, 3),
    ] {
        if g.value(node).dims2() != (n, cols) {
            return Err(DeformError::Dim(format!(
                "{what} is {:?}, expected {n}x{cols}",
                g.value(node).dims2()
            )));
        }
    }
    if g.value(delta.position).dims2() != (n, 3) {
        return Err(DeformError::Dim(
            "position offsets do not match the primitive count".into(),
        ));
    }
    let center = g.add(center, delta.position);
    let log_scale = match delta.log_scale {
        Some(ds) => g.add(log_scale, ds),
        None => log_scale,
    };
    let scale = g.exp(log_scale);
    let mut q = match delta.rotation {
        Some(dr) => g.add(rotation, dr),
        None => rotation,
    };
    let fallback: Vec<usize> = {
        let v = g.value(q);
        (0..n)
            .filter(|&i| v.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt() < MIN_QUAT_NORM)
            .collect()
    };
    if !fallback.is_empty() {
        let mut keep = Tensor::full(&[n, 4], 1.0);
        let mut ident = Tensor::zeros(&[n, 4]);
        for &i in &fallback {
            keep.data_mut()[i * 4..i * 4 + 4].fill(0.0);
            ident.data_mut()[i * 4] = 1.0;
        }
        let keep = g.constant(keep);
        let ident = g.constant(ident);
        let masked = g.mul(q, keep);
        q = g.add(masked, ident);
    }
    let sq = g.square(q);
    let norm2 = g.sum_axis(sq, Axis::Cols);
    let inv = g.power(norm2, -0.5);
    let rotation = g.mul(q, inv);
    Ok((
        DeformedNodes {
            center,
            rotation,
            scale,
        },
        fallback,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn zero_delta_keeps_the_primitive() {
        let p = GaussianPrimitive::new(
            Vector3::new(0.1, 0.2, 3.0),
            Vector3::new(0.1, 0.2, 0.3),
            Vector4::new(0.5, 0.5, 0.5, 0.5),
            0.7,
            vec![0.2, 0.4, 0.6],
        );
        let (q, flag) = apply_delta(&p, &DeformationDelta::zero());
        assert!(!flag);
        assert_eq!(q.center, p.center);
        assert_eq!(q.scale, p.scale);
        assert!((q.rotation - p.rotation).norm() < 1e-15);
        assert_eq!((q.opacity, &q.color), (p.opacity, &p.color));
    }

    #[test]
    fn translation_moves_the_center() {
        let p = GaussianPrimitive::isotropic(Vector3::zeros(), 0.1, 0.5, vec![1.0]);
        let (q, _) = apply_delta(
            &p,
            &DeformationDelta::translation(Vector3::new(1.0, 0.0, 0.0)),
        );
        assert_eq!(q.center, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn cancelled_rotation_falls_back_to_identity() {
        let p = GaussianPrimitive::isotropic(Vector3::zeros(), 0.1, 0.5, vec![1.0]);
        let mut d = DeformationDelta::zero();
        d.rotation = -p.rotation;
        let (q, flag) = apply_delta(&p, &d);
        assert!(flag);
        assert_eq!(q.rotation, identity_quat());
    }

    #[test]
    fn mouth_decoder_has_only_a_position_head() {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(0).stream("dec");
        let dec = DeformDecoder::new(
            &mut store,
            "mouth",
            Branch::Mouth,
            5,
            HeadInit::Glorot,
            &mut rng,
        );
        assert!(dec.rotation.is_none() && dec.scale.is_none());
        assert_eq!(dec.params().len(), 4 + 2);
        let d = dec.decode(&store, &[0.3, -0.2, 0.9, 1.0, -1.0]).unwrap();
        assert_eq!(d.rotation, Vector4::zeros());
        assert_eq!(d.log_scale, Vector3::zeros());
        assert!(matches!(
            dec.decode(&store, &[0.0; 4]),
            Err(DeformError::Dim(_))
        ));
    }
}
