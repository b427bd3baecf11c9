use std::fmt::Write as _;
use std::path::Path;

use super::{fuse_nodes, DistNodes, FusedNodes, FusionError, FusionMode, UncertaintyBlock};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::features::ViewKind;

/// Every block's reduction plus the fused state, all `primitives × D`.
#[derive(Clone, Debug)]
pub struct PipelineNodes {
    pub views: Vec<(ViewKind, DistNodes)>,
    pub fused: FusedNodes,
}

/// Runs each block on its view feature and fuses the results.
///
/// `state` is the `n × s` primitive state; `features` maps views to either a
/// shared `1 × d` row or a per-primitive `n × d` matrix.
pub fn fuse_pipeline(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[UncertaintyBlock],
    state: NodeId,
    features: &[(ViewKind, NodeId)],
    mode: FusionMode,
) -> Result<PipelineNodes, FusionError> {
    let mut views = Vec::with_capacity(blocks.len());
    for b in blocks {
        let &(_, f) = features
            .iter()
            .find(|(v, _)| *v == b.view)
            .ok_or(FusionError::MissingView(b.view))?;
        views.push((b.view, b.forward(g, store, Some(state), f)?));
    }
    let dists: Vec<DistNodes> = views.iter().map(|v| v.1).collect();
    let fused = fuse_nodes(g, &dists, mode)?;
    Ok(PipelineNodes { views, fused })
}

/// Mean Gaussian negative log-likelihood of the (held-fixed) fused mean under
/// every view's `(μ̂, σ̂)`, up to the constant `½ ln 2π`.
pub fn consistency_nll(g: &mut Graph, p: &PipelineNodes) -> NodeId {
    let target = g.constant(g.value(p.fused.mean).clone());
    let mut total = None;
    for (_, v) in &p.views {
        let d = g.sub(target, v.mean);
        let d2 = g.square(d);
        let r = g.div(d2, v.var);
        let lv = g.log(v.var);
        let s = g.add(r, lv);
        let m = g.mean(s);
        total = Some(total.map_or(m, |t| g.add(t, m)));
    }
    let t = total.expect("pipeline has at least one view");
    g.scale(t, 0.5 / p.views.len() as f64)
}

/// Plain-text table of `μ̂, σ̂, EU, AU` per primitive and view:
/// `primitive view quantity v0 .. v{D-1}`.
pub fn write_diagnostics(
    path: &Path,
    g: &Graph,
    p: &PipelineNodes,
    primitive_ids: &[usize],
) -> std::io::Result<()> {
    let mut out = String::from("# primitive view quantity values\n");
    let row = |out: &mut String, t: &Tensor, r: usize, prim: usize, view: &str, q: &str| {
        let _ = write!(out, "{prim} {view} {q}");
        for v in t.row_slice(r) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    };
    for (r, &prim) in primitive_ids.iter().enumerate() {
        for (view, d) in &p.views {
            for (q, node) in [("mean", d.mean), ("var", d.var), ("eu", d.eu), ("au", d.au)] {
                row(&mut out, g.value(node), r, prim, view.name(), q);
            }
        }
        row(&mut out, g.value(p.fused.mean), r, prim, "fused", "mean");
        row(&mut out, g.value(p.fused.var), r, prim, "fused", "var");
    }
    std::fs::write(path, out)
}
