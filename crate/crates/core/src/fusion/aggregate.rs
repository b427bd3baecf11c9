use super::{FusionError, FusionMode};
use crate::autodiff::{Graph, NodeId, VARIANCE_FLOOR};

/// One block's reduced prediction for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDistribution {
    pub mean: Vec<f64>,
    /// `au + eu`.
    pub var: Vec<f64>,
    pub eu: Vec<f64>,
    pub au: Vec<f64>,
}

impl StateDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `EU + AU`, the reported total uncertainty.
    pub fn total(&self) -> Vec<f64> {
        self.eu.iter().zip(&self.au).map(|(e, a)| e + a).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Reduces `T ≥ 2` member outputs `(μ_t, σ_t)`.
pub fn block_aggregate(members: &[(Vec<f64>, Vec<f64>)]) -> Result<StateDistribution, FusionError> {
    let t = members.len();
    if t < 2 {
        return Err(FusionError::TooFewMembers(t));
    }
    let d = members[0].0.len();
    if members.iter().any(|(m, s)| m.len() != d || s.len() != d) {
        return Err(FusionError::Dim("member outputs differ in length".into()));
    }
    // means are taken about the first member, so identical members reduce
    // exactly to that member and the spread is exactly zero
    let tf = t as f64;
    let (m0, s0) = (&members[0].0, &members[0].1);
    let mut mean = vec![0.0; d];
    let mut au = vec![0.0; d];
    for (m, s) in &members[1..] {
        for k in 0..d {
            mean[k] += m[k] - m0[k];
            au[k] += s[k] - s0[k];
        }
    }
    for k in 0..d {
        mean[k] = m0[k] + mean[k] / tf;
        au[k] = s0[k] + au[k] / tf;
    }
    let mut eu = vec![0.0; d];
    for (m, _) in members {
        for k in 0..d {
            eu[k] += (m[k] - mean[k]).powi(2);
        }
    }
    for e in &mut eu {
        *e /= tf;
    }
    let var = au.iter().zip(&eu).map(|(a, e)| a + e).collect();
    Ok(StateDistribution { mean, var, eu, au })
}

/// Elementwise precision-weighted fusion.
pub fn gaussian_fuse(views: &[StateDistribution]) -> Result<FusedState, FusionError> {
    let first = views.first().ok_or(FusionError::NoViews)?;
    let d = first.dim();
    if views.iter().any(|v| v.dim() != d || v.var.len() != d) {
        return Err(FusionError::Dim("views differ in state dimension".into()));
    }
    if let Some(&bad) = views
        .iter()
        .flat_map(|v| &v.var)
        .find(|&&s| !(s >= VARIANCE_FLOOR))
    {
        return Err(FusionError::BelowFloor(bad));
    }
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for k in 0..d {
        let mut prec = 0.0;
        let mut acc = 0.0;
        for v in views {
            prec += 1.0 / v.var[k];
            acc += v.mean[k] / v.var[k];
        }
        var[k] = 1.0 / prec;
        mean[k] = acc / prec;
    }
    Ok(FusedState { mean, var })
}

/// Equal-weight combination: the mean of the view means, with the variance
/// of that average under independence.
pub fn uniform_fuse(views: &[StateDistribution]) -> Result<FusedState, FusionError> {
    let first = views.first().ok_or(FusionError::NoViews)?;
    let d = first.dim();
    if views.iter().any(|v| v.dim() != d) {
        return Err(FusionError::Dim("views differ in state dimension".into()));
    }
    let n = views.len() as f64;
    let mean = (0..d)
        .map(|k| views.iter().map(|v| v.mean[k]).sum::<f64>() / n)
        .collect();
    let var = (0..d)
        .map(|k| views.iter().map(|v| v.var[k]).sum::<f64>() / (n * n))
        .collect();
    Ok(FusedState { mean, var })
}

/// Graph nodes of a block's reduction, each `primitives × D`.
#[derive(Clone, Copy, Debug)]
pub struct DistNodes {
    pub mean: NodeId,
    pub var: NodeId,
    pub eu: NodeId,
    pub au: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    pub mean: NodeId,
    pub var: NodeId,
}

fn mean_of(g: &mut Graph, xs: &[NodeId]) -> NodeId {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x);
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// `x₀ + mean(xᵢ − x₀)`: equal inputs give back `x₀` exactly.
fn anchored_mean(g: &mut Graph, xs: &[NodeId]) -> NodeId {
    let mut acc = None;
    for &x in &xs[1..] {
        let d = g.sub(x, xs[0]);
        acc = Some(acc.map_or(d, |a| g.add(a, d)));
    }
    let Some(acc) = acc else { return xs[0] };
    let shift = g.scale(acc, 1.0 / xs.len() as f64);
    g.add(xs[0], shift)
}

/// Differentiable [`block_aggregate`] over row-batched member outputs.
pub fn aggregate_nodes(
    g: &mut Graph,
    members: &[(NodeId, NodeId)],
) -> Result<DistNodes, FusionError> {
    if members.len() < 2 {
        return Err(FusionError::TooFewMembers(members.len()));
    }
    let shape = g.value(members[0].0).dims2();
    if members
        .iter()
        .any(|&(m, s)| g.value(m).dims2() != shape || g.value(s).dims2() != shape)
    {
        return Err(FusionError::Dim("member outputs differ in shape".into()));
    }
    let mus: Vec<NodeId> = members.iter().map(|m| m.0).collect();
    let sigmas: Vec<NodeId> = members.iter().map(|m| m.1).collect();
    let mean = anchored_mean(g, &mus);
    let au = anchored_mean(g, &sigmas);
    let dev: Vec<NodeId> = mus
        .iter()
        .map(|&m| {
            let d = g.sub(m, mean);
            g.square(d)
        })
        .collect();
    let eu = mean_of(g, &dev);
    let var = g.add(au, eu);
    Ok(DistNodes { mean, var, eu, au })
}

/// Differentiable fusion of view reductions under `mode`.
pub fn fuse_nodes(
    g: &mut Graph,
    views: &[DistNodes],
    mode: FusionMode,
) -> Result<FusedNodes, FusionError> {
    if views.is_empty() {
        return Err(FusionError::NoViews);
    }
    let shape = g.value(views[0].mean).dims2();
    if views
        .iter()
        .any(|v| g.value(v.mean).dims2() != shape || g.value(v.var).dims2() != shape)
    {
        return Err(FusionError::Dim("views differ in shape".into()));
    }
    match mode {
        FusionMode::Uncertainty => {
            let mut prec_sum = None;
            let mut weighted = None;
            for v in views {
                let p = g.power(v.var, -1.0);
                let pm = g.mul(p, v.mean);
                prec_sum = Some(prec_sum.map_or(p, |acc| g.add(acc, p)));
                weighted = Some(weighted.map_or(pm, |acc| g.add(acc, pm)));
            }
            let var = g.power(prec_sum.unwrap(), -1.0);
            let mean = g.mul(var, weighted.unwrap());
            Ok(FusedNodes { mean, var })
        }
        FusionMode::Uniform => {
            let means: Vec<NodeId> = views.iter().map(|v| v.mean).collect();
            let vars: Vec<NodeId> = views.iter().map(|v| v.var).collect();
            let mean = mean_of(g, &means);
            let avg_var = mean_of(g, &vars);
            let var = g.scale(avg_var, 1.0 / views.len() as f64);
            Ok(FusedNodes { mean, var })
        }
    }
}
