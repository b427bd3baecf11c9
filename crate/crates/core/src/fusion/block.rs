use rand::Rng;

use super::{aggregate_nodes, DistNodes, FusionError};
use crate::autodiff::{Activation, Axis, Graph, Linear, MlpBlock, NodeId, ParamId, ParamStore};
use crate::features::ViewKind;
use crate::rng::SeedTree;

/// One ensemble member: a relu trunk with a mean head and a softplus
/// variance head.
#[derive(Clone, Debug)]
pub struct Member {
    pub trunk: MlpBlock,
    pub mu: Linear,
    pub sigma: Linear,
}

impl Member {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        let trunk = MlpBlock::new(
            store,
            &format!("{name}.trunk"),
            &widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let last = *widths.last().unwrap();
        let mu = Linear::new(store, &format!("{name}.mu"), last, out, rng);
        let sigma = Linear::new(store, &format!("{name}.sigma"), last, out, rng);
        Self { trunk, mu, sigma }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.mu.params());
        p.extend(self.sigma.params());
        p
    }

    pub fn out_dim(&self) -> usize {
        self.mu.out_dim
    }
}

/// `(μ, σ)` for a batch of primitives.
///
/// With `state` (`n × s`) the member sees `[state, feature]`; a `1 × d`
/// feature is shared by every row without being materialized. Without
/// `state` the feature is the whole input.
pub fn member_forward(
    g: &mut Graph,
    store: &ParamStore,
    member: &Member,
    state: Option<NodeId>,
    feature: NodeId,
) -> Result<(NodeId, NodeId), FusionError> {
    let in_dim = member.trunk.in_dim();
    let (fr, fc) = g.value(feature).dims2();
    let first = &member.trunk.layers[0];
    let h = match state {
        Some(s) => {
            let (sr, sc) = g.value(s).dims2();
            if sc + fc != in_dim || (fr != 1 && fr != sr) {
                return Err(FusionError::Dim(format!(
                    "state {sr}x{sc} + feature {fr}x{fc} into a {in_dim}-wide member"
                )));
            }
            let w = g.param(store, first.weight);
            let ws = g.slice(w, Axis::Rows, 0, sc);
            let wf = g.slice(w, Axis::Rows, sc, fc);
            let a = g.matmul(s, ws);
            let b = g.matmul(feature, wf);
            let ab = g.add(a, b);
            let bias = g.param(store, first.bias);
            g.add(ab, bias)
        }
        None => {
            if fc != in_dim {
                return Err(FusionError::Dim(format!(
                    "feature {fr}x{fc} into a {in_dim}-wide member"
                )));
            }
            first.forward(g, store, feature)
        }
    };
    let last = member.trunk.layers.len() - 1;
    let act = |i: usize| {
        if i == last {
            member.trunk.output
        } else {
            member.trunk.hidden
        }
    };
    let mut h = act(0).apply(g, h);
    for (i, layer) in member.trunk.layers.iter().enumerate().skip(1) {
        h = layer.forward(g, store, h);
        h = act(i).apply(g, h);
    }
    let mu = member.mu.forward(g, store, h);
    let raw = member.sigma.forward(g, store, h);
    let sigma = Activation::Softplus.apply(g, raw);
    Ok((mu, sigma))
}

/// Ensemble serving one view.
#[derive(Clone, Debug)]
pub struct UncertaintyBlock {
    pub view: ViewKind,
    pub members: Vec<Member>,
    /// `None` when the block sees the feature alone.
    pub state_dim: Option<usize>,
    pub feature_dim: usize,
}

impl UncertaintyBlock {
    /// Members are initialized from independent named streams under `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        view: ViewKind,
        state_dim: Option<usize>,
        feature_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        members: usize,
        seed: &SeedTree,
    ) -> Result<Self, FusionError> {
        if members < 2 {
            return Err(FusionError::TooFewMembers(members));
        }
        let in_dim = state_dim.unwrap_or(0) + feature_dim;
        let members = (0..members)
            .map(|t| {
                let mut rng = seed.stream(&format!("member{t}"));
                Member::new(
                    store,
                    &format!("{name}.m{t}"),
                    in_dim,
                    hidden,
                    out_dim,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            view,
            members,
            state_dim,
            feature_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.members.iter().flat_map(|m| m.params()).collect()
    }

    pub fn out_dim(&self) -> usize {
        self.members[0].out_dim()
    }

    /// Runs every member and reduces them.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Option<NodeId>,
        feature: NodeId,
    ) -> Result<DistNodes, FusionError> {
        let state = if self.state_dim.is_some() {
            state
        } else {
            None
        };
        if self.state_dim.is_some() && state.is_none() {
            return Err(FusionError::Dim(format!(
                "the {} block needs a primitive state",
                self.view.name()
            )));
        }
        let outs = self
            .members
            .iter()
            .map(|m| member_forward(g, store, m, state, feature))
            .collect::<Result<Vec<_>, _>>()?;
        aggregate_nodes(g, &outs)
    }
}
