use rand::Rng;

use super::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Lower bound added to every softplus variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// `softplus(x) + VARIANCE_FLOOR`; strictly positive output.
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
            Activation::Softplus => {
                let s = g.softplus(x);
                g.offset(s, VARIANCE_FLOOR)
            }
        }
    }
}

/// `fan_in × fan_out` matrix drawn from `U(−a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Affine map `x · W + b` over row-batched inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(in_dim, out_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Plain evaluation on one input row.
    pub fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let mut out = b.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, wij) in out.iter_mut().zip(w.row_slice(i)) {
                    *o += xi * wij;
                }
            }
        }
        out
    }
}

/// Feed-forward stack; `hidden` after every layer but the last, `output` after it.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub widths: Vec<usize>,
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            widths.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        assert!(
            widths.iter().all(|&w| w > 0),
            "layer widths must be positive"
        );
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self {
            widths: widths.to_vec(),
            layers,
            hidden,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            h = if i == last {
                self.output.apply(g, h)
            } else {
                self.hidden.apply(g, h)
            };
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// True when weight shapes chain with `widths`.
    pub fn is_consistent(&self, store: &ParamStore) -> bool {
        self.layers.len() + 1 == self.widths.len()
            && self
                .layers
                .iter()
                .zip(self.widths.windows(2))
                .all(|(l, w)| {
                    store.get(l.weight).dims2() == (w[0], w[1])
                        && store.get(l.bias).dims2() == (1, w[1])
                })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::rng::SeedTree;

    #[test]
    fn glorot_bound_respected() {
        let mut rng = SeedTree::new(1).stream("init");
        let w = glorot_uniform(10, 6, &mut rng);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < a));
        assert_eq!(w.dims2(), (10, 6));
    }

    #[test]
    fn mlp_shapes_chain() {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(2).stream("mlp");
        let mlp = MlpBlock::new(
            &mut store,
            "m",
            &[5, 7, 3],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        assert!(mlp.is_consistent(&store));
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 5, vec![0.1; 20]));
        let y = mlp.forward(&mut g, &store, x);
        assert_eq!(g.value(y).dims2(), (4, 3));
    }

    #[test]
    fn softplus_head_positive_for_extreme_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-800.0, -40.0, 0.0, 40.0, 800.0]));
        let y = Activation::Softplus.apply(&mut g, x);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn linear_apply_row_matches_graph() {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(3).stream("lin");
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        store.get_mut(lin.bias).data_mut()[1] = 0.25;
        let x = [0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let xn = g.constant(Tensor::row(&x));
        let y = lin.forward(&mut g, &store, xn);
        let plain = lin.apply_row(&store, &x);
        for (a, b) in g.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        let s = g.sum(y);
        let grads = backward(&g, s).unwrap();
        assert_eq!(grads.for_params(&g).len(), 2);
    }
}
