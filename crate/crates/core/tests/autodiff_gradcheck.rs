//! Reverse-mode gradients against central finite differences.

use std::sync::Arc;

use rand::Rng;
use uasplat::autodiff::{
    backward, Activation, AutodiffError, Axis, GatherTaps, Graph, MlpBlock, NodeId, ParamStore,
    Tensor,
};
use uasplat::rng::SeedTree;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks d f / d x for every entry of every input tensor, where `f` builds a
/// scalar from leaves holding `inputs`.
fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId, tol: f64) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<_> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &ids);
    let grads = backward(&g, out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let e = rel_err(analytic.data()[i], numeric);
            assert!(
                e < tol,
                "input {k} entry {i}: analytic {} numeric {numeric} (rel {e})",
                analytic.data()[i]
            );
            worst = worst.max(e);
        }
    }
    worst
}

fn random(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

#[test]
fn square_at_three_has_slope_six() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x);
    let grads = backward(&g, y).unwrap();
    assert_eq!(grads.get(x).item(), 6.0);
}

#[test]
fn constant_has_zero_slope() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let c = g.constant(Tensor::scalar(5.0));
    let grads = backward(&g, c).unwrap();
    assert_eq!(grads.get(x).item(), 0.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
    let y = g.exp(x);
    assert!(matches!(
        backward(&g, y),
        Err(AutodiffError::NonScalarLoss(_))
    ));
}

#[test]
fn every_op_matches_finite_differences() {
    let tree = SeedTree::new(11);
    for restart in 0..10 {
        let mut rng = tree.stream(&format!("ops/{restart}"));
        let a = random(&mut rng, 3, 4, -1.0, 1.0);
        let b = random(&mut rng, 3, 4, -1.0, 1.0);
        let pos = random(&mut rng, 3, 4, 0.2, 2.0);
        let m = random(&mut rng, 4, 2, -1.0, 1.0);
        let row = random(&mut rng, 1, 4, -1.0, 1.0);
        let col = random(&mut rng, 3, 1, -1.0, 1.0);
        let sq = random(&mut rng, 4, 4, -1.0, 1.0);
        let w = random(&mut rng, 3, 4, -1.0, 1.0);
        let tol = 1e-4;

        // weighting by a fixed random tensor keeps the sum from hiding sign errors
        let weighted = move |g: &mut Graph, x: NodeId| {
            let (r, c) = g.value(x).dims2();
            let wt = g.constant(Tensor::matrix(
                r,
                c,
                (0..r * c).map(|i| ((i * 7 + 3) % 5) as f64 - 1.7).collect(),
            ));
            let p = g.mul(x, wt);
            g.sum(p)
        };

        check(
            &[a.clone(), b.clone()],
            |g, x| {
                let y = g.add(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), b.clone()],
            |g, x| {
                let y = g.sub(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), b.clone()],
            |g, x| {
                let y = g.mul(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), pos.clone()],
            |g, x| {
                let y = g.div(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), m.clone()],
            |g, x| {
                let y = g.matmul(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), row.clone()],
            |g, x| {
                let y = g.add(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), col.clone()],
            |g, x| {
                let y = g.mul(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.scale(x[0], -2.5);
                let y = g.offset(y, 0.3);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.exp(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[pos.clone()],
            |g, x| {
                let y = g.log(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.relu(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.tanh(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.softplus(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.sigmoid(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.softmax(x[0], Axis::Cols);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.softmax(x[0], Axis::Rows);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[pos.clone()],
            |g, x| {
                let y = g.power(x[0], -0.5);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[pos.clone()],
            |g, x| {
                let y = g.power(x[0], 2.7);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.sum_axis(x[0], Axis::Rows);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.sum_axis(x[0], Axis::Cols);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.exp(x[0]);
                g.mean(y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.slice(x[0], Axis::Cols, 1, 2);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.slice(x[0], Axis::Rows, 1, 2);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), b.clone()],
            |g, x| {
                let y = g.concat(&[x[0], x[1]], Axis::Cols);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), b.clone()],
            |g, x| {
                let y = g.concat(&[x[0], x[1]], Axis::Rows);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone()],
            |g, x| {
                let y = g.transpose(x[0]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[a.clone(), sq.clone()],
            |g, x| {
                let y = g.quad_form(x[0], x[1]);
                weighted(g, y)
            },
            tol,
        );
        check(
            &[row.clone()],
            |g, x| {
                let y = g.broadcast(x[0], 3, 4);
                weighted(g, y)
            },
            tol,
        );
        let taps = Arc::new(GatherTaps {
            rows: vec![[0, 1, 2, 2], [2, 0, 1, 1]],
            weights: vec![[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.5, 0.0]],
        });
        check(
            &[w.clone()],
            |g, x| {
                let y = g.gather(x[0], Arc::clone(&taps));
                weighted(g, y)
            },
            tol,
        );
    }
}

#[test]
fn two_layer_mlp_parameters_match_finite_differences() {
    let tree = SeedTree::new(5);
    for restart in 0..10 {
        let mut store = ParamStore::new();
        let mut rng = tree.stream(&format!("mlp/{restart}"));
        let mlp = MlpBlock::new(
            &mut store,
            "m",
            &[4, 6, 1],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        let x = random(&mut rng, 3, 4, -1.0, 1.0);
        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = mlp.forward(&mut g, store, xn);
            let s = g.sum(y);
            (g, s)
        };
        let (g, s) = loss_of(&store);
        let grads = backward(&g, s).unwrap().for_params(&g);
        assert_eq!(grads.len(), 4);
        for (id, analytic) in grads {
            for i in 0..analytic.len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += H;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= H;
                let (gp, sp) = loss_of(&plus);
                let (gm, sm) = loss_of(&minus);
                let numeric = (gp.value(sp).item() - gm.value(sm).item()) / (2.0 * H);
                let e = rel_err(analytic.data()[i], numeric);
                assert!(
                    e < 1e-4,
                    "{} entry {i}: {} vs {numeric}",
                    store.name(id),
                    analytic.data()[i]
                );
            }
        }
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = SeedTree::new(9).stream("lin");
    let x = random(&mut rng, 2, 3, -1.0, 1.0);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), true);
        let e = g.exp(xn);
        let l1 = g.sum(e);
        let t = g.tanh(xn);
        let sq = g.square(t);
        let l2 = g.mean(sq);
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2),
        };
        backward(&g, loss).unwrap().get(xn)
    };
    let (a, b, ab) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..ab.len() {
        assert!((a.data()[i] + b.data()[i] - ab.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn unused_leaves_receive_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
    let unused = g.leaf(Tensor::row(&[3.0, 4.0, 5.0]), true);
    let s = g.sum(x);
    let grads = backward(&g, s).unwrap();
    assert_eq!(grads.get(unused), Tensor::zeros(&[1, 3]));
}
