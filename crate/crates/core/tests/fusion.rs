//! Ensemble reduction and Gaussian fusion: algebraic properties, graph
//! versus plain agreement, and gradients through the whole block.

use std::collections::HashMap;

use rand::Rng;
use uasplat::autodiff::{backward, Graph, ParamId, ParamStore, Tensor};
use uasplat::features::ViewKind;
use uasplat::fusion::{
    aggregate_nodes, block_aggregate, fuse_nodes, fuse_pipeline, gaussian_fuse, member_forward,
    uniform_fuse, FusionError, FusionMode, StateDistribution, UncertaintyBlock,
};
use uasplat::rng::SeedTree;

fn random_dist(rng: &mut impl Rng, d: usize) -> StateDistribution {
    let members: Vec<(Vec<f64>, Vec<f64>)> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                (0..d).map(|_| rng.gen_range(1e-3..2.0)).collect(),
            )
        })
        .collect();
    block_aggregate(&members).unwrap()
}

#[test]
fn fused_mean_lies_between_view_means_and_precisions_add() {
    let mut rng = SeedTree::new(1).stream("fuse");
    for _ in 0..200 {
        let views: Vec<_> = (0..rng.gen_range(1..5))
            .map(|_| random_dist(&mut rng, 4))
            .collect();
        let f = gaussian_fuse(&views).unwrap();
        for k in 0..4 {
            let lo = views
                .iter()
                .map(|v| v.mean[k])
                .fold(f64::INFINITY, f64::min);
            let hi = views
                .iter()
                .map(|v| v.mean[k])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(f.mean[k] >= lo - 1e-12 && f.mean[k] <= hi + 1e-12);
            let prec: f64 = views.iter().map(|v| 1.0 / v.var[k]).sum();
            assert!((1.0 / f.var[k] - prec).abs() <= 1e-12 * prec);
            assert!(views.iter().all(|v| f.var[k] <= v.var[k] * (1.0 + 1e-12)));
        }
    }
}

#[test]
fn inflating_one_view_moves_toward_the_rest() {
    let mut rng = SeedTree::new(2).stream("mono");
    for _ in 0..100 {
        let views: Vec<_> = (0..3).map(|_| random_dist(&mut rng, 3)).collect();
        let rest = gaussian_fuse(&views[1..]).unwrap();
        let mut prev = gaussian_fuse(&views).unwrap();
        for factor in [2.0, 10.0, 1e3, 1e6] {
            let mut v = views.clone();
            v[0].var.iter_mut().for_each(|s| *s *= factor);
            let f = gaussian_fuse(&v).unwrap();
            for k in 0..3 {
                assert!(
                    (f.mean[k] - rest.mean[k]).abs() <= (prev.mean[k] - rest.mean[k]).abs() + 1e-12
                );
            }
            prev = f;
        }
        for k in 0..3 {
            assert!((prev.mean[k] - rest.mean[k]).abs() < 1e-3);
        }
    }
}

#[test]
fn replicated_views_divide_the_variance() {
    let mut rng = SeedTree::new(3).stream("rep");
    let v = random_dist(&mut rng, 5);
    let f = gaussian_fuse(&vec![v.clone(); 4]).unwrap();
    for k in 0..5 {
        assert!((f.mean[k] - v.mean[k]).abs() < 1e-12);
        assert!((f.var[k] - v.var[k] / 4.0).abs() < 1e-15);
    }
    let u = uniform_fuse(&vec![v.clone(); 4]).unwrap();
    assert_eq!(u.mean.len(), 5);
}

#[test]
fn reduction_is_translation_invariant() {
    let mut rng = SeedTree::new(4).stream("shift");
    for _ in 0..50 {
        let members: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
            .map(|_| {
                (
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..3).map(|_| rng.gen_range(0.1..1.0)).collect(),
                )
            })
            .collect();
        let k = rng.gen_range(-5.0..5.0);
        let shifted: Vec<_> = members
            .iter()
            .map(|(m, s)| (m.iter().map(|x| x + k).collect(), s.clone()))
            .collect();
        let (a, b) = (
            block_aggregate(&members).unwrap(),
            block_aggregate(&shifted).unwrap(),
        );
        for j in 0..3 {
            assert!((b.mean[j] - a.mean[j] - k).abs() < 1e-12);
            assert!((b.eu[j] - a.eu[j]).abs() < 1e-12);
            assert_eq!(b.au[j], a.au[j]);
            assert!((b.var[j] - a.var[j]).abs() < 1e-12);
        }
    }
}

fn block(
    store: &mut ParamStore,
    seed: u64,
    view: ViewKind,
    state: Option<usize>,
    fdim: usize,
    t: usize,
) -> UncertaintyBlock {
    UncertaintyBlock::new(
        store,
        view.name(),
        view,
        state,
        fdim,
        &[8, 8],
        3,
        t,
        &SeedTree::new(seed).child(view.name()),
    )
    .unwrap()
}

#[test]
fn graph_reduction_matches_plain_reduction() {
    let mut rng = SeedTree::new(5).stream("g");
    let mut store = ParamStore::new();
    let b = block(&mut store, 5, ViewKind::Audio, Some(4), 6, 10);
    let mut g = Graph::new();
    let state = g.constant(Tensor::matrix(
        3,
        4,
        (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let feat = g.constant(Tensor::row(
        &(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    ));
    let outs: Vec<_> = b
        .members
        .iter()
        .map(|m| member_forward(&mut g, &store, m, Some(state), feat).unwrap())
        .collect();
    let nodes = aggregate_nodes(&mut g, &outs).unwrap();
    for r in 0..3 {
        let plain: Vec<(Vec<f64>, Vec<f64>)> = outs
            .iter()
            .map(|&(m, s)| {
                (
                    g.value(m).row_slice(r).to_vec(),
                    g.value(s).row_slice(r).to_vec(),
                )
            })
            .collect();
        let d = block_aggregate(&plain).unwrap();
        for (node, want) in [
            (nodes.mean, &d.mean),
            (nodes.var, &d.var),
            (nodes.eu, &d.eu),
            (nodes.au, &d.au),
        ] {
            for (a, b) in g.value(node).row_slice(r).iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(d.var.iter().zip(d.total()).all(|(v, t)| *v == t));
    }
}

#[test]
fn shared_feature_equals_explicit_concatenation() {
    let mut rng = SeedTree::new(6).stream("cat");
    let mut store = ParamStore::new();
    let b = block(&mut store, 6, ViewKind::Tone, Some(4), 5, 2);
    let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let state = g.constant(Tensor::matrix(2, 4, s.clone()));
    let feat = g.constant(Tensor::row(&f));
    let (mu, _) = member_forward(&mut g, &store, &b.members[0], Some(state), feat).unwrap();
    let mut joint = Vec::new();
    for r in 0..2 {
        joint.extend_from_slice(&s[r * 4..r * 4 + 4]);
        joint.extend_from_slice(&f);
    }
    let mut g2 = Graph::new();
    let x = g2.constant(Tensor::matrix(2, 9, joint));
    let h = b.members[0].trunk.forward(&mut g2, &store, x);
    let mu2 = b.members[0].mu.forward(&mut g2, &store, h);
    for (a, c) in g.value(mu).data().iter().zip(g2.value(mu2).data()) {
        assert!((a - c).abs() < 1e-12);
    }
}

#[test]
fn zero_member_outputs_ln2_variance() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 7, ViewKind::Exp, Some(2), 3, 2);
    for id in b.params() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape));
    }
    let mut g = Graph::new();
    let state = g.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]));
    let feat = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
    let (mu, sigma) = member_forward(&mut g, &store, &b.members[0], Some(state), feat).unwrap();
    assert!(g.value(mu).data().iter().all(|&v| v == 0.0));
    for &s in g.value(sigma).data() {
        assert!((s - (2f64.ln() + 1e-6)).abs() < 1e-15);
        assert!((s - 0.6931).abs() < 1e-4);
    }
}

#[test]
fn variance_heads_stay_positive_on_extreme_inputs() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 8, ViewKind::Emotion, None, 4, 3);
    for scale in [1e-3, 1.0, 1e3, 1e6] {
        let mut g = Graph::new();
        let feat = g.constant(Tensor::matrix(
            2,
            4,
            vec![scale, -scale, scale, 0.0, -scale, -scale, 0.5, scale],
        ));
        for m in &b.members {
            let (_, s) = member_forward(&mut g, &store, m, None, feat).unwrap();
            assert!(g
                .value(s)
                .data()
                .iter()
                .all(|&v| v >= 1e-6 && v.is_finite()));
        }
    }
}

#[test]
fn dimension_errors_are_reported() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 9, ViewKind::Audio, Some(4), 6, 2);
    let mut g = Graph::new();
    let state = g.constant(Tensor::zeros(&[3, 4]));
    let bad = g.constant(Tensor::zeros(&[1, 5]));
    assert!(matches!(
        member_forward(&mut g, &store, &b.members[0], Some(state), bad),
        Err(FusionError::Dim(_))
    ));
    assert!(matches!(
        UncertaintyBlock::new(
            &mut store,
            "x",
            ViewKind::Audio,
            None,
            2,
            &[4],
            2,
            1,
            &SeedTree::new(0)
        ),
        Err(FusionError::TooFewMembers(1))
    ));
    let feat = g.constant(Tensor::zeros(&[1, 6]));
    let missing = fuse_pipeline(
        &mut g,
        &store,
        &[b],
        state,
        &[(ViewKind::Exp, feat)],
        FusionMode::Uncertainty,
    );
    assert!(matches!(
        missing,
        Err(FusionError::MissingView(ViewKind::Audio))
    ));
}

#[test]
fn identical_members_have_zero_spread_in_the_graph() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 10, ViewKind::Exp, Some(2), 3, 10);
    // copy member 0 into every other member
    let src = b.members[0].params();
    for m in &b.members[1..] {
        for (dst, s) in m.params().into_iter().zip(&src) {
            let t = store.get(*s).clone();
            store.set(dst, t);
        }
    }
    let mut g = Graph::new();
    let state = g.constant(Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]));
    let feat = g.constant(Tensor::row(&[0.5, -1.0, 2.0]));
    let d = b.forward(&mut g, &store, Some(state), feat).unwrap();
    assert!(g.value(d.eu).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(d.var).data(), g.value(d.au).data());
}

#[test]
fn fused_view_order_is_irrelevant() {
    let mut rng = SeedTree::new(11).stream("perm");
    for _ in 0..50 {
        let views: Vec<_> = (0..4).map(|_| random_dist(&mut rng, 3)).collect();
        let a = gaussian_fuse(&views).unwrap();
        let mut shuffled = views.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let b = gaussian_fuse(&shuffled).unwrap();
        for k in 0..3 {
            assert!((a.mean[k] - b.mean[k]).abs() < 1e-12);
            assert!((a.var[k] - b.var[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn member_weight_gradients_through_fusion() {
    let tree = SeedTree::new(12);
    for trial in 0..5 {
        let mut rng = tree.stream(&trial.to_string());
        let mut store = ParamStore::new();
        let views = [ViewKind::Audio, ViewKind::Exp, ViewKind::Tone];
        let blocks: Vec<_> = views
            .iter()
            .map(|&v| block(&mut store, 100 + trial, v, Some(3), 4, 3))
            .collect();
        let state = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let feats: Vec<Tensor> = views
            .iter()
            .map(|_| Tensor::row(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let target = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for mode in [FusionMode::Uncertainty, FusionMode::Uniform] {
            let build = |store: &ParamStore, g: &mut Graph| {
                let s = g.constant(state.clone());
                let fs: Vec<_> = views
                    .iter()
                    .zip(&feats)
                    .map(|(&v, f)| (v, g.constant(f.clone())))
                    .collect();
                let p = fuse_pipeline(g, store, &blocks, s, &fs, mode).unwrap();
                let t = g.constant(target.clone());
                let d = g.sub(p.fused.mean, t);
                let sq = g.square(d);
                g.sum(sq)
            };
            let mut g = Graph::new();
            let l = build(&store, &mut g);
            let grads: HashMap<ParamId, Tensor> = backward(&g, l)
                .unwrap()
                .for_params(&g)
                .into_iter()
                .collect();
            drop(g);
            let ids: Vec<ParamId> = blocks.iter().flat_map(|b| b.params()).collect();
            for _ in 0..10 {
                let id = ids[rng.gen_range(0..ids.len())];
                let idx = rng.gen_range(0..store.get(id).len());
                let h = 1e-5;
                let orig = store.get(id).data()[idx];
                let mut eval = |v: f64| {
                    store.get_mut(id).data_mut()[idx] = v;
                    let mut g = Graph::new();
                    let l = build(&store, &mut g);
                    g.value(l).item()
                };
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                store.get_mut(id).data_mut()[idx] = orig;
                let analytic = grads[&id].data()[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{mode:?} {}[{idx}]: {analytic} vs {numeric}",
                    store.name(id)
                );
            }
        }
    }
}

#[test]
fn graph_fusion_matches_plain_fusion() {
    let mut rng = SeedTree::new(13).stream("gf");
    let views: Vec<_> = (0..3).map(|_| random_dist(&mut rng, 4)).collect();
    let mut g = Graph::new();
    let nodes: Vec<_> = views
        .iter()
        .map(|v| {
            let c = |g: &mut Graph, x: &Vec<f64>| g.constant(Tensor::row(x));
            uasplat::fusion::DistNodes {
                mean: c(&mut g, &v.mean),
                var: c(&mut g, &v.var),
                eu: c(&mut g, &v.eu),
                au: c(&mut g, &v.au),
            }
        })
        .collect();
    let f = fuse_nodes(&mut g, &nodes, FusionMode::Uncertainty).unwrap();
    let want = gaussian_fuse(&views).unwrap();
    for k in 0..4 {
        assert!((g.value(f.mean).data()[k] - want.mean[k]).abs() < 1e-12);
        assert!((g.value(f.var).data()[k] - want.var[k]).abs() < 1e-12);
    }
    let u = fuse_nodes(&mut g, &nodes, FusionMode::Uniform).unwrap();
    let want = uniform_fuse(&views).unwrap();
    for k in 0..4 {
        assert!((g.value(u.mean).data()[k] - want.mean[k]).abs() < 1e-12);
    }
}
