//! Tiled rasterizer against a per-pixel brute-force compositor, plus
//! finite-difference checks of the reverse pass.

use nalgebra::{Vector2, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::Rng;
use uasplat::rng::SeedTree;
use uasplat::splat::{
    gaussian_weight, project, rasterize, rasterize_grad, Camera, GaussianPrimitive, Image,
    MAX_ALPHA, SUPPORT_RADIUS_SQ,
};

fn random_scene(rng: &mut impl Rng, n: usize, z: usize) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            GaussianPrimitive::new(
                Vector3::new(
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(2.0..4.0),
                ),
                Vector3::new(
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                ),
                q,
                rng.gen_range(0.2..1.0),
                (0..z).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
        })
        .collect()
}

/// Every pixel, every primitive, no binning: Eq.-1 compositing with the
/// renderer's kernel support and alpha clamp.
fn oracle(prims: &[GaussianPrimitive], cam: &Camera, bg: &[f64]) -> Image {
    let mut order: Vec<(f64, usize)> = Vec::new();
    let mut splats = Vec::new();
    for (i, p) in prims.iter().enumerate() {
        if let Some(s) = project(p, cam).visible() {
            order.push((s.depth, i));
            splats.push((i, s));
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut img = Image::new(cam.width, cam.height, bg.len());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut c = vec![0.0; bg.len()];
            for &(_, i) in &order {
                let s = &splats.iter().find(|(j, _)| *j == i).unwrap().1;
                let Some(w) = gaussian_weight(&px, &s.mean, &s.cov) else {
                    continue;
                };
                if -2.0 * w.ln() > SUPPORT_RADIUS_SQ {
                    continue;
                }
                let a = (prims[i].opacity * w).min(MAX_ALPHA);
                for ch in 0..bg.len() {
                    c[ch] += prims[i].color[ch] * a * trans;
                }
                trans *= 1.0 - a;
            }
            for ch in 0..bg.len() {
                c[ch] += trans * bg[ch];
            }
            img.pixel_mut(x, y).copy_from_slice(&c);
        }
    }
    img
}

#[test]
fn tiled_matches_oracle_on_small_scenes() {
    let tree = SeedTree::new(21);
    for trial in 0..20 {
        let mut rng = tree.stream(&format!("scene/{trial}"));
        let n = rng.gen_range(1..=16);
        let (w, h) = (rng.gen_range(8..=32), rng.gen_range(8..=32));
        let cam = Camera::axis_aligned(rng.gen_range(20.0..40.0), rng.gen_range(20.0..40.0), w, h)
            .unwrap();
        let prims = random_scene(&mut rng, n, 3);
        let bg = [0.2, 0.1, 0.7];
        let fast = rasterize(&prims, &cam, &bg).unwrap();
        let slow = oracle(&prims, &cam, &bg);
        assert!(
            fast.max_abs_diff(&slow) < 1e-6,
            "trial {trial}: {}",
            fast.max_abs_diff(&slow)
        );
    }
}

#[test]
fn three_primitives_eight_by_eight() {
    let mut rng = SeedTree::new(3).stream("3x8");
    let cam = Camera::axis_aligned(16.0, 16.0, 8, 8).unwrap();
    let prims = random_scene(&mut rng, 3, 3);
    let fast = rasterize(&prims, &cam, &[0.0, 0.0, 0.0]).unwrap();
    assert!(fast.max_abs_diff(&oracle(&prims, &cam, &[0.0; 3])) < 1e-6);
}

#[test]
fn composite_weights_plus_background_sum_to_one() {
    // with every color channel 1 and background 1, C = Σ weights + T_final
    let mut rng = SeedTree::new(4).stream("trans");
    for _ in 0..10 {
        let mut prims = random_scene(&mut rng, 12, 1);
        for p in &mut prims {
            p.color = vec![1.0];
        }
        let cam = Camera::axis_aligned(30.0, 30.0, 24, 24).unwrap();
        let img = rasterize(&prims, &cam, &[1.0]).unwrap();
        assert!(img.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}

#[test]
fn submission_order_does_not_matter() {
    let mut rng = SeedTree::new(5).stream("perm");
    let cam = Camera::axis_aligned(30.0, 30.0, 20, 20).unwrap();
    let mut prims = random_scene(&mut rng, 10, 3);
    let base = rasterize(&prims, &cam, &[0.0; 3]).unwrap();
    for _ in 0..5 {
        prims.shuffle(&mut rng);
        let img = rasterize(&prims, &cam, &[0.0; 3]).unwrap();
        assert!(img.max_abs_diff(&base) < 1e-12);
    }
}

#[test]
fn equal_depth_ties_follow_submission_index() {
    let cam = Camera::axis_aligned(30.0, 30.0, 8, 8).unwrap();
    let a =
        GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.2, 0.7, vec![1.0, 0.0, 0.0]);
    let b =
        GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.2, 0.7, vec![0.0, 0.0, 1.0]);
    let ab = rasterize(&[a.clone(), b.clone()], &cam, &[0.0; 3]).unwrap();
    let ba = rasterize(&[b, a], &cam, &[0.0; 3]).unwrap();
    // the earlier submission sits in front
    assert!(ab.pixel(4, 4)[0] > ab.pixel(4, 4)[2]);
    assert!(ba.pixel(4, 4)[2] > ba.pixel(4, 4)[0]);
}

#[test]
fn raising_opacity_never_lowers_own_weight() {
    let mut rng = SeedTree::new(6).stream("mono");
    let cam = Camera::axis_aligned(30.0, 30.0, 16, 16).unwrap();
    for _ in 0..10 {
        let mut prims = random_scene(&mut rng, 6, 1);
        let target = rng.gen_range(0..prims.len());
        // weight of `target` = render with only its color set to 1 and everything else 0
        for (i, p) in prims.iter_mut().enumerate() {
            p.color = vec![if i == target { 1.0 } else { 0.0 }];
        }
        let before = rasterize(&prims, &cam, &[0.0]).unwrap();
        prims[target].opacity = (prims[target].opacity + 0.3).min(1.0);
        let after = rasterize(&prims, &cam, &[0.0]).unwrap();
        for (a, b) in after.data.iter().zip(&before.data) {
            assert!(a + 1e-15 >= *b);
        }
    }
}

/// Which pixels each primitive reaches and whether its alpha is clamped there.
/// Finite differences are only meaningful when this does not change across
/// the stencil: the kernel support edge and the alpha clamp are kinks.
fn support_signature(prims: &[GaussianPrimitive], cam: &Camera) -> Vec<Vec<(usize, bool)>> {
    prims
        .iter()
        .map(|p| {
            let Some(s) = project(p, cam).visible() else {
                return Vec::new();
            };
            let mut hits = Vec::new();
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    if let Some(w) = gaussian_weight(&px, &s.mean, &s.cov) {
                        if -2.0 * w.ln() <= SUPPORT_RADIUS_SQ {
                            hits.push((y * cam.width + x, p.opacity * w > MAX_ALPHA));
                        }
                    }
                }
            }
            hits
        })
        .collect()
}

fn weighted_loss(prims: &[GaussianPrimitive], cam: &Camera, bg: &[f64], up: &Image) -> f64 {
    let img = rasterize(prims, cam, bg).unwrap();
    img.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
}

#[test]
fn reverse_pass_matches_finite_differences() {
    let tree = SeedTree::new(8);
    let h = 1e-6;
    for trial in 0..6 {
        let mut rng = tree.stream(&format!("fd/{trial}"));
        let cam = Camera::look_at(
            Vector3::new(0.3, -0.2, -1.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::y(),
            24.0,
            16,
            16,
        )
        .unwrap();
        let mut prims = random_scene(&mut rng, 3, 3);
        for p in &mut prims {
            p.opacity = rng.gen_range(0.2..0.8);
        }
        let bg = [0.3, 0.6, 0.1];
        let mut up = Image::new(16, 16, 3);
        for v in &mut up.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let grads = rasterize_grad(&prims, &cam, &bg, &up).unwrap();
        let mut checked = 0;
        let mut skipped = 0;
        for (i, g) in grads.iter().enumerate() {
            let mut probe =
                |field: &str,
                 k: usize,
                 analytic: f64,
                 bump: &dyn Fn(&mut GaussianPrimitive, f64)| {
                    let mut plus = prims.clone();
                    bump(&mut plus[i], h);
                    let mut minus = prims.clone();
                    bump(&mut minus[i], -h);
                    if support_signature(&plus, &cam) != support_signature(&minus, &cam) {
                        skipped += 1;
                        return;
                    }
                    let numeric = (weighted_loss(&plus, &cam, &bg, &up)
                        - weighted_loss(&minus, &cam, &bg, &up))
                        / (2.0 * h);
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
                    assert!(rel < 1e-3, "trial {trial} prim {i} {field}[{k}]: analytic {analytic} numeric {numeric}");
                    checked += 1;
                };
            for k in 0..3 {
                probe("center", k, g.center[k], &|p, d| p.center[k] += d);
                probe("scale", k, g.scale[k], &|p, d| p.scale[k] += d);
            }
            for k in 0..4 {
                probe("rotation", k, g.rotation[k], &|p, d| p.rotation[k] += d);
            }
            probe("opacity", 0, g.opacity, &|p, d| p.opacity += d);
            for k in 0..3 {
                probe("color", k, g.color[k], &|p, d| p.color[k] += d);
            }
        }
        assert_eq!(checked + skipped, 3 * 14);
        assert!(
            checked >= 3 * 14 - 3,
            "trial {trial}: {skipped} probes straddled a kink"
        );
    }
}
