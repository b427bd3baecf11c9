use super::TrainError;
use crate::splat::Image;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Reported PSNR for a perfect reconstruction.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &Image, b: &Image) -> Result<(), TrainError> {
    if !a.same_dims(b) {
        return Err(TrainError::Dim(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if a.data.is_empty() {
        return Err(TrainError::Dim("empty image".into()));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64, TrainError> {
    check_pair(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.data.len() as f64)
}

/// `d l1 / d a` (sign, zero at ties).
fn l1_grad(a: &Image, b: &Image) -> Image {
    let n = a.data.len() as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Image::from_data(a.width, a.height, a.channels, data).expect("same dims")
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, TrainError> {
    check_pair(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` for unit range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, TrainError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a `w × h` plane; output is
/// `(w − 10) × (h − 10)`.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters a valid-size map back to `w × h`.
fn filter_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * g[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * tmp[y * ow + x];
            }
        }
    }
    out
}

/// Mean SSIM and, optionally, its gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>), TrainError> {
    check_pair(a, b)?;
    let (w, h, z) = (a.width, a.height, a.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(TrainError::TooSmall {
            width: w,
            height: h,
        });
    }
    let k = gaussian_taps();
    let count = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * z) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad {
        vec![0.0; w * h * z]
    } else {
        Vec::new()
    };
    for c in 0..z {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter(&pa, w, h, &k);
        let mu_b = filter(&pb, w, h, &k);
        let e_aa = filter(&sq(&pa, &pa), w, h, &k);
        let e_bb = filter(&sq(&pb, &pb), w, h, &k);
        let e_ab = filter(&sq(&pa, &pb), w, h, &k);
        let m = mu_a.len();
        let (mut da, mut dp, mut dq) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for i in 0..m {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let n1 = 2.0 * ma * mb + SSIM_C1;
            let n2 = 2.0 * (e_ab[i] - ma * mb) + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = (e_aa[i] - ma * ma) + (e_bb[i] - mb * mb) + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                da[i] = s * (2.0 * mb / n1 - 2.0 * ma / d1 - 2.0 * mb / n2 + 2.0 * ma / d2) / count;
                dp[i] = s * 2.0 / n2 / count;
                dq[i] = -s / d2 / count;
            }
        }
        if want_grad {
            let ga = filter_adjoint(&da, w, h, &k);
            let gp = filter_adjoint(&dp, w, h, &k);
            let gq = filter_adjoint(&dq, w, h, &k);
            for p in 0..w * h {
                grad[p * z + c] = ga[p] + pb[p] * gp[p] + 2.0 * pa[p] * gq[p];
            }
        }
    }
    let grad = want_grad.then(|| Image::from_data(w, h, z, grad).expect("same dims"));
    Ok((total / count, grad))
}

/// Mean local SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, TrainError> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and `d SSIM / d a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), TrainError> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("requested")))
}

/// Perceptual distance plugged into the fused-image loss.
pub trait Perceptual {
    fn distance(&self, a: &Image, b: &Image) -> f64;
    /// `d distance / d a`.
    fn gradient(&self, a: &Image, b: &Image) -> Image;
}

/// Stand-in for a learned perceptual metric: always zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LpipsStub;

impl Perceptual for LpipsStub {
    fn distance(&self, _: &Image, _: &Image) -> f64 {
        0.0
    }

    fn gradient(&self, a: &Image, _: &Image) -> Image {
        Image::new(a.width, a.height, a.channels)
    }
}

/// A loss value and its gradient with respect to the rendered image.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: Image,
}

/// `L1 + λ (1 − SSIM)` for a branch render against its masked target.
pub fn loss_branch(render: &Image, target: &Image, lambda: f64) -> Result<f64, TrainError> {
    Ok(l1_loss(render, target)? + lambda * (1.0 - ssim(render, target)?))
}

pub fn loss_branch_grad(
    render: &Image,
    target: &Image,
    lambda: f64,
) -> Result<ImageLoss, TrainError> {
    let l1 = l1_loss(render, target)?;
    let (s, sg) = ssim_with_grad(render, target)?;
    let mut grad = l1_grad(render, target);
    for (g, d) in grad.data.iter_mut().zip(&sg.data) {
        *g -= lambda * d;
    }
    Ok(ImageLoss {
        value: l1 + lambda * (1.0 - s),
        l1,
        ssim: s,
        grad,
    })
}

/// `L1 + λ (1 − SSIM) + γ · perceptual` for the fused render.
pub fn loss_fuse(
    render: &Image,
    target: &Image,
    lambda: f64,
    gamma: f64,
    perceptual: &dyn Perceptual,
) -> Result<f64, TrainError> {
    Ok(loss_branch(render, target, lambda)? + gamma * perceptual.distance(render, target))
}

pub fn loss_fuse_grad(
    render: &Image,
    target: &Image,
    lambda: f64,
    gamma: f64,
    perceptual: &dyn Perceptual,
) -> Result<ImageLoss, TrainError> {
    let mut out = loss_branch_grad(render, target, lambda)?;
    if gamma != 0.0 {
        out.value += gamma * perceptual.distance(render, target);
        let pg = perceptual.gradient(render, target);
        for (g, d) in out.grad.data.iter_mut().zip(&pg.data) {
            *g += gamma * d;
        }
    }
    Ok(out)
}

/// Squared L2 distance.
pub fn recon_loss(generated: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if generated.len() != target.len() {
        return Err(TrainError::Dim(format!(
            "{} vs {} entries",
            generated.len(),
            target.len()
        )));
    }
    Ok(generated
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

/// Cross-entropy of `softmax(logits)` against a one-hot label plus the
/// squared distance between emotion features.
pub fn emotion_stage2_loss(
    logits: &[f64],
    label: &[f64],
    f_emo: &[f64],
    f_gt: &[f64],
) -> Result<f64, TrainError> {
    if logits.len() != label.len() || logits.is_empty() {
        return Err(TrainError::Dim(format!(
            "{} logits for {} classes",
            logits.len(),
            label.len()
        )));
    }
    let ones = label.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || label.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(TrainError::NotOneHot);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let ce: f64 = label.iter().zip(logits).map(|(y, l)| y * (lse - l)).sum();
    Ok(ce + recon_loss(f_emo, f_gt)?)
}
