use rand::Rng;
use rand_distr::StandardNormal;

use super::{ViewDims, ViewFeature, ViewKind};
use crate::autodiff::{Linear, ParamStore, Tensor};
use crate::rng::SeedTree;

/// Number of drive harmonics behind `f_exp`; the basis has twice as many columns.
const EXP_HARMONICS: usize = 4;
const WALK_STEP: f64 = 0.1;

/// Seeded stand-ins for the expression, tone and (audio-free) audio views.
#[derive(Clone, Debug)]
pub struct SyntheticViews {
    /// `exp × 2·EXP_HARMONICS`.
    exp_basis: Vec<Vec<f64>>,
    tone: Vec<f64>,
    walk: SeedTree,
    audio_dim: usize,
}

impl SyntheticViews {
    pub fn new(seed: &SeedTree, dims: &ViewDims) -> Self {
        let mut rng = seed.stream("exp_basis");
        let k = 2 * EXP_HARMONICS;
        let exp_basis = (0..dims.exp)
            .map(|_| {
                (0..k)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) / (k as f64).sqrt())
                    .collect()
            })
            .collect();
        let mut rng = seed.stream("tone");
        let tone = (0..dims.tone)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            exp_basis,
            tone,
            walk: seed.child("walk"),
            audio_dim: dims.audio,
        }
    }

    /// Basis times `(sin kπd, cos kπd)` for `k = 1..=4`.
    pub fn exp(&self, drive: f64) -> Vec<f64> {
        let mut h = Vec::with_capacity(2 * EXP_HARMONICS);
        for k in 1..=EXP_HARMONICS {
            let a = k as f64 * std::f64::consts::PI * drive;
            h.push(a.sin());
            h.push(a.cos());
        }
        self.exp_basis
            .iter()
            .map(|row| row.iter().zip(&h).map(|(b, x)| b * x).sum())
            .collect()
    }

    pub fn tone(&self) -> Vec<f64> {
        self.tone.clone()
    }

    /// Gaussian random walk; every frame's step comes from its own stream.
    pub fn walk(&self, frame: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.audio_dim];
        for t in 1..=frame {
            let mut rng = self.walk.stream(&t.to_string());
            for x in &mut v {
                *x += WALK_STEP * rng.sample::<f64, _>(StandardNormal);
            }
        }
        v
    }
}

/// Where `f_audio` comes from for one frame.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioSource {
    /// Flattened MFCC window, to be mapped by a learned projection.
    Mfcc(Vec<f64>),
    Walk(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFeatures {
    pub f_exp: ViewFeature,
    pub f_tone: ViewFeature,
    pub audio: AudioSource,
}

impl SynthFeatures {
    /// `f_audio` as a plain vector: the projected MFCC window, or the walk.
    pub fn f_audio(&self, proj: &Linear, store: &ParamStore) -> ViewFeature {
        let v = match &self.audio {
            AudioSource::Mfcc(w) => proj.apply_row(store, w),
            AudioSource::Walk(w) => w.clone(),
        };
        ViewFeature::new(ViewKind::Audio, v)
    }
}

/// `len` MFCC rows centred on `center` (edge rows repeated), flattened.
pub fn mfcc_window(mfcc: &Tensor, center: usize, len: usize) -> Vec<f64> {
    let n = mfcc.rows() as isize;
    let start = center as isize - (len / 2) as isize;
    let mut out = Vec::with_capacity(len * mfcc.cols());
    for k in 0..len as isize {
        out.extend_from_slice(mfcc.row_slice((start + k).clamp(0, n - 1) as usize));
    }
    out
}

/// Synthetic views for one frame. With `mfcc = Some((rows, center, len))`
/// the audio view is an MFCC window, otherwise a seeded random walk.
pub fn synth_features(
    views: &SyntheticViews,
    frame: usize,
    drive: f64,
    mfcc: Option<(&Tensor, usize, usize)>,
) -> SynthFeatures {
    let audio = match mfcc {
        Some((rows, center, len)) => AudioSource::Mfcc(mfcc_window(rows, center, len)),
        None => AudioSource::Walk(views.walk(frame)),
    };
    SynthFeatures {
        f_exp: ViewFeature::new(ViewKind::Exp, views.exp(drive)),
        f_tone: ViewFeature::new(ViewKind::Tone, views.tone()),
        audio,
    }
}
