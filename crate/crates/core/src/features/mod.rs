//! Conditioning views: audio DSP, attention re-weighting, tri-plane emotion
//! encoding and synthetic stand-in features.

mod attention;
mod dsp;
mod synth;
mod triplane;
mod wav;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

pub use attention::{attn_reweight, AttentionOutput, EmotionAttention};
pub use dsp::{extract_frames, frame_count, mel_filterbank, DspConfig, FrameFeatures, LOG_FLOOR};
pub use synth::{mfcc_window, synth_features, AudioSource, SynthFeatures, SyntheticViews};
pub use triplane::{encode_emotion, plane_taps, EmotionTaps, FeaturePlanes, PLANE_AXES};
pub use wav::{load_wav, write_wav, AudioClip, SUPPORTED_RATES};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("WAV: {0}")]
    Wav(String),
    #[error("unsupported WAV format: {0}")]
    Unsupported(String),
    #[error("audio has no samples")]
    Empty,
    #[error("sample rate {0} Hz is not one of 16000, 22050, 44100")]
    SampleRate(u32),
    #[error("clip of {samples} samples is shorter than one {frame_len}-sample frame")]
    TooShort { samples: usize, frame_len: usize },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four conditioning views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewKind {
    Audio,
    Exp,
    Tone,
    Emotion,
}

impl ViewKind {
    pub const ALL: [ViewKind; 4] = [
        ViewKind::Audio,
        ViewKind::Exp,
        ViewKind::Tone,
        ViewKind::Emotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Audio => "f_audio",
            ViewKind::Exp => "f_exp",
            ViewKind::Tone => "f_tone",
            ViewKind::Emotion => "f_emotion",
        }
    }

    pub fn parse(s: &str) -> Option<ViewKind> {
        ViewKind::ALL
            .into_iter()
            .find(|v| v.name() == s || &v.name()[2..] == s)
    }
}

/// Per-view feature widths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewDims {
    pub audio: usize,
    pub exp: usize,
    pub tone: usize,
    pub emo_attn: usize,
}

impl Default for ViewDims {
    fn default() -> Self {
        Self {
            audio: 32,
            exp: 64,
            tone: 32,
            emo_attn: 16,
        }
    }
}

/// A named conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeature {
    pub view: ViewKind,
    pub values: Vec<f64>,
}

impl ViewFeature {
    pub fn new(view: ViewKind, values: Vec<f64>) -> Self {
        Self { view, values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Writes `frame v0 v1 ...` rows under a one-line `#` header.
pub fn write_table(
    path: &Path,
    header: &str,
    rows: &[(usize, Vec<f64>)],
) -> Result<(), FeatureError> {
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(header);
    out.push('\n');
    for (i, row) in rows {
        out.push_str(&i.to_string());
        for v in row {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<Vec<(usize, Vec<f64>)>, FeatureError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
    {
        let mut it = line.split_whitespace();
        let bad = || FeatureError::Dim(format!("bad table line: {line}"));
        let i = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let vals = it
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        rows.push((i, vals));
    }
    Ok(rows)
}
