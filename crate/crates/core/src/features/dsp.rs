use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, FeatureError};
use crate::autodiff::Tensor;

/// Power values are floored here before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DspConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 26,
            n_mfcc: 13,
        }
    }
}

impl DspConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        ((sample_rate as f64 * self.frame_ms / 1000.0).round() as usize).max(1)
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        ((sample_rate as f64 * self.hop_ms / 1000.0).round() as usize).max(1)
    }

    /// Smallest power of two holding one frame.
    pub fn fft_len(&self, sample_rate: u32) -> usize {
        self.frame_len(sample_rate).next_power_of_two()
    }
}

/// `floor((n − frame_len) / hop) + 1`, or 0 when the clip is shorter than a frame.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len {
        0
    } else {
        (n - frame_len) / hop + 1
    }
}

/// Three per-frame streams over the same frames.
///
/// `windows` holds the raw samples of every frame; the wav-window embedding
/// is a learned projection of these rows (see [`super::EmotionAttention`]).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// `frames × (fft_len/2 + 1)` log power.
    pub spectrogram: Tensor,
    /// `frames × n_mfcc`.
    pub mfcc: Tensor,
    /// `frames × frame_len` raw samples.
    pub windows: Tensor,
    pub fft_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl FrameFeatures {
    pub fn frames(&self) -> usize {
        self.mfcc.rows()
    }

    /// Spectrogram and MFCC columns shifted to zero mean and unit variance
    /// over the clip; raw windows are left alone.
    pub fn standardized(&self) -> FrameFeatures {
        let norm = |t: &Tensor| {
            let (r, c) = t.dims2();
            let mut d = t.data().to_vec();
            for j in 0..c {
                let m = (0..r).map(|i| d[i * c + j]).sum::<f64>() / r as f64;
                let v = (0..r).map(|i| (d[i * c + j] - m).powi(2)).sum::<f64>() / r as f64;
                let s = v.sqrt().max(1e-6);
                for i in 0..r {
                    d[i * c + j] = (d[i * c + j] - m) / s;
                }
            }
            Tensor::matrix(r, c, d)
        };
        FrameFeatures {
            spectrogram: norm(&self.spectrogram),
            mfcc: norm(&self.mfcc),
            ..self.clone()
        }
    }

    /// `len` consecutive frames starting at `start`, indices clamped to the clip.
    pub fn window(&self, start: isize, len: usize) -> FrameFeatures {
        let n = self.frames() as isize;
        let rows: Vec<usize> = (0..len as isize)
            .map(|k| (start + k).clamp(0, n - 1) as usize)
            .collect();
        let pick = |t: &Tensor| {
            let c = t.cols();
            let mut d = Vec::with_capacity(rows.len() * c);
            for &r in &rows {
                d.extend_from_slice(t.row_slice(r));
            }
            Tensor::matrix(rows.len(), c, d)
        };
        FrameFeatures {
            spectrogram: pick(&self.spectrogram),
            mfcc: pick(&self.mfcc),
            windows: pick(&self.windows),
            fft_len: self.fft_len,
            hop: self.hop,
            sample_rate: self.sample_rate,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels × (fft_len/2 + 1)` triangular filters equally spaced on the HTK
/// mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(n_mels: usize, fft_len: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = fft_len / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / fft_len as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `keep` coefficients.
fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            s * if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            }
        })
        .collect()
}

/// Hann-windowed STFT log power, log mel energies and MFCCs.
pub fn extract_frames(clip: &AudioClip, cfg: &DspConfig) -> Result<FrameFeatures, FeatureError> {
    let sr = clip.sample_rate;
    let (frame_len, hop, nfft) = (cfg.frame_len(sr), cfg.hop(sr), cfg.fft_len(sr));
    if cfg.n_mfcc > cfg.n_mels {
        return Err(FeatureError::Dim(format!(
            "{} MFCCs from {} mel bands",
            cfg.n_mfcc, cfg.n_mels
        )));
    }
    let n = frame_count(clip.samples.len(), frame_len, hop);
    if n == 0 {
        return Err(FeatureError::TooShort {
            samples: clip.samples.len(),
            frame_len,
        });
    }
    let bins = nfft / 2 + 1;
    let hann: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg.n_mels, nfft, sr);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);

    let mut spec = Vec::with_capacity(n * bins);
    let mut mfcc = Vec::with_capacity(n * cfg.n_mfcc);
    let mut windows = Vec::with_capacity(n * frame_len);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for t in 0..n {
        let raw = &clip.samples[t * hop..t * hop + frame_len];
        windows.extend_from_slice(raw);
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(if i < frame_len { raw[i] * hann[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        spec.extend(power.iter().map(|p| p.max(LOG_FLOOR).ln()));
        let logmel: Vec<f64> = fb
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum::<f64>()
                    .max(LOG_FLOOR)
                    .ln()
            })
            .collect();
        mfcc.extend(dct2(&logmel, cfg.n_mfcc));
    }
    Ok(FrameFeatures {
        spectrogram: Tensor::matrix(n, bins, spec),
        mfcc: Tensor::matrix(n, cfg.n_mfcc, mfcc),
        windows: Tensor::matrix(n, frame_len, windows),
        fft_len: nfft,
        hop,
        sample_rate: sr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: u32, n: usize) -> AudioClip {
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioClip::new(s, sr).unwrap()
    }

    #[test]
    fn default_geometry_at_16k() {
        let c = DspConfig::default();
        assert_eq!(
            (c.frame_len(16000), c.hop(16000), c.fft_len(16000)),
            (400, 160, 512)
        );
    }

    #[test]
    fn pure_tone_peaks_in_its_bin() {
        let f = extract_frames(&tone(440.0, 16000, 16000), &DspConfig::default()).unwrap();
        let expect = (440.0 * 512.0 / 16000.0_f64).round() as usize;
        assert_eq!(expect, 14);
        for t in 0..f.frames() {
            let row = f.spectrogram.row_slice(t);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(arg, expect, "frame {t}");
        }
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let clip = AudioClip::new(vec![0.0; 4000], 16000).unwrap();
        let f = extract_frames(&clip, &DspConfig::default()).unwrap();
        assert!(f.spectrogram.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        for t in 1..f.frames() {
            assert_eq!(f.mfcc.row_slice(t), f.mfcc.row_slice(0));
        }
    }

    #[test]
    fn one_frame_boundary() {
        let clip = AudioClip::new(vec![0.1; 400], 16000).unwrap();
        assert_eq!(
            extract_frames(&clip, &DspConfig::default())
                .unwrap()
                .frames(),
            1
        );
        let short = AudioClip::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(
            extract_frames(&short, &DspConfig::default()),
            Err(FeatureError::TooShort { .. })
        ));
    }

    #[test]
    fn filterbank_partitions_the_band() {
        let fb = mel_filterbank(26, 512, 16000);
        assert_eq!(fb.len(), 26);
        assert!(fb.iter().all(|f| f.iter().any(|&w| w > 0.0)));
        // interior bins are covered by two overlapping triangles summing to one
        let k = 100;
        let s: f64 = fb.iter().map(|f| f[k]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dct_is_orthonormal() {
        let x = [0.3, -1.0, 2.0, 0.5];
        let c = dct2(&x, 4);
        let e1: f64 = x.iter().map(|v| v * v).sum();
        let e2: f64 = c.iter().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-12);
        assert!((c[0] - x.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }
}
