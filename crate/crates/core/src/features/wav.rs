use std::path::Path;

use super::FeatureError;

pub const SUPPORTED_RATES: [u32; 3] = [16000, 22050, 44100];

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FeatureError> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(FeatureError::SampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(FeatureError::Empty);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM WAV file; stereo is averaged to mono and samples are
/// scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioClip, FeatureError> {
    let reader = hound::WavReader::open(path).map_err(|e| FeatureError::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(FeatureError::Unsupported(format!(
            "{:?} {}-bit, only 16-bit PCM is read",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels != 1 && channels != 2 {
        return Err(FeatureError::Unsupported(format!("{channels} channels")));
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| FeatureError::Wav(e.to_string()))?;
    let samples: Vec<f64> = raw
        .chunks(channels)
        .map(|c| c.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| FeatureError::Wav(e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(err)?;
    }
    w.finalize().map_err(err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn one_second_of_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16000, &vec![0; 16000]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn antiphase_stereo_averages_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let frames: Vec<i16> = (0..200).flat_map(|_| [16384, -16384]).collect();
        write_raw(&p, 2, 22050, &frames);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 200);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        write_raw(&p, 1, 44100, &[32767]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples[0], 32767.0 / 32768.0);
        assert!((clip.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("e.wav");
        write_raw(&empty, 1, 16000, &[]);
        assert!(matches!(load_wav(&empty), Err(FeatureError::Empty)));
        let rate = dir.path().join("r.wav");
        write_raw(&rate, 1, 8000, &[1, 2]);
        assert!(matches!(
            load_wav(&rate),
            Err(FeatureError::SampleRate(8000))
        ));
        let junk = dir.path().join("j.wav");
        std::fs::write(&junk, b"RIFF0000WAVEjunk").unwrap();
        assert!(matches!(load_wav(&junk), Err(FeatureError::Wav(_))));
        let float = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_wav(&float),
            Err(FeatureError::Unsupported(_))
        ));
    }

    #[test]
    fn write_then_read_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let clip = AudioClip::new(
            (0..100).map(|i| (i as f64 * 0.1).sin() * 0.9).collect(),
            16000,
        )
        .unwrap();
        write_wav(&p, &clip).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in back.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }
}
