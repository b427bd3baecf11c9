use std::fs;
use std::io::Write;
use std::path::Path;

use super::SplatError;

/// Row-major, channel-interleaved image of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, SplatError> {
        if data.len() != width * height * channels {
            return Err(SplatError::ImageSize);
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One channel as a dense `height × width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Binary PPM (P6, 8-bit). Values are clamped to [0, 1] and rounded;
    /// images with other than three channels are written as gray (first
    /// channel) replicated, or padded with zeros.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in self.data.chunks(self.channels) {
            for c in 0..3 {
                let v = match self.channels {
                    1 => px[0],
                    n if c < n => px[c],
                    _ => 0.0,
                };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), SplatError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Image, SplatError> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(SplatError::Ppm("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| SplatError::Ppm("header is not ASCII"))?,
            );
        }
        if fields[0] != "P6" {
            return Err(SplatError::Ppm("not a binary P6 file"));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| SplatError::Ppm("bad header number"))
        };
        let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if max != 255 {
            return Err(SplatError::Ppm("only 8-bit PPM is supported"));
        }
        pos += 1;
        let body = bytes
            .get(pos..pos + w * h * 3)
            .ok_or(SplatError::Ppm("truncated pixel data"))?;
        Ok(Image {
            width: w,
            height: h,
            channels: 3,
            data: body.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Image, SplatError> {
        Image::from_ppm_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantizes_to_8_bit() {
        let mut img = Image::new(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 17.0;
        }
        let back = Image::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert!(back.same_dims(&img));
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn ppm_header_layout() {
        let img = Image::filled(2, 1, &[1.0, 0.0, 0.5]);
        let bytes = img.to_ppm_bytes();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 128, 255, 0, 128]);
    }

    #[test]
    fn rejects_ascii_ppm() {
        assert!(Image::from_ppm_bytes(b"P3\n1 1\n255\n0 0 0\n").is_err());
    }
}
