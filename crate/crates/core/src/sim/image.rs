//! Binary tactile images and their PGM (P5) encoding.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM: {reason}")]
    Malformed { path: String, reason: String },
}

/// Square binary image, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TactileImage {
    size: usize,
    pixels: Vec<u8>,
}

impl TactileImage {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0; size * size],
        }
    }

    /// Wrap raw pixels; any nonzero value becomes 1.
    pub fn from_pixels(size: usize, pixels: Vec<u8>) -> Option<Self> {
        if pixels.len() != size * size {
            return None;
        }
        Some(Self {
            size,
            pixels: pixels.into_iter().map(|p| u8::from(p != 0)).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.size + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize) {
        self.pixels[row * self.size + col] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Mean (column, row) of the set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in 0..self.size {
            for c in 0..self.size {
                if self.get(r, c) != 0 {
                    n += 1;
                    sx += c as f64;
                    sy += r as f64;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Fraction of pixels that differ between two images of equal size.
    pub fn mean_abs_difference(&self, other: &TactileImage) -> f64 {
        assert_eq!(self.size, other.size, "image sizes differ");
        let diff = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / self.pixels.len() as f64
    }

    /// Pixels as floats in {0.0, 1.0}.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// 8-bit binary PGM with values 0/255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.pixels.iter().map(|&p| if p != 0 { 255u8 } else { 0 }));
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &str) -> Result<Self, ImageError> {
        let bad = |reason: &str| ImageError::Malformed {
            path: path.to_string(),
            reason: reason.to_string(),
        };
        let mut fields = Vec::with_capacity(4);
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
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a P5 file"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if w != h {
            return Err(bad("image is not square"));
        }
        if maxval != 255 {
            return Err(bad("expected maxval 255"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let data = bytes.get(pos..).unwrap_or(&[]);
        if data.len() != w * h {
            return Err(bad(&format!(
                "raster has {} bytes, expected {}",
                data.len(),
                w * h
            )));
        }
        if data.iter().any(|&b| b != 0 && b != 255) {
            return Err(bad("pixel values must be 0 or 255"));
        }
        Ok(Self::from_pixels(w, data.to_vec()).expect("size checked"))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let io = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_pgm()).map_err(io)
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_pgm(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_truncation() {
        let mut img = TactileImage::blank(8);
        img.set(1, 2);
        img.set(7, 7);
        let bytes = img.to_pgm();
        assert_eq!(TactileImage::from_pgm(&bytes, "x").unwrap(), img);
        let err = TactileImage::from_pgm(&bytes[..bytes.len() - 3], "x.pgm").unwrap_err();
        assert!(err.to_string().contains("x.pgm"));
    }

    #[test]
    fn centroid_of_single_pixel() {
        let mut img = TactileImage::blank(4);
        img.set(3, 1);
        assert_eq!(img.centroid(), Some((1.0, 3.0)));
        assert_eq!(TactileImage::blank(4).centroid(), None);
    }
}
