//! Depth (16-bit PGM) and color (8-bit PPM) images with binary IO.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{DepthColorError, Result};

/// Depth map in millimeters; value 0 marks a missing measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DepthColorError::Dimension("zero-sized image".into()));
        }
        if data.len() != width * height {
            return Err(DepthColorError::Dimension(format!(
                "expected {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(DepthImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn is_null(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == 0
    }

    pub fn null_fraction(&self) -> f64 {
        let nulls = self.data.iter().filter(|&&v| v == 0).count();
        nulls as f64 / self.data.len() as f64
    }

    /// Median of the non-null depth values (lower median), or None when the
    /// image is entirely null.
    pub fn median_valid_depth(&self) -> Option<u16> {
        let mut valid: Vec<u16> = self.data.iter().copied().filter(|&v| v != 0).collect();
        if valid.is_empty() {
            return None;
        }
        valid.sort_unstable();
        Some(valid[(valid.len() - 1) / 2])
    }

    /// Valid depth normalized to [0, 1] by the per-image (min, max) of
    /// non-null pixels; null pixels map to 0. A constant image maps to 0.
    pub fn normalized(&self) -> Vec<f64> {
        let mut lo = u16::MAX;
        let mut hi = 0u16;
        for &v in &self.data {
            if v != 0 {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi <= lo {
            return vec![0.0; self.data.len()];
        }
        let span = (hi - lo) as f64;
        self.data
            .iter()
            .map(|&v| if v == 0 { 0.0 } else { (v - lo) as f64 / span })
            .collect()
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let magic = read_token(&mut r)?;
        if magic != "P5" {
            return Err(DepthColorError::Format(format!("expected P5 magic, got '{magic}'")));
        }
        let width: usize = parse_token(&read_token(&mut r)?)?;
        let height: usize = parse_token(&read_token(&mut r)?)?;
        let maxval: usize = parse_token(&read_token(&mut r)?)?;
        if maxval == 0 || maxval > 65535 {
            return Err(DepthColorError::Format(format!("bad maxval {maxval}")));
        }
        let count = width * height;
        let data = if maxval > 255 {
            let mut buf = vec![0u8; count * 2];
            r.read_exact(&mut buf)
                .map_err(|_| DepthColorError::Format("truncated 16-bit pixel data".into()))?;
            buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            let mut buf = vec![0u8; count];
            r.read_exact(&mut buf)
                .map_err(|_| DepthColorError::Format("truncated 8-bit pixel data".into()))?;
            buf.iter().map(|&b| b as u16).collect()
        };
        DepthImage::new(width, height, data)
    }

    /// 16-bit big-endian P5, maxval 65535.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.data {
            f.write_all(&v.to_be_bytes())?;
        }
        Ok(())
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DepthColorError::Dimension("zero-sized image".into()));
        }
        if data.len() != width * height * 3 {
            return Err(DepthColorError::Dimension(format!(
                "expected {} bytes for 3 channels, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(ColorImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let magic = read_token(&mut r)?;
        if magic != "P6" {
            return Err(DepthColorError::Format(format!("expected P6 magic, got '{magic}'")));
        }
        let width: usize = parse_token(&read_token(&mut r)?)?;
        let height: usize = parse_token(&read_token(&mut r)?)?;
        let maxval: usize = parse_token(&read_token(&mut r)?)?;
        if maxval != 255 {
            return Err(DepthColorError::Format(format!("only maxval 255 supported, got {maxval}")));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data)
            .map_err(|_| DepthColorError::Format("truncated pixel data".into()))?;
        ColorImage::new(width, height, data)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    /// Order-independent 64-bit content fingerprint (FNV-1a over header and
    /// bytes); used by golden-file tests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for b in self.width.to_le_bytes().iter().chain(self.height.to_le_bytes().iter()) {
            mix(*b);
        }
        for &b in &self.data {
            mix(b);
        }
        h
    }
}

/// Next whitespace-delimited token, skipping `#` comment lines.
fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(DepthColorError::Format("unexpected end of header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            // Comment runs to end of line.
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

fn parse_token(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| DepthColorError::Format(format!("bad header token '{tok}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let img = DepthImage::new(3, 2, vec![0, 1, 255, 256, 40000, 65535]).unwrap();
        img.write_pgm(&path).unwrap();
        let back = DepthImage::read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_with_comment_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x05\x09").unwrap();
        let img = DepthImage::read_pgm(&path).unwrap();
        assert_eq!(img.data(), &[5, 9]);
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let img = ColorImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        img.write_ppm(&path).unwrap();
        assert_eq!(ColorImage::read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn null_fraction_and_median() {
        let img = DepthImage::new(2, 2, vec![0, 0, 10, 30]).unwrap();
        assert_eq!(img.null_fraction(), 0.5);
        assert_eq!(img.median_valid_depth(), Some(10));
        let empty = DepthImage::new(1, 2, vec![0, 0]).unwrap();
        assert_eq!(empty.median_valid_depth(), None);
        assert_eq!(empty.null_fraction(), 1.0);
    }

    #[test]
    fn normalization_bounds_and_constant() {
        let img = DepthImage::new(2, 2, vec![100, 200, 0, 300]).unwrap();
        let n = img.normalized();
        assert_eq!(n[0], 0.0);
        assert_eq!(n[3], 1.0);
        assert_eq!(n[2], 0.0);
        let flat = DepthImage::new(2, 1, vec![500, 500]).unwrap();
        assert_eq!(flat.normalized(), vec![0.0, 0.0]);
    }
}
