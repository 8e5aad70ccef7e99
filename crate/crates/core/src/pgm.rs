//! Minimal binary Netpbm I/O: 8-bit P5 (gray) and P6 (RGB).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit image, `channels` is 1 or 3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("pgm", format!("{} bytes for a {width}x{height} image", data.len())));
        }
        Ok(Image { width, height, channels: 1, data })
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn normalized(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("PNM", d);
        let mut pos = 0;
        // whitespace-separated header tokens, `#` comments run to end of line
        let mut token = || -> Result<&[u8]> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(&bytes[start..pos])
        };
        let channels = match token()? {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(bad("only binary P5/P6 is supported")),
        };
        let mut num = || -> Result<usize> {
            std::str::from_utf8(token()?).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad header number"))
        };
        let (width, height, maxval) = (num()?, num()?, num()?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("maxval must be in 1..=255"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let n = width * height * channels;
        if bytes.len() != start + n {
            return Err(bad(&format!("expected {n} raster bytes, found {}", bytes.len().saturating_sub(start))));
        }
        let scale = |v: u8| ((v as usize * 255 + maxval / 2) / maxval) as u8;
        let data = bytes[start..].iter().map(|&v| if maxval == 255 { v } else { scale(v) }).collect();
        Ok(Image { width, height, channels, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Binary mask as a P5 image: anomaly 255, normal 0.
pub fn mask_image(mask: &[u8], width: usize, height: usize) -> Result<Image> {
    Image::gray(width, height, mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let img = Image::gray(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        assert_eq!(Image::decode(&img.encode()).unwrap(), img);
        let mut raw = b"P5 # gray\n3 2\n# note\n255\n".to_vec();
        raw.extend_from_slice(&img.data);
        assert_eq!(Image::decode(&raw).unwrap(), img);
    }

    #[test]
    fn rescales_small_maxval_and_rejects_junk() {
        let raw = b"P5\n2 1\n1\n\x00\x01".to_vec();
        assert_eq!(Image::decode(&raw).unwrap().data, vec![0, 255]);
        assert!(Image::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(Image::decode(b"P5\n2 2\n255\n\x00").is_err());
    }
}
