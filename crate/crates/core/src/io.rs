//! Atomic file writes, SHA-256 digests and 8-bit PPM/PGM images.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3);
        Self {
            width,
            height,
            channels: 3,
            pixels,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, detail: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            detail: detail.to_owned(),
        };
        if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
            return Err(err(0, "expected P5 or P6 magic"));
        }
        let channels = if bytes[1] == b'5' { 1 } else { 3 };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected a decimal header field"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| err(start, "header field out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(err(pos, "only maxval 255 is supported"));
        }
        if width == 0 || height == 0 {
            return Err(err(pos, "zero image dimension"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(err(pos, "missing whitespace after maxval"));
        }
        pos += 1;
        let need = width * height * channels;
        if bytes.len() - pos < need {
            return Err(err(bytes.len(), "truncated pixel payload"));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// Channel-major `[3, H, W]` tensor in `[0, 1]`; grayscale is replicated to three channels.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            let src = if self.channels == 1 { 0 } else { c };
            for p in 0..plane {
                data[c * plane + p] = self.pixels[p * self.channels + src] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("sized above")
    }

    /// Inverse of [`Raster::to_tensor`] for a `[3, H, W]` or `[1, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [3, h, w] | [1, 3, h, w] => (h, w),
            _ => return Err(Error::dim("Raster::from_tensor", "rank", format!("{:?}", t.shape()))),
        };
        let plane = h * w;
        let mut pixels = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                pixels[p * 3 + c] = to_byte(t.data()[c * plane + p]);
            }
        }
        Ok(Self::rgb(w, h, pixels))
    }
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PPM or PGM as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(Raster::read(path)?.to_tensor())
}

/// Binary mask from a PGM; any nonzero pixel is set.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let r = Raster::read(path)?;
    let mask = r.pixels.chunks(r.channels).map(|px| px[0] != 0).collect();
    Ok((r.height, r.width, mask))
}

pub fn mask_raster(height: usize, width: usize, mask: &[bool]) -> Raster {
    Raster::gray(width, height, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let r = Raster::rgb(3, 2, pixels);
        let back = Raster::decode(&r.encode(), Path::new("m.ppm")).unwrap();
        assert_eq!(back, r);
        let t = back.to_tensor();
        assert_eq!(Raster::from_tensor(&t).unwrap(), r);
    }

    #[test]
    fn grayscale_replicates() {
        let r = Raster::gray(2, 1, vec![0, 255]);
        let t = r.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut b = b"P5 # a comment\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[7, 9]);
        let r = Raster::decode(&b, Path::new("c.pgm")).unwrap();
        assert_eq!(r.pixels, vec![7, 9]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut bytes = Raster::gray(4, 4, vec![1; 16]).encode();
        bytes.truncate(bytes.len() - 1);
        let err = Raster::decode(&bytes, Path::new("t.pgm")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn malformed_header_names_offset() {
        let err = Raster::decode(b"P6\n12 x\n255\n", Path::new("h.ppm")).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 6),
            other => panic!("{other}"),
        }
        assert!(Raster::decode(b"P3\n1 1\n255\n", Path::new("h.ppm")).is_err());
    }
}
