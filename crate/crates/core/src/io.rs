//! File formats: binary PGM (P5) and packed little-endian `f32` with a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self { width, height, pixels: vec![v; width * height] }
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Min-max scale a row-major float plane into 8 bits (constant → 128).
    pub fn from_plane(values: &[f32], width: usize, height: usize) -> Self {
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = max - min;
        let pixels = values
            .iter()
            .map(|&v| {
                if range <= 0.0 {
                    128
                } else {
                    (255.0 * (v - min) / range + 0.5).floor().clamp(0.0, 255.0) as u8
                }
            })
            .collect();
        Self { width, height, pixels }
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
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
            return Err(bad("not a binary PGM (P5)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        pos += 1;
        let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixel data"))?;
        Ok(Self { width, height, pixels: pixels.to_vec() })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_pgm_bytes())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes, path)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}

/// Sidecar describing a packed `f32` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Image pixels per array cell along each spatial axis (1 for images).
    pub stride: usize,
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_f32(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format { path: path.to_path_buf(), detail: "length not a multiple of 4".into() });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `values` to `path` and the shape/stride description to `path.json`.
pub fn write_raw_f32(path: &Path, values: &[f32], shape: &[usize], stride: usize) -> Result<()> {
    debug_assert_eq!(values.len(), shape.iter().product::<usize>());
    write_bytes(path, &f32_to_le_bytes(values))?;
    write_json(
        &sidecar_path(path),
        &RawSidecar { dtype: "f32le".into(), shape: shape.to_vec(), stride },
    )
}

pub fn read_raw_f32(path: &Path) -> Result<(Vec<f32>, RawSidecar)> {
    let side: RawSidecar = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = le_bytes_to_f32(&bytes, path)?;
    if values.len() != side.shape.iter().product::<usize>() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} values but sidecar shape {:?}", values.len(), side.shape),
        });
    }
    Ok((values, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = GrayImage { width: 3, height: 2, pixels: vec![0, 10, 255, 128, 7, 9] };
        img.write_pgm(&p).unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap(), img);
        assert!(GrayImage::from_pgm_bytes(b"P2\n1 1\n255\n0", &p).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.f32");
        let v = vec![0.5f32, -1.0, 3.25, 1e-7, 0.0, 2.0];
        write_raw_f32(&p, &v, &[1, 1, 2, 3], 2).unwrap();
        let (back, side) = read_raw_f32(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(side.shape, vec![1, 1, 2, 3]);
        assert_eq!(side.stride, 2);
    }

    #[test]
    fn constant_plane_is_mid_gray() {
        let img = GrayImage::from_plane(&[0.3; 4], 2, 2);
        assert!(img.pixels.iter().all(|&p| p == 128));
    }
}
