//! Binary latent files (`.lted`) and PGM image export.
//!
//! Latent file layout, all integers little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `LTED`                            |
//! | 4      | 2    | version (`1`)                           |
//! | 6      | 1    | dtype (`1` = IEEE-754 binary32)         |
//! | 7      | 12   | `C`, `H`, `W` as `u32`                  |
//! | 19     | 4CHW | payload, row-major, `c` slowest         |

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, FormatError, Result};
use crate::grid::{LatentGrid, Shape};
use crate::similarity::SimilarityMap;

pub const MAGIC: [u8; 4] = *b"LTED";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 19;

pub fn encode_latent(grid: &LatentGrid) -> Result<Vec<u8>> {
    let shape = grid.shape();
    let dims = [shape.channels, shape.height, shape.width].map(|d| {
        u32::try_from(d)
            .map_err(|_| Error::InvalidShape((shape.channels, shape.height, shape.width)))
    });
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    for d in dims {
        out.extend_from_slice(&d?.to_le_bytes());
    }
    for (i, &v) in grid.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(FormatError::NonFinite(i).into());
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentGrid, FormatError> {
    if bytes.len() < HEADER_LEN {
        let mut magic = [0u8; 4];
        let n = bytes.len().min(4);
        magic[..n].copy_from_slice(&bytes[..n]);
        if magic[..n] != MAGIC[..n] {
            return Err(FormatError::BadMagic(magic));
        }
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(bytes[6]));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (c, h, w) = (dim(7), dim(11), dim(15));
    let shape = Shape::new(c as usize, h as usize, w as usize)
        .map_err(|_| FormatError::ZeroDimension(c, h, w))?;
    let expected = HEADER_LEN + 4 * shape.len();
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(shape.len());
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        data.push(v as f64);
    }
    Ok(LatentGrid::from_vec(shape, data).expect("length and finiteness checked"))
}

/// Writes `bytes` through a temporary file in the target directory and
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_latent(path: impl AsRef<Path>, grid: &LatentGrid) -> Result<()> {
    write_atomic(path.as_ref(), &encode_latent(grid)?)
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(decode_latent(&bytes)?)
}

/// How real values map onto the 8-bit gray range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrayScale {
    /// `[0, 1] -> [0, 255]`, for sharpened maps.
    Unit,
    /// `[-1, 1] -> [0, 255]`, for raw cosine or mixed maps.
    Signed,
    /// Min-max stretch of the data itself.
    MinMax,
}

fn to_gray(values: &[f64], scale: GrayScale) -> Vec<u8> {
    let (lo, hi) = match scale {
        GrayScale::Unit => (0.0, 1.0),
        GrayScale::Signed => (-1.0, 1.0),
        GrayScale::MinMax => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
            (u.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn map_to_pgm(map: &SimilarityMap, scale: GrayScale) -> Vec<u8> {
    encode_pgm(map.height(), map.width(), &to_gray(map.values(), scale))
}

/// Writes a map as binary PGM; `v -> round(v * 255)` after range mapping.
pub fn export_map_pgm(map: &SimilarityMap, path: impl AsRef<Path>, scale: GrayScale) -> Result<()> {
    write_atomic(path.as_ref(), &map_to_pgm(map, scale))
}

/// Writes one channel of a latent as binary PGM.
pub fn export_latent_pgm(
    grid: &LatentGrid,
    channel: usize,
    path: impl AsRef<Path>,
    scale: GrayScale,
) -> Result<()> {
    let plane = grid.channel(channel)?;
    let s = plane.shape();
    let bytes = encode_pgm(s.height, s.width, &to_gray(plane.as_slice(), scale));
    write_atomic(path.as_ref(), &bytes)
}

/// Parses an 8-bit binary PGM into a `1 x H x W` grid of raw gray levels.
pub fn decode_pgm(bytes: &[u8]) -> Result<LatentGrid, FormatError> {
    let bad = |m: &str| FormatError::BadPgm(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let shape = Shape::new(1, height, width).map_err(|_| bad("zero dimension"))?;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != shape.len() {
        return Err(FormatError::Truncated {
            expected: pos + shape.len(),
            found: bytes.len(),
        });
    }
    let data = payload.iter().map(|&b| b as f64).collect();
    Ok(LatentGrid::from_vec(shape, data).expect("finite by construction"))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(decode_pgm(&bytes)?)
}
