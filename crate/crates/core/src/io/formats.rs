//! Binary photon-cube files and PFM depth maps.
//!
//! Cube file: `"SPCB"`, version byte `1`, then `T, M, N, bin_ps` as `u32`
//! little-endian, then `T * M * N` counts as `u32` little-endian in
//! pixel-major order.
//!
//! Depth file: portable float map, `"Pf\n<width> <height>\n-1.0\n"` followed by
//! `f32` little-endian rows from the bottom row to the top.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::domain::{checked_volume, DepthImage, PhotonCube};
use crate::error::{Error, Result};

pub const CUBE_MAGIC: [u8; 4] = *b"SPCB";
pub const CUBE_VERSION: u8 = 1;
const CUBE_HEADER: usize = 4 + 1 + 4 * 4;

/// Serialises a cube to bytes.
pub fn encode_cube(cube: &PhotonCube) -> Result<Vec<u8>> {
    let dims = [cube.bins(), cube.rows(), cube.cols()];
    let mut out = Vec::with_capacity(CUBE_HEADER + 4 * cube.counts().len());
    out.extend_from_slice(&CUBE_MAGIC);
    out.push(CUBE_VERSION);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::DimOverflow(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&cube.bin_width_ps().to_le_bytes());
    for c in cube.counts() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses bytes produced by [`encode_cube`].
pub fn decode_cube(bytes: &[u8]) -> Result<PhotonCube> {
    if bytes.len() < 4 || bytes[..4] != CUBE_MAGIC {
        return Err(Error::BadMagic {
            expected: CUBE_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < CUBE_HEADER {
        return Err(Error::Truncated {
            expected: CUBE_HEADER,
            found: bytes.len(),
        });
    }
    if bytes[4] != CUBE_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4] as u32));
    }
    let (t, m, n) = (
        read_u32(bytes, 5) as usize,
        read_u32(bytes, 9) as usize,
        read_u32(bytes, 13) as usize,
    );
    let bin_ps = read_u32(bytes, 17);
    let cells = checked_volume(t, m, n)?;
    let payload = cells
        .checked_mul(4)
        .and_then(|p| p.checked_add(CUBE_HEADER))
        .ok_or_else(|| Error::DimOverflow(format!("{t}x{m}x{n} payload")))?;
    if bytes.len() != payload {
        return Err(Error::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    let counts = bytes[CUBE_HEADER..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    PhotonCube::new(t, m, n, bin_ps, counts)
}

/// Writes `bytes` to a temporary file in the destination directory and
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_cube(path: &Path, cube: &PhotonCube) -> Result<()> {
    write_atomic(path, &encode_cube(cube)?)
}

pub fn read_cube(path: &Path) -> Result<PhotonCube> {
    decode_cube(&fs::read(path)?)
}

/// Serialises a depth image as a little-endian greyscale PFM.
pub fn encode_depth(depth: &DepthImage) -> Vec<u8> {
    let (m, n) = (depth.rows(), depth.cols());
    let mut out = format!("Pf\n{n} {m}\n-1.0\n").into_bytes();
    out.reserve(4 * m * n);
    for i in (0..m).rev() {
        for j in 0..n {
            out.extend_from_slice(&(depth.get(i, j) as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a greyscale PFM of either endianness.
pub fn decode_depth(bytes: &[u8]) -> Result<DepthImage> {
    if bytes.len() < 2 || &bytes[..2] != b"Pf" {
        return Err(Error::Format("depth file must start with \"Pf\"".into()));
    }
    // three whitespace-separated tokens follow the magic, then one byte of
    // whitespace before the raster
    let mut tokens = Vec::with_capacity(3);
    let mut pos = 2;
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("incomplete PFM header".into()));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Format("non-ASCII PFM header".into()))?,
        );
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let (n, m) = (parse(tokens[0])?, parse(tokens[1])?);
    let scale: f64 = tokens[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {:?}", tokens[2])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("bad PFM scale {scale}")));
    }
    let cells = m
        .checked_mul(n)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::DimOverflow(format!("{n}x{m} PFM")))?;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != cells {
        return Err(Error::Truncated {
            expected: pos + cells,
            found: bytes.len(),
        });
    }
    let mut z = vec![0.0; m * n];
    for (k, c) in raster.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, j) = (k / n, k % n);
        z[(m - 1 - row_from_bottom) * n + j] = v as f64;
    }
    DepthImage::new(m, n, z)
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    write_atomic(path, &encode_depth(depth))
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    decode_depth(&fs::read(path)?)
}
