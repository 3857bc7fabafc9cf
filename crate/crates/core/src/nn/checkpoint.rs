//! Versioned binary model checkpoints.
//!
//! Layout, all integers `u32` little-endian: magic `"PRSM"`, version, the
//! five architecture fields (bins, window length, encoder stages, base
//! channels, PRS blocks), parameter count, then per parameter its name
//! length, UTF-8 name, rank, dimensions and `f64` little-endian values.

use std::fs;
use std::path::Path;

use super::model::{PrsNet, PrsNetConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::windowing::WindowConfig;

pub const MODEL_MAGIC: [u8; 4] = *b"PRSM";
pub const MODEL_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimOverflow(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_model(net: &PrsNet) -> Result<Vec<u8>> {
    let c = &net.config;
    let mut out = MODEL_MAGIC.to_vec();
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [
        c.bins,
        c.window.length(),
        c.encoder_stages,
        c.base_channels,
        c.num_prs_blocks,
        net.store.len(),
    ] {
        put(&mut out, v)?;
    }
    for p in net.store.params() {
        put(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put(&mut out, p.shape.len())?;
        for &d in &p.shape {
            put(&mut out, d)?;
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<PrsNet> {
    if bytes.len() < 4 || bytes[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()? as u32;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config = PrsNetConfig {
        bins: r.u32()?,
        window: WindowConfig::new(r.u32()?)?,
        encoder_stages: r.u32()?,
        base_channels: r.u32()?,
        num_prs_blocks: r.u32()?,
    };
    let mut net = PrsNet::new(config, 0)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::DimOverflow(format!("{name} {shape:?}")))?;
        let raw = r.take(n * 8)?;
        let value: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(v) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} contains {v}")));
        }
        store.add(name, shape, value, true);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    net.store.load_from(&store)?;
    Ok(net)
}

pub fn save_model(path: &Path, net: &PrsNet) -> Result<()> {
    write_atomic(path, &encode_model(net)?)
}

pub fn load_model(path: &Path) -> Result<PrsNet> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> PrsNet {
        let cfg = PrsNetConfig {
            bins: 16,
            window: WindowConfig::new(3).unwrap(),
            encoder_stages: 1,
            base_channels: 2,
            num_prs_blocks: 1,
        };
        PrsNet::new(cfg, 42).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut a = net();
        // running statistics are part of the checkpoint
        let id = a.store.find("prs0.norm.running_var").unwrap();
        a.store.get_mut(id)[0] = 3.25;
        let bytes = encode_model(&a).unwrap();
        assert_eq!(&bytes[..4], b"PRSM");
        let b = decode_model(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(encode_model(&b).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode_model(&net()).unwrap();
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            decode_model(&ver),
            Err(Error::UnsupportedVersion(9))
        ));
        // architecture field no longer matches the stored parameters
        let mut arch = bytes;
        arch[20] = 3;
        assert!(decode_model(&arch).is_err());
    }
}
