//! `.dgt` checkpoints: `"DGTN"`, u32 version, u32 tensor count, then per tensor
//! u16 name length + UTF-8 name, u8 rank, u64 dims, f64 payload (all little-endian),
//! then a u32-length-prefixed config text block.

use std::path::Path;

use super::config::ModelConfig;
use super::params::init_params;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub const MAGIC: &[u8; 4] = b"DGTN";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = cfg.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Decodes a checkpoint; the tensor set must match the layout its own config implies.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.text(n)?.to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [c] => (1, c),
            [rw, c] => (rw, c),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}"))),
        };
        let len = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    let n = r.u32()? as usize;
    let cfg = ModelConfig::from_text(r.text(n)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut params = init_params(&cfg)?;
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!("{} tensors, configuration implies {}", tensors.len(), params.len())));
    }
    for (name, m) in tensors {
        let slot = params.get_mut(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if slot.shape() != m.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", m.shape(), slot.shape())));
        }
        *slot = m;
    }
    Ok((params, cfg))
}

pub fn save(path: &Path, params: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, encode(params, cfg)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, ModelConfig)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { d: 8, d_ffn: 16, seed: 3, ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let mut p = init_params(&cfg).unwrap();
        p.get_mut("head.b3").unwrap()[(0, 0)] = -1.0 / 3.0;
        let (q, c) = decode(&encode(&p, &cfg).unwrap()).unwrap();
        assert_eq!(c, cfg);
        for ((n1, a), (n2, b)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.kind, b.kind);
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{n1}");
        }
    }

    #[test]
    fn header_layout() {
        let cfg = small();
        let p = init_params(&cfg).unwrap();
        let bytes = encode(&p, &cfg).unwrap();
        assert_eq!(&bytes[..4], b"DGTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, p.len());
        // first tensor in name order
        let (name, first) = p.iter().next().unwrap();
        let n = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + n], name.as_bytes());
        assert_eq!(bytes[14 + n], 2);
        let rows = u64::from_le_bytes(bytes[15 + n..23 + n].try_into().unwrap());
        assert_eq!(rows as usize, first.value.rows());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = small();
        let bytes = encode(&init_params(&cfg).unwrap(), &cfg).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_)) | Err(Error::Parse { .. })));
        assert!(decode(&bytes[..40]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn tensor_set_must_match_config() {
        let cfg = small();
        let p = init_params(&cfg).unwrap();
        let other = ModelConfig { gnn_layers: 1, ..cfg };
        assert!(matches!(decode(&encode(&p, &other).unwrap()), Err(Error::Checkpoint(_))));
    }
}
