//! Parameter checkpoints.
//!
//! Layout (little-endian): magic `H2SPAR1\0`, u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f64 data.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use super::params::{BlockParams, EmbedderParams, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"H2SPAR1\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a checkpoint")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &EmbedderParams) -> Result<(), CheckpointError> {
    let named = params.named();
    let mut buf = Vec::with_capacity(16 + params.n_params() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t, _) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

const MAX_RANK: u32 = 8;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EmbedderParams, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 1024 {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed("shape overflows".into()))?;
        let mut raw = Vec::new();
        (&mut r).take(n as u64 * 8).read_to_end(&mut raw)?;
        if raw.len() != n * 8 {
            return Err(CheckpointError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("tensor {name} truncated"),
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    assemble(tensors)
}

fn assemble(mut t: BTreeMap<String, Tensor>) -> Result<EmbedderParams, CheckpointError> {
    let mut take = |name: &str| {
        t.remove(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))
    };
    let proj_w = take("proj.weight")?;
    let proj_b = take("proj.bias")?;
    let class_w = take("head.weight")?;
    let mut blocks = Vec::new();
    loop {
        let i = blocks.len();
        let Ok(conv_w) = take(&format!("block{i}.conv.weight")) else {
            break;
        };
        let conv_b = take(&format!("block{i}.conv.bias"))?;
        let shortcut = take(&format!("block{i}.shortcut.weight")).ok();
        blocks.push(BlockParams { conv_w, conv_b, shortcut });
    }
    if let Some(name) = t.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {name}")));
    }
    Ok(EmbedderParams {
        blocks,
        proj_w,
        proj_b,
        class_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{BlockSpec, EmbedderConfig, HeadPooling};

    fn params() -> EmbedderParams {
        let cfg = EmbedderConfig {
            input_frames: 16,
            n_mels: 16,
            blocks: vec![
                BlockSpec { channels: 2, residual: true },
                BlockSpec { channels: 2, residual: false },
            ],
            embed_dim: 4,
            pooling: HeadPooling::Time,
            rng_seed: 1,
        };
        EmbedderParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let p = params();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert_eq!(&buf[..8], b"H2SPAR1\0");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 8);
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params()).unwrap();
        let mut bad = buf.clone();
        bad[3] = b'Z';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 3]),
            Err(CheckpointError::Io(_))
        ));
        let mut extra = buf.clone();
        extra.push(1);
        assert!(matches!(read_checkpoint(extra.as_slice()), Err(CheckpointError::Malformed(_))));
    }
}
