//! Binary embedding tables and index files (little-endian throughout).
//!
//! Embedding table: magic `H2SEMB1\0`, u32 dim, u32 count, then per record
//! a u16 id length, the UTF-8 id bytes and `dim` f32 values.
//!
//! Index file: magic `H2SIDX1\0`, u8 kind (0 flat, 1 ivf, 2 pq), u32 format
//! version, then the kind's payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::flat::FlatIndex;
use super::ivf::IvfIndex;
use super::pq::{PqCodebook, PqIndex};
use super::{AnyIndex, IndexError};
use crate::embedder::Embedding;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"H2SEMB1\0";
pub const INDEX_MAGIC: &[u8; 8] = b"H2SIDX1\0";
pub const INDEX_VERSION: u32 = 1;

const KIND_FLAT: u8 = 0;
const KIND_IVF: u8 = 1;
const KIND_PQ: u8 = 2;

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<(), IndexError> {
        let v = u32::try_from(v).map_err(|_| IndexError::InvalidParameter(format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn id(&mut self, id: &str) -> Result<(), IndexError> {
        let n = u16::try_from(id.len())
            .map_err(|_| IndexError::InvalidParameter(format!("id longer than {} bytes", u16::MAX)))?;
        self.0.extend_from_slice(&n.to_le_bytes());
        self.0.extend_from_slice(id.as_bytes());
        Ok(())
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| IndexError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn id(&mut self) -> Result<String, IndexError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| IndexError::Malformed("id is not UTF-8".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IndexError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| IndexError::Malformed("size overflow".into()))?)?;
        let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::Malformed("non-finite value".into()));
        }
        Ok(v)
    }
    fn magic(&mut self, want: &[u8; 8]) -> Result<(), IndexError> {
        if self.buf.len() < 8 || &self.buf[..8] != want {
            return Err(IndexError::BadMagic);
        }
        self.pos = 8;
        Ok(())
    }
    fn finish(&self) -> Result<(), IndexError> {
        if self.pos != self.buf.len() {
            return Err(IndexError::Malformed("trailing bytes".into()));
        }
        Ok(())
    }
}

pub fn write_embeddings<W: Write>(mut w: W, dim: usize, rows: &[Embedding]) -> Result<(), IndexError> {
    let mut out = Out(EMBEDDING_MAGIC.to_vec());
    out.u32(dim)?;
    out.u32(rows.len())?;
    for e in rows {
        if e.vector.len() != dim {
            return Err(IndexError::DimMismatch { expected: dim, got: e.vector.len() });
        }
        out.id(&e.song_id)?;
        out.f32s(&e.vector);
    }
    w.write_all(&out.0)?;
    Ok(())
}

/// Returns the table's dimension and its records in file order.
pub fn read_embeddings<R: Read>(mut r: R) -> Result<(usize, Vec<Embedding>), IndexError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut inp = In { buf: &buf, pos: 0 };
    inp.magic(EMBEDDING_MAGIC)?;
    let dim = inp.u32()?;
    let n = inp.u32()?;
    let mut rows = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let song_id = inp.id()?;
        let vector = inp.f32s(dim)?;
        rows.push(Embedding { vector, song_id });
    }
    inp.finish()?;
    Ok((dim, rows))
}

fn put_flat(out: &mut Out, f: &FlatIndex) -> Result<(), IndexError> {
    out.u32(f.dim())?;
    out.u32(f.len())?;
    for id in f.ids() {
        out.id(id)?;
    }
    out.f32s(f.vectors());
    Ok(())
}

fn get_flat(inp: &mut In<'_>) -> Result<FlatIndex, IndexError> {
    let dim = inp.u32()?;
    let n = inp.u32()?;
    if dim == 0 {
        return Err(IndexError::Malformed("zero dimension".into()));
    }
    let ids = (0..n).map(|_| inp.id()).collect::<Result<Vec<_>, _>>()?;
    let data = inp.f32s(n * dim)?;
    let mut f = FlatIndex::new(dim);
    for (id, v) in ids.into_iter().zip(data.chunks_exact(dim)) {
        f.add(id, v)?;
    }
    Ok(f)
}

pub fn write_index<W: Write>(mut w: W, index: &AnyIndex) -> Result<(), IndexError> {
    let mut out = Out(INDEX_MAGIC.to_vec());
    match index {
        AnyIndex::Flat(f) => {
            out.u8(KIND_FLAT);
            out.u32(INDEX_VERSION as usize)?;
            put_flat(&mut out, f)?;
        }
        AnyIndex::Ivf(i) => {
            out.u8(KIND_IVF);
            out.u32(INDEX_VERSION as usize)?;
            put_flat(&mut out, i.base())?;
            out.u32(i.nlist())?;
            out.u32(i.nprobe())?;
            out.f32s(i.centroids());
            for list in i.lists() {
                out.u32(list.len())?;
                for &id in list {
                    out.u32(id as usize)?;
                }
            }
        }
        AnyIndex::Pq(p) => {
            out.u8(KIND_PQ);
            out.u32(INDEX_VERSION as usize)?;
            let book = p.codebook();
            out.u32(book.dim())?;
            out.u32(p.len())?;
            for id in p.ids() {
                out.id(id)?;
            }
            out.u32(book.m())?;
            out.u32(book.ksub())?;
            out.f32s(book.centroids());
            out.0.extend_from_slice(p.codes());
        }
    }
    w.write_all(&out.0)?;
    Ok(())
}

pub fn read_index<R: Read>(mut r: R) -> Result<AnyIndex, IndexError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut inp = In { buf: &buf, pos: 0 };
    inp.magic(INDEX_MAGIC)?;
    let kind = inp.u8()?;
    let version = inp.u32()? as u32;
    if version != INDEX_VERSION {
        return Err(IndexError::VersionMismatch(version));
    }
    let index = match kind {
        KIND_FLAT => AnyIndex::Flat(get_flat(&mut inp)?),
        KIND_IVF => {
            let base = get_flat(&mut inp)?;
            let nlist = inp.u32()?;
            let nprobe = inp.u32()?;
            let centroids = inp.f32s(nlist.saturating_mul(base.dim()))?;
            let mut lists = Vec::with_capacity(nlist.min(1 << 20));
            for _ in 0..nlist {
                let len = inp.u32()?;
                let list = (0..len).map(|_| inp.u32().map(|v| v as u32)).collect::<Result<Vec<_>, _>>()?;
                lists.push(list);
            }
            AnyIndex::Ivf(IvfIndex::from_parts(base, nprobe, centroids, lists).map_err(malformed)?)
        }
        KIND_PQ => {
            let dim = inp.u32()?;
            let n = inp.u32()?;
            let ids = (0..n).map(|_| inp.id()).collect::<Result<Vec<_>, _>>()?;
            let m = inp.u32()?;
            let ksub = inp.u32()?;
            if m == 0 || dim % m != 0 {
                return Err(IndexError::Malformed(format!("{m} subspaces for dimension {dim}")));
            }
            let centroids = inp.f32s(ksub.saturating_mul(dim))?;
            let book = PqCodebook::from_parts(dim, m, ksub, centroids).map_err(malformed)?;
            let codes = inp.take(n.saturating_mul(m))?.to_vec();
            AnyIndex::Pq(PqIndex::from_parts(book, ids, codes).map_err(malformed)?)
        }
        other => return Err(IndexError::Malformed(format!("unknown index kind {other}"))),
    };
    inp.finish()?;
    Ok(index)
}

fn malformed(e: IndexError) -> IndexError {
    match e {
        IndexError::Malformed(_) => e,
        other => IndexError::Malformed(other.to_string()),
    }
}

pub fn save_index(index: &AnyIndex, path: &Path) -> Result<(), IndexError> {
    let mut buf = Vec::new();
    write_index(&mut buf, index)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<AnyIndex, IndexError> {
    read_index(fs::File::open(path)?)
}
