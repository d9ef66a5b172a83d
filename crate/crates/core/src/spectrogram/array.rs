//! Binary 2-D float32 array files.
//!
//! Layout (little-endian): magic `H2SARR1\0`, u32 rows, u32 cols, then
//! rows*cols f32 values in row-major order. No padding.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

pub const ARRAY_MAGIC: &[u8; 8] = b"H2SARR1\0";

#[derive(Debug, Error)]
pub enum ArrayError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not an array file")]
    BadMagic,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix contains non-finite values")]
    NonFinite,
}

pub fn write_array<W: Write>(mut w: W, m: ArrayView2<'_, f32>) -> Result<(), ArrayError> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(ArrayError::ShapeMismatch(format!("refusing empty {rows}x{cols} matrix")));
    }
    let (r32, c32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => return Err(ArrayError::ShapeMismatch("dimension exceeds u32".into())),
    };
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ArrayError::NonFinite);
    }
    let mut buf = Vec::with_capacity(16 + rows * cols * 4);
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&r32.to_le_bytes());
    buf.extend_from_slice(&c32.to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_array<R: Read>(mut r: R) -> Result<Array2<f32>, ArrayError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ARRAY_MAGIC {
        return Err(ArrayError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    if rows == 0 || cols == 0 {
        return Err(ArrayError::ShapeMismatch(format!("empty {rows}x{cols} header")));
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| ArrayError::ShapeMismatch("header shape overflows".into()))?;
    let mut data = Vec::new();
    r.take(n as u64 + 1).read_to_end(&mut data)?;
    if data.len() < n {
        return Err(ArrayError::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("expected {n} data bytes, found {}", data.len()),
        )));
    }
    if data.len() > n {
        return Err(ArrayError::ShapeMismatch("trailing bytes after data".into()));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| ArrayError::ShapeMismatch(e.to_string()))
}

pub fn save_array(m: ArrayView2<'_, f32>, path: &Path) -> Result<(), ArrayError> {
    let mut buf = Vec::new();
    write_array(&mut buf, m)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_array(path: &Path) -> Result<Array2<f32>, ArrayError> {
    let bytes = fs::read(path)?;
    read_array(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Array2::from_shape_vec((1, 2), vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_array(&mut buf, m.view()).unwrap();
        assert_eq!(&buf[..8], b"H2SARR1\0");
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn truncation_never_yields_a_matrix() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32);
        let mut buf = Vec::new();
        write_array(&mut buf, m.view()).unwrap();
        for cut in 0..buf.len() {
            let err = read_array(&buf[..cut]).unwrap_err();
            assert!(matches!(err, ArrayError::Io(_) | ArrayError::BadMagic), "{cut}: {err}");
        }
    }

    #[test]
    fn rejects_empty_bad_magic_and_trailing() {
        let empty = Array2::<f32>::zeros((0, 0));
        assert!(matches!(
            write_array(Vec::new(), empty.view()),
            Err(ArrayError::ShapeMismatch(_))
        ));
        let m = Array2::from_elem((2, 2), 1.0f32);
        let mut buf = Vec::new();
        write_array(&mut buf, m.view()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_array(bad.as_slice()), Err(ArrayError::BadMagic)));
        buf.push(0);
        assert!(matches!(read_array(buf.as_slice()), Err(ArrayError::ShapeMismatch(_))));
        let nan = Array2::from_elem((1, 1), f32::NAN);
        assert!(matches!(write_array(Vec::new(), nan.view()), Err(ArrayError::NonFinite)));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mel");
        let m = Array2::from_shape_fn((7, 3), |(i, j)| (i as f32).sin() * j as f32);
        save_array(m.view(), &p).unwrap();
        assert_eq!(load_array(&p).unwrap(), m);
        assert!(matches!(load_array(&dir.path().join("missing")), Err(ArrayError::Io(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            rows in 1usize..20,
            cols in 1usize..20,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut r = crate::rng::stream(seed, &[]);
            let m = Array2::from_shape_fn((rows, cols), |_| {
                f32::from_bits(r.random::<u32>() & 0xbf7f_ffff)
            });
            let mut buf = Vec::new();
            write_array(&mut buf, m.view()).unwrap();
            let back = read_array(buf.as_slice()).unwrap();
            prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.dim(), (rows, cols));
        }
    }
}
