//! OTTK binary tensor container.
//!
//! Layout, all little-endian:
//!
//! | bytes | content                     |
//! |-------|-----------------------------|
//! | 4     | magic `OTTK`                |
//! | 4     | version, `u32` = 1          |
//! | 1     | dtype, `u8` (1 = f64)       |
//! | 1     | rank, `u8`                  |
//! | 8·r   | shape, one `u64` per axis   |
//! | 8·n   | row-major `f64` payload     |
//!
//! Sparse matrices are stored as three containers (offsets, indices,
//! values); integer arrays are written as exact `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

pub const MAGIC: &[u8; 4] = b"OTTK";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut buf = Vec::with_capacity(10 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let mut head = [0u8; 10];
    bytes
        .read_exact(&mut head)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if head[8] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[8])));
    }
    let rank = head[9] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        bytes
            .read_exact(&mut d)
            .map_err(|_| Error::Format("truncated shape".into()))?;
        let dim = u64::from_le_bytes(d);
        shape.push(usize::try_from(dim).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    if bytes.len() != n * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            bytes.len(),
            shape,
            n * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path.as_ref())?)
}

fn index_tensor(v: &[usize]) -> Tensor {
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("1-d")
}

fn as_indices(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 9.0e15 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("{what}: {x} is not an index")))
            }
        })
        .collect()
}

/// Paths of the three containers for a sparse matrix stored under `stem`.
pub fn sparse_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{stem}.offsets.ottk")),
        dir.join(format!("{stem}.indices.ottk")),
        dir.join(format!("{stem}.values.ottk")),
    ]
}

/// Writes a sparse matrix; the column count is carried by the values
/// container's shape `[nnz]` plus the offsets length, so it is stored as the
/// trailing element of the offsets container.
pub fn write_sparse(dir: &Path, stem: &str, s: &SparseMatrix) -> Result<()> {
    let [po, pi, pv] = sparse_paths(dir, stem);
    let mut offsets: Vec<usize> = s.offsets().to_vec();
    offsets.push(s.n_cols());
    write(po, &index_tensor(&offsets))?;
    write(pi, &index_tensor(s.indices()))?;
    write(pv, &Tensor::new(vec![s.nnz()], s.values().to_vec())?)?;
    Ok(())
}

pub fn read_sparse(dir: &Path, stem: &str) -> Result<SparseMatrix> {
    let [po, pi, pv] = sparse_paths(dir, stem);
    let mut offsets = as_indices(&read(po)?, "offsets")?;
    let n_cols = offsets
        .pop()
        .ok_or_else(|| Error::Format("empty offsets".into()))?;
    if offsets.is_empty() {
        return Err(Error::Format("offsets missing row boundaries".into()));
    }
    let indices = as_indices(&read(pi)?, "indices")?;
    let values = read(pv)?.into_data();
    SparseMatrix::new(offsets.len() - 1, n_cols, offsets, indices, values)
        .map_err(|e| Error::Format(e.to_string()))
}
