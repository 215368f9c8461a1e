//! Binary tensor files.
//!
//! Layout: 8-byte magic `BLNS0001`, rows and cols as little-endian `u64`,
//! then `rows * cols` little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{ComponentId, DataError};

pub const MAGIC: &[u8; 8] = b"BLNS0001";
pub const HEADER_LEN: u64 = 24;

/// A D×N block of one component's activations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    component: ComponentId,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(
        component: ComponentId,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if rows == 0 || cols == 0 {
            return Err(DataError::EmptyMatrix);
        }
        if values.len() != rows * cols {
            return Err(DataError::ShapeMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue { index: i });
        }
        Ok(Self {
            component,
            rows,
            cols,
            values,
        })
    }

    pub fn component(&self) -> &ComponentId {
        &self.component
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn hstack(component: ComponentId, parts: &[&ActivationMatrix]) -> Result<Self, DataError> {
        let first = parts.first().ok_or(DataError::EmptyMatrix)?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(DataError::ShapeMismatch {
                expected: rows,
                actual: bad.rows,
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(Self {
            component,
            rows,
            cols,
            values,
        })
    }
}

/// Dimensions stored in a tensor header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub rows: u64,
    pub cols: u64,
}

impl TensorHeader {
    pub fn payload_len(&self) -> Option<u64> {
        self.rows.checked_mul(self.cols)?.checked_mul(8)
    }
}

pub fn encode(matrix: &ActivationMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + matrix.values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(matrix.rows as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols as u64).to_le_bytes());
    for v in &matrix.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_activation(path: &Path, matrix: &ActivationMatrix) -> Result<(), DataError> {
    if let Some(i) = matrix.values.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteValue { index: i });
    }
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(matrix))
        .map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))
}

fn parse_header(bytes: &[u8; HEADER_LEN as usize]) -> Result<TensorHeader, DataError> {
    if &bytes[..8] != MAGIC {
        return Err(DataError::CorruptHeader("bad magic".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(DataError::CorruptHeader(format!(
            "zero dimension {rows}x{cols}"
        )));
    }
    Ok(TensorHeader { rows, cols })
}

fn open_at(path: &Path, offset: u64) -> Result<(File, u64), DataError> {
    let mut f = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::io(path, e)
        }
    })?;
    let len = f.metadata().map_err(|e| DataError::io(path, e))?.len();
    f.seek(SeekFrom::Start(offset))
        .map_err(|e| DataError::io(path, e))?;
    Ok((f, len))
}

/// Reads only the header of the tensor starting at `offset`, checking that
/// the file is long enough to hold the declared payload.
pub fn read_header(path: &Path, offset: u64) -> Result<TensorHeader, DataError> {
    let (mut f, len) = open_at(path, offset)?;
    if len < offset.saturating_add(HEADER_LEN) {
        return Err(DataError::CorruptHeader(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let mut hdr = [0u8; HEADER_LEN as usize];
    f.read_exact(&mut hdr).map_err(|e| DataError::io(path, e))?;
    let header = parse_header(&hdr)?;
    let need = header
        .payload_len()
        .and_then(|p| p.checked_add(offset + HEADER_LEN))
        .ok_or_else(|| DataError::CorruptHeader("dimension overflow".into()))?;
    if len < need {
        return Err(DataError::CorruptHeader(format!(
            "{}: truncated payload ({len} bytes, need {need})",
            path.display()
        )));
    }
    Ok(header)
}

/// Reads a full tensor starting at `offset` and tags it with `component`.
pub fn read_tensor(
    path: &Path,
    offset: u64,
    component: ComponentId,
) -> Result<ActivationMatrix, DataError> {
    let header = read_header(path, offset)?;
    let (mut f, _) = open_at(path, offset + HEADER_LEN)?;
    let n = (header.rows * header.cols) as usize;
    let mut buf = vec![0u8; n * 8];
    f.read_exact(&mut buf).map_err(|e| DataError::io(path, e))?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ActivationMatrix::new(
        component,
        header.rows as usize,
        header.cols as usize,
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Role;

    fn cid() -> ComponentId {
        ComponentId::new("B0", Role::Hsgal1)
    }

    #[test]
    fn one_by_one_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let m = ActivationMatrix::new(cid(), 1, 1, vec![7.0]).unwrap();
        write_activation(&p, &m).unwrap();
        let back = read_tensor(&p, 0, cid()).unwrap();
        assert_eq!(back.values(), &[7.0]);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 32);
    }

    #[test]
    fn three_by_five_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f64> = (0..15).map(|i| i as f64 * 0.25 - 1.0).collect();
        let m = ActivationMatrix::new(cid(), 3, 5, vals).unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        write_activation(&a, &m).unwrap();
        write_activation(&b, &m).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_tensor(&a, 0, cid()).unwrap(), m);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            ActivationMatrix::new(cid(), 1, 2, vec![1.0, f64::NAN]),
            Err(DataError::NonFiniteValue { index: 1 })
        ));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let m = ActivationMatrix::new(cid(), 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode(&m);
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_tensor(&p, 0, cid()),
            Err(DataError::CorruptHeader(_))
        ));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let m = ActivationMatrix::new(cid(), 1, 1, vec![1.0]).unwrap();
        let mut bytes = encode(&m);
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_header(&p, 0),
            Err(DataError::CorruptHeader(_))
        ));
    }

    #[test]
    fn non_finite_payload_on_disk_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&f64::INFINITY.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_tensor(&p, 0, cid()),
            Err(DataError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn hstack_concatenates_columns() {
        let a = ActivationMatrix::new(cid(), 2, 1, vec![1.0, 2.0]).unwrap();
        let b = ActivationMatrix::new(cid(), 2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = ActivationMatrix::hstack(cid(), &[&a, &b]).unwrap();
        assert_eq!(s.values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
