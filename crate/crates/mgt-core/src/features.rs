//! Dense per-node float matrices and their on-disk format.
//!
//! Features ("MGTF"), positional encodings ("MGTP"), and exported embeddings
//! ("MGTE") share one binary layout: magic (4 bytes), version u32 = 1,
//! row count u64, column count u32, then rows * cols little-endian f32
//! values in row-major order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;

pub const MAGIC_FEATURES: [u8; 4] = *b"MGTF";
pub const MAGIC_POSENC: [u8; 4] = *b"MGTP";
pub const MAGIC_EMBEDDING: [u8; 4] = *b"MGTE";
pub const FORMAT_VERSION: u32 = 1;

/// Row-major `n x dim` matrix of f32 values, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature buffer has {} values, want {}x{}={}",
                data.len(),
                n,
                dim,
                n * dim
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature value at row {} col {}",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        Ok(FeatureMatrix { n, dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        FeatureMatrix {
            n,
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Error unless the row count matches the graph's node count.
    pub fn check_matches(&self, graph: &Graph) -> Result<()> {
        if self.n != graph.node_count() {
            return Err(Error::ShapeMismatch(format!(
                "matrix has {} rows but graph has {} nodes",
                self.n,
                graph.node_count()
            )));
        }
        Ok(())
    }
}

pub fn write_matrix(path: &Path, magic: [u8; 4], m: &FeatureMatrix) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&magic).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(m.n as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.dim as u32).to_le_bytes()).map_err(io)?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_matrix(path: &Path, magic: [u8; 4]) -> Result<FeatureMatrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |msg: &str| Error::Corrupt {
        path: path.into(),
        msg: msg.into(),
    };

    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(|_| corrupt("missing magic"))?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)
        .map_err(|_| corrupt("missing version"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            version,
        });
    }
    r.read_exact(&mut u64buf)
        .map_err(|_| corrupt("missing row count"))?;
    let n = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|_| corrupt("missing column count"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != n * dim * 4 {
        return Err(corrupt(&format!(
            "payload is {} bytes, want {}",
            payload.len(),
            n * dim * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    // NaN/Inf in a file is an input defect, not a runtime one
    FeatureMatrix::new(n, dim, data).map_err(|e| Error::Corrupt {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Load a feature matrix ("MGTF") and validate it against the graph.
pub fn load_features(path: &Path, graph: Option<&Graph>) -> Result<FeatureMatrix> {
    let m = read_matrix(path, MAGIC_FEATURES)?;
    if let Some(g) = graph {
        m.check_matches(g)?;
    }
    Ok(m)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write_matrix(path, MAGIC_FEATURES, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_and_finiteness() {
        assert!(FeatureMatrix::new(2, 3, vec![0.0; 6]).is_ok());
        assert!(FeatureMatrix::new(2, 3, vec![0.0; 5]).is_err());
        let mut bad = vec![0.0f32; 6];
        bad[4] = f32::NAN;
        let err = FeatureMatrix::new(2, 3, bad).unwrap_err();
        assert!(err.to_string().contains("row 1 col 1"), "got {err}");
    }

    #[test]
    fn header_then_payload() {
        let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_features(f.path(), &m).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        assert_eq!(&bytes[0..4], b"MGTF");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 6 * 4);
        let back = load_features(f.path(), None).unwrap();
        assert_eq!(back.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn bit_exact_round_trip() {
        // Values with awkward bit patterns survive the round trip untouched.
        let vals: Vec<f32> = (0..12)
            .map(|i| f32::from_bits(0x3f80_0001u32.wrapping_add(i * 0x0101_0101)))
            .map(|v| if v.is_finite() { v } else { 1.5 })
            .collect();
        let m = FeatureMatrix::new(4, 3, vals.clone()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_features(f.path(), &m).unwrap();
        let back = load_features(f.path(), None).unwrap();
        for (a, b) in back.data().iter().zip(vals.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn magic_mismatch_rejected() {
        let m = FeatureMatrix::zeros(1, 1);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_matrix(f.path(), MAGIC_POSENC, &m).unwrap();
        assert!(matches!(
            load_features(f.path(), None),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn graph_size_mismatch_rejected() {
        let g = Graph::from_edges(3, &[(0, 1)], true).unwrap();
        let m = FeatureMatrix::zeros(2, 4);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_features(f.path(), &m).unwrap();
        assert!(load_features(f.path(), Some(&g)).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let m = FeatureMatrix::zeros(2, 2);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_features(f.path(), &m).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        std::fs::write(f.path(), &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_features(f.path(), None),
            Err(Error::Corrupt { .. })
        ));
    }
}
