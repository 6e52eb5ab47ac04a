//! Exact inner-product retrieval over a flat vector table.
//!
//! Row `i` holds the encoding of doc_id `i`; similarity is the inner product
//! scaled by 1/sqrt(h_dim). Search scans every row, so results are exact,
//! and ties prefer the lower doc_id, making selection total and
//! deterministic. The version counter marks which parameter snapshot built
//! the table; training reads candidates from a possibly stale version and
//! re-encodes them fresh.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::Document;
use crate::encoders::{encode_doc_vec, EncoderError, EncoderParams};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt index file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("query has {got} dims, index rows have {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("asked for top {k} of {available} eligible documents")]
    KTooLarge { k: usize, available: usize },
    #[error("row count {rows} does not divide into vectors of {h_dim}")]
    RaggedRows { rows: usize, h_dim: usize },
    #[error(transparent)]
    Encode(#[from] EncoderError),
}

#[derive(Debug, Clone)]
pub struct FlatIndex {
    h_dim: usize,
    vectors: Vec<f64>,
    version: u64,
}

impl FlatIndex {
    pub fn from_rows(h_dim: usize, vectors: Vec<f64>, version: u64) -> Result<Self, IndexError> {
        if h_dim == 0 || vectors.len() % h_dim != 0 {
            return Err(IndexError::RaggedRows {
                rows: vectors.len(),
                h_dim,
            });
        }
        Ok(FlatIndex {
            h_dim,
            vectors,
            version,
        })
    }

    /// Encodes every document in doc_id order with the current parameters.
    pub fn build(
        params: &EncoderParams,
        docs: &[Document],
        version: u64,
    ) -> Result<Self, IndexError> {
        let h_dim = params.cfg.h_dim;
        let mut vectors = Vec::with_capacity(docs.len() * h_dim);
        for (i, doc) in docs.iter().enumerate() {
            debug_assert_eq!(doc.doc_id as usize, i, "docs must be in doc_id order");
            vectors.extend(encode_doc_vec(params, doc)?);
        }
        Ok(FlatIndex {
            h_dim,
            vectors,
            version,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.h_dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn h_dim(&self) -> usize {
        self.h_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn row(&self, doc_id: u32) -> &[f64] {
        let i = doc_id as usize;
        &self.vectors[i * self.h_dim..(i + 1) * self.h_dim]
    }

    /// All rows as one row-major slice, for embedding the index in a larger
    /// checkpoint.
    pub fn rows(&self) -> &[f64] {
        &self.vectors
    }

    /// Inner product scaled by 1/sqrt(h_dim).
    pub fn similarity(&self, query: &[f64], doc_id: u32) -> Result<f64, IndexError> {
        if query.len() != self.h_dim {
            return Err(IndexError::DimMismatch {
                expected: self.h_dim,
                got: query.len(),
            });
        }
        let row = self.row(doc_id);
        let dot: f64 = query.iter().zip(row).map(|(a, b)| a * b).sum();
        Ok(dot / (self.h_dim as f64).sqrt())
    }

    /// The `k` highest-similarity doc_ids, best first. Ties prefer the lower
    /// doc_id. `exclude` removes one document from consideration, which
    /// training uses to keep a query's own source chunk out of its
    /// candidates.
    pub fn top_k(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<u32>,
    ) -> Result<Vec<u32>, IndexError> {
        if query.len() != self.h_dim {
            return Err(IndexError::DimMismatch {
                expected: self.h_dim,
                got: query.len(),
            });
        }
        let n = self.len();
        let available = n - usize::from(exclude.is_some_and(|e| (e as usize) < n));
        if k > available {
            return Err(IndexError::KTooLarge { k, available });
        }
        // Sorted insertion keeps the best k seen so far; scanning ids in
        // ascending order means an equal score never displaces an earlier id.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        for id in 0..n as u32 {
            if exclude == Some(id) {
                continue;
            }
            let s = self.similarity(query, id)?;
            if best.len() == k && best.last().is_some_and(|&(ws, _)| ws >= s) {
                continue;
            }
            let pos = best.partition_point(|&(bs, _)| bs >= s);
            best.insert(pos, (s, id));
            best.truncate(k);
        }
        Ok(best.into_iter().map(|(_, id)| id).collect())
    }

    /// Binary layout: three u64 little-endian header words (row count,
    /// h_dim, version), then the rows as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut bytes = Vec::with_capacity(24 + self.vectors.len() * 8);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.h_dim as u64).to_le_bytes());
        bytes.extend_from_slice(&self.version.to_le_bytes());
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let corrupt = |reason: String| IndexError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 24 {
            return Err(corrupt("shorter than the 24-byte header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        let rows = word(0) as usize;
        let h_dim = word(1) as usize;
        let version = word(2);
        let expected = 24 + rows * h_dim * 8;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "header promises {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let vectors = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FlatIndex {
            h_dim,
            vectors,
            version,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_from(rows: &[&[f64]]) -> FlatIndex {
        let h = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FlatIndex::from_rows(h, flat, 7).unwrap()
    }

    #[test]
    fn similarity_is_scaled_inner_product() {
        let idx = index_from(&[&[1.0, 2.0, 2.0, 0.0]]);
        let s = idx.similarity(&[2.0, 1.0, 0.0, 5.0], 0).unwrap();
        assert_eq!(s, 4.0 / 2.0); // dot 4, sqrt(4) = 2
    }

    #[test]
    fn top_k_orders_by_score_then_lower_id() {
        // Rows 1 and 3 tie; 1 must come first.
        let idx = index_from(&[&[0.0], &[3.0], &[5.0], &[3.0], &[-1.0]]);
        let got = idx.top_k(&[1.0], 3, None).unwrap();
        assert_eq!(got, [2, 1, 3]);
    }

    #[test]
    fn exclusion_removes_exactly_one_candidate() {
        let idx = index_from(&[&[5.0], &[4.0], &[3.0]]);
        assert_eq!(idx.top_k(&[1.0], 2, Some(0)).unwrap(), [1, 2]);
        assert_eq!(idx.top_k(&[1.0], 2, Some(2)).unwrap(), [0, 1]);
    }

    #[test]
    fn k_beyond_eligible_rows_is_an_error() {
        let idx = index_from(&[&[1.0], &[2.0]]);
        assert!(idx.top_k(&[1.0], 2, None).is_ok());
        let err = idx.top_k(&[1.0], 2, Some(1)).unwrap_err();
        assert!(matches!(err, IndexError::KTooLarge { k: 2, available: 1 }), "{err}");
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let idx = index_from(&[&[1.0, 2.0]]);
        let err = idx.top_k(&[1.0], 1, None).unwrap_err();
        assert!(matches!(err, IndexError::DimMismatch { expected: 2, got: 1 }), "{err}");
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let idx = index_from(&[&[0.1, -0.0], &[5e-324, 1e300]]);
        idx.save(&path).unwrap();
        let loaded = FlatIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.h_dim(), 2);
        assert_eq!(loaded.version(), 7);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(loaded.row(0)), bits(idx.row(0)));
        assert_eq!(bits(loaded.row(1)), bits(idx.row(1)));
    }
}
