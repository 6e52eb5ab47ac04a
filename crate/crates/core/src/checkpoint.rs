//! Single-file parameter checkpoints.
//!
//! Layout: a text manifest (count line, then one `name dim0 dim1 ...` line
//! per tensor) followed immediately by the little-endian f64 payload in
//! manifest order. Values round-trip bit for bit, which resumable runs rely
//! on.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("tensor name {name:?} is not storable (needs to be non-empty, no whitespace)")]
    BadName { name: String },
    #[error("checkpoint entry {index}: expected {expected}, found {found}")]
    Mismatch {
        index: usize,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn check_name(name: &str) -> Result<(), CheckpointError> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(CheckpointError::BadName {
            name: name.to_string(),
        });
    }
    Ok(())
}

pub fn save_entries<'a, I>(path: &Path, entries: I) -> Result<(), CheckpointError>
where
    I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
{
    let mut header = String::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut count = 0usize;
    for (name, shape, data) in entries {
        check_name(name)?;
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        header.push_str(name);
        for d in shape {
            write!(header, " {d}").unwrap();
        }
        header.push('\n');
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    let mut bytes = format!("{count}\n").into_bytes();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_tensors(path: &Path, named: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    save_entries(
        path,
        named
            .iter()
            .map(|(n, t)| (n.as_str(), t.shape(), t.data())),
    )
}

pub fn load_entries(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };

    let mut offset = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String, CheckpointError> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("unterminated manifest line".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| corrupt("manifest is not utf-8".into()))?
            .to_string();
        offset += end + 1;
        Ok(line)
    };

    let count: usize = next_line(&bytes)?
        .trim()
        .parse()
        .map_err(|e| corrupt(format!("bad count line: {e}")))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes)?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| corrupt("empty manifest line".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| p.parse().map_err(|e| corrupt(format!("bad dim in {name}: {e}"))))
            .collect::<Result<_, _>>()?;
        manifest.push((name, shape));
    }

    let payload = &bytes[offset..];
    let total: usize = manifest
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest promises {}",
            payload.len(),
            total * 8
        )));
    }

    let mut entries = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let data = payload[cursor..cursor + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += n * 8;
        entries.push(Entry { name, shape, data });
    }
    Ok(entries)
}

/// Strict load: entry order, names, and shapes must match `named` exactly.
pub fn load_into(path: &Path, named: &mut [(String, &mut Tensor)]) -> Result<(), CheckpointError> {
    let entries = load_entries(path)?;
    if entries.len() != named.len() {
        return Err(CheckpointError::Mismatch {
            index: 0,
            expected: format!("{} tensors", named.len()),
            found: format!("{} tensors", entries.len()),
        });
    }
    for (i, (entry, (name, tensor))) in entries.iter().zip(named.iter_mut()).enumerate() {
        if &entry.name != name || entry.shape != tensor.shape() {
            return Err(CheckpointError::Mismatch {
                index: i,
                expected: format!("{} {:?}", name, tensor.shape()),
                found: format!("{} {:?}", entry.name, entry.shape),
            });
        }
        tensor.data_mut().copy_from_slice(&entry.data);
    }
    Ok(())
}
