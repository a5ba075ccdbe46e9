//! Checkpoint I/O: a text manifest followed by a little-endian f64 blob.
//!
//! Layout:
//! ```text
//! templar-checkpoint v1
//! params <count>
//! checksum <fnv1a64 of blob, hex>
//! <name> <rows> <cols> <byte offset>   (one line per parameter)
//! blob
//! <raw little-endian f64 data>
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
}

fn mismatch(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::ManifestMismatch(msg.into())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Write named parameters in order. The order is part of the format.
pub fn save(path: &Path, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut blob = Vec::new();
    let mut manifest = String::new();
    manifest.push_str("templar-checkpoint v1\n");
    manifest.push_str(&format!("params {}\n", params.len()));
    let mut entries = String::new();
    for (name, t) in params {
        entries.push_str(&format!(
            "{} {} {} {}\n",
            name,
            t.rows(),
            t.cols(),
            blob.len()
        ));
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str(&format!("checksum {:016x}\n", fnv1a(&blob)));
    manifest.push_str(&entries);
    manifest.push_str("blob\n");

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(manifest.as_bytes())?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

/// Read back name/tensor pairs in manifest order, verifying the checksum.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    // manifest is everything up to the "blob" marker line
    let marker = b"\nblob\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| mismatch("missing blob marker"))?;
    let manifest = std::str::from_utf8(&bytes[..pos + 1])
        .map_err(|_| mismatch("manifest is not valid utf-8"))?;
    let blob = &bytes[pos + marker.len()..];

    let mut lines = manifest.lines();
    if lines.next() != Some("templar-checkpoint v1") {
        return Err(mismatch("bad header"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| mismatch("bad params line"))?;
    let checksum = lines
        .next()
        .and_then(|l| l.strip_prefix("checksum "))
        .and_then(|v| u64::from_str_radix(v, 16).ok())
        .ok_or_else(|| mismatch("bad checksum line"))?;
    if fnv1a(blob) != checksum {
        return Err(mismatch("blob checksum does not match manifest"));
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| mismatch("truncated manifest"))?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| mismatch("empty manifest line"))?
            .to_string();
        let nums: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
        let [rows, cols, offset] = nums[..] else {
            return Err(mismatch(format!("bad manifest line for {name}")));
        };
        let len = rows * cols * 8;
        let slice = blob
            .get(offset..offset + len)
            .ok_or_else(|| mismatch(format!("blob too short for {name}")))?;
        let data: Vec<f64> = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = vec![
            (
                "a.weight".to_string(),
                Tensor::from_vec(2, 3, vec![1.5, -2.25, 1e-300, f64::MIN_POSITIVE, 0.1 + 0.2, 7.0]),
            ),
            ("b.bias".to_string(), Tensor::from_vec(1, 1, vec![-0.0])),
        ];
        save(&path, &params).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((n1, t1), (n2, t2)) in params.iter().zip(&loaded) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = vec![("w".to_string(), Tensor::from_vec(1, 2, vec![1.0, 2.0]))];
        save(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("checkpoint manifest mismatch"));
    }
}
