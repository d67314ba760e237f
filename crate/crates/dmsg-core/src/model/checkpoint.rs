//! Textual parameter checkpoints.
//!
//! Layout (UTF-8, line-oriented):
//!
//! ```text
//! dmsg-checkpoint v1
//! <key> <rows> <cols>
//! <row of `cols` space-separated f64 values>   (x rows)
//! ...repeated per matrix, keys in sorted order
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! save/load reproduces every matrix bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::ModelError;
use crate::numerics::Tensor;

/// Version tag written in the header line.
pub const CHECKPOINT_VERSION: &str = "v1";

/// Serializes named matrices to `path`. Keys are written in sorted order so
/// identical states produce identical files.
pub fn save_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
    let mut out = format!("dmsg-checkpoint {CHECKPOINT_VERSION}\n");
    for (key, tensor) in entries {
        if key.contains(char::is_whitespace) || key.is_empty() {
            return Err(ModelError::Invalid(format!(
                "checkpoint key {key:?} must be non-empty and whitespace-free"
            )));
        }
        writeln!(out, "{key} {} {}", tensor.rows(), tensor.cols()).unwrap();
        for r in 0..tensor.rows() {
            let mut first = true;
            for v in tensor.row(r) {
                if !first {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
                first = false;
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses checkpoint text into named matrices.
pub fn parse_checkpoint(text: &str) -> Result<BTreeMap<String, Tensor>, ModelError> {
    let err = |msg: String| ModelError::Checkpoint {
        path: "<text>".into(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("dmsg-checkpoint") {
        return Err(err("missing `dmsg-checkpoint` header".into()));
    }
    match parts.next() {
        Some(CHECKPOINT_VERSION) => {}
        Some(other) => return Err(err(format!("unsupported version {other:?}"))),
        None => return Err(err("header has no version".into())),
    }

    let mut entries = BTreeMap::new();
    while let Some(meta) = lines.next() {
        if meta.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = meta.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("bad matrix header {meta:?}")));
        }
        let key = fields[0].to_string();
        let rows: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("bad row count in {meta:?}")))?;
        let cols: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad column count in {meta:?}")))?;
        if rows
            .checked_mul(cols)
            .map(|total| total > 100_000_000)
            .unwrap_or(true)
        {
            return Err(err(format!("matrix {key} implausibly large")));
        }
        // Capacity is clamped so a forged header can't force a huge
        // allocation before any row data has been seen.
        let mut data = Vec::with_capacity((rows * cols).min(1 << 16));
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| err(format!("{key}: missing row {r}")))?;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != cols {
                return Err(err(format!(
                    "{key}: row {r} has {} values, expected {cols}",
                    values.len()
                )));
            }
            for v in values {
                let x: f64 = v
                    .parse()
                    .map_err(|_| err(format!("{key}: non-numeric value {v:?}")))?;
                if !x.is_finite() {
                    return Err(err(format!("{key}: non-finite value {v:?}")));
                }
                data.push(x);
            }
        }
        let tensor = Tensor::from_vec(rows, cols, data)
            .map_err(|e| err(format!("{key}: {e}")))?;
        if entries.insert(key.clone(), tensor).is_some() {
            return Err(err(format!("duplicate key {key}")));
        }
    }
    Ok(entries)
}

/// Reads and parses a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_checkpoint(&text).map_err(|e| match e {
        ModelError::Checkpoint { msg, .. } => ModelError::Checkpoint {
            path: path.display().to_string(),
            msg,
        },
        other => other,
    })
}
