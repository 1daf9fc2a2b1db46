//! Model checkpoint file.
//!
//! Byte layout, all little-endian:
//!
//! | offset      | type  | content                                |
//! |-------------|-------|----------------------------------------|
//! | 0           | u64   | input width `d_in`                     |
//! | 8           | u64   | hidden width                           |
//! | 16          | u64   | embedding width `d`                    |
//! | 24          | u64   | class count `C`                        |
//! | 32 + 8·k    | f64   | parameter `k` of the flat vector       |
//!
//! The flat vector is `w1, b1, w2, b2, w3, b3` with weight matrices
//! row-major (one row per output unit), so the file is exactly
//! `32 + 8·(hidden·(d_in+1) + d·(hidden+1) + C·(d+1))` bytes long. Nothing
//! follows the last parameter.

use std::path::Path;

use genreplay_core::{MlpClassifier, MlpDims};

use crate::HarnessError;

const HEADER: usize = 32;

pub fn encode(model: &MlpClassifier) -> Vec<u8> {
    let d = model.dims();
    let mut out = Vec::with_capacity(HEADER + 8 * model.param_count());
    for v in [d.input, d.hidden, d.embed, d.classes] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MlpClassifier, HarnessError> {
    let bad = |reason: String| HarnessError::Checkpoint(reason);
    if bytes.len() < HEADER {
        return Err(bad(format!("{} bytes is shorter than the 32-byte header", bytes.len())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let mut widths = [0usize; 4];
    for (i, w) in widths.iter_mut().enumerate() {
        *w = usize::try_from(word(i))
            .ok()
            .filter(|v| (1..=1 << 24).contains(v))
            .ok_or_else(|| bad(format!("header field {i} holds implausible width {}", word(i))))?;
    }
    let dims = MlpDims::new(widths[0], widths[1], widths[2], widths[3]);
    let expected = HEADER + 8 * dims.param_count();
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {dims:?}, found {}", bytes.len())));
    }
    let params = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MlpClassifier::from_flat(dims, params)?)
}

pub fn save(path: &Path, model: &MlpClassifier) -> Result<(), HarnessError> {
    std::fs::write(path, encode(model)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<MlpClassifier, HarnessError> {
    decode(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)
}
