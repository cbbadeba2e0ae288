//! Single-file parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! header, then the payload. The header maps each parameter name to
//! `{"dtype": "F32", "shape": [rows, cols], "data_offsets": [start, end]}`
//! (byte offsets into the payload) and may carry string pairs under
//! `"__metadata__"`. Tensors are row-major little-endian `f32`, stored in
//! parameter order without gaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: [usize; 2],
    data_offsets: [usize; 2],
}

pub fn write_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &ModelParams<T>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.into(), serde_json::to_value(metadata).expect("string map"));
    }
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    for (name, value) in params.iter() {
        let start = payload.len();
        for &x in value.iter() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        let entry = Entry {
            dtype: "F32".into(),
            shape: [value.nrows(), value.ncols()],
            data_offsets: [start, payload.len()],
        };
        header.insert(name.into(), serde_json::to_value(entry).expect("entry serializes"));
    }
    // serde_json::Map without `preserve_order` sorts keys; offsets keep the
    // parameter order recoverable.
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::data(path, None, m);
    if bytes.len() < 8 {
        return Err(bad("truncated checkpoint header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {n} exceeds file size")))?;
    let mut header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| bad(format!("invalid header: {e}")))?;
    let metadata = match header.remove(METADATA_KEY) {
        Some(m) => serde_json::from_value(m).map_err(|e| bad(format!("invalid metadata: {e}")))?,
        None => BTreeMap::new(),
    };
    let payload = &bytes[header_end..];
    let mut entries = Vec::with_capacity(header.len());
    for (name, value) in header {
        let e: Entry = serde_json::from_value(value).map_err(|err| bad(format!("entry `{name}`: {err}")))?;
        if e.dtype != "F32" {
            return Err(bad(format!("entry `{name}` has unsupported dtype {}", e.dtype)));
        }
        let [start, end] = e.data_offsets;
        let [r, c] = e.shape;
        if start > end || end > payload.len() || end - start != r * c * 4 {
            return Err(bad(format!("entry `{name}` has inconsistent offsets")));
        }
        entries.push((name, e));
    }
    entries.sort_by_key(|(_, e)| e.data_offsets);
    let mut cursor = 0;
    let mut values = IndexMap::with_capacity(entries.len());
    for (name, e) in entries {
        let [start, end] = e.data_offsets;
        if start != cursor {
            return Err(bad(format!("entry `{name}` leaves a gap or overlaps in the payload")));
        }
        cursor = end;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values.insert(
            name,
            Array2::from_shape_vec((e.shape[0], e.shape[1]), data).expect("size checked"),
        );
    }
    if cursor != payload.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint {
        params: ModelParams::from_map(values),
        metadata,
    })
}
