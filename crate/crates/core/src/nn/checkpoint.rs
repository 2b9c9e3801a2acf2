//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "TPNNCKPT"
//! version u32
//! header  u64 length + UTF-8 JSON {input, layers, bn_momentum, metadata}
//! layers  u32 count, then per layer: u32 blob count, then per blob
//!         u64 element count + f64 values (parameters, then running stats)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model, NnError, Shape};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus free-form training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input: Shape,
    layers: Vec<LayerSpec>,
    bn_momentum: f64,
    metadata: serde_json::Value,
}

pub fn save_checkpoint(model: &Model, metadata: &serde_json::Value, path: &Path) -> Result<(), NnError> {
    let io = |source| NnError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header = Header {
        input: model.input_shape(),
        layers: model.specs(),
        bn_momentum: model.bn_momentum(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        let blobs: Vec<&Vec<f64>> = layer
            .params
            .iter()
            .map(|p| &p.value)
            .chain(layer.running.iter())
            .collect();
        buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for blob in blobs {
            buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            for v in blob {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(&buf).map_err(io)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let bad = |reason: &str| NnError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing magic bytes"));
    }
    let version = c.u32().ok_or_else(|| bad("truncated version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = c.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let hbytes = c.take(hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(&format!("header: {e}")))?;
    let mut model = Model::new(header.input, &header.layers, 0).map_err(|e| bad(&e.to_string()))?;
    model.set_bn_momentum(header.bn_momentum);
    let n_layers = c.u32().ok_or_else(|| bad("truncated layer table"))? as usize;
    if n_layers != header.layers.len() {
        return Err(bad("layer table does not match header"));
    }
    let mut state = Vec::new();
    for _ in 0..n_layers {
        let blobs = c.u32().ok_or_else(|| bad("truncated layer table"))?;
        for _ in 0..blobs {
            let len = c.u64().ok_or_else(|| bad("truncated blob"))? as usize;
            let bytes = c
                .take(len.checked_mul(8).ok_or_else(|| bad("blob too large"))?)
                .ok_or_else(|| bad("truncated blob"))?;
            state.push(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
    }
    if c.pos != data.len() {
        return Err(bad("trailing bytes"));
    }
    model.set_state(&state).map_err(|_| bad("parameter blobs do not match layers"))?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}
