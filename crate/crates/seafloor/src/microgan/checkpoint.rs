//! Checkpoints: one flat binary of float32 parameter blobs plus a JSON
//! index carrying names, byte offsets and shapes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const BLOB_NAME: &str = "params.bin";
pub const INDEX_NAME: &str = "params.json";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    /// Byte offset into the blob.
    offset: u64,
    /// Number of float32 values.
    len: usize,
    shape: [usize; 4],
}

pub fn save_checkpoint(dir: impl AsRef<Path>, named: &[(String, Tensor)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = BufWriter::new(fs::File::create(dir.join(BLOB_NAME))?);
    let mut index = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in named {
        index.push(IndexEntry {
            name: name.clone(),
            offset,
            len: t.len(),
            shape: t.shape().0,
        });
        for &v in t.data().iter() {
            blob.write_f32::<LittleEndian>(v as f32)?;
        }
        offset += (t.len() * 4) as u64;
    }
    blob.flush()?;
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Decode(e.to_string()))?;
    fs::write(dir.join(INDEX_NAME), json)?;
    Ok(())
}

/// Restores parameters by name. Every tensor must be present in the
/// checkpoint with a matching shape.
pub fn load_checkpoint(dir: impl AsRef<Path>, named: &[(String, Tensor)]) -> Result<()> {
    let dir = dir.as_ref();
    let index: Vec<IndexEntry> =
        serde_json::from_str(&fs::read_to_string(dir.join(INDEX_NAME))?)
            .map_err(|e| Error::Decode(e.to_string()))?;
    let blob = fs::read(dir.join(BLOB_NAME))?;
    for (name, t) in named {
        let entry = index
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing {name}")))?;
        if entry.shape != t.shape().0 || entry.len != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint entry {name} has shape {:?}, expected {:?}",
                entry.shape,
                t.shape().0
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 4;
        if end > blob.len() {
            return Err(Error::TruncatedFile(format!("checkpoint blob at {name}")));
        }
        let mut cursor = &blob[start..end];
        let mut values = Vec::with_capacity(entry.len);
        for _ in 0..entry.len {
            values.push(cursor.read_f32::<LittleEndian>()? as f64);
        }
        t.set_data(&values);
    }
    Ok(())
}
