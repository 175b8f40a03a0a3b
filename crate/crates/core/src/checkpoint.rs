//! Named-tensor checkpoint archive.
//!
//! Binary layout: magic `DMTC`, version u32, entry count u32; per entry a
//! u16 name length, the UTF-8 name, a u8 rank, extents as little-endian u64,
//! then IEEE-754 f32 values row-major. The training step counter rides along
//! as a reserved `meta.step` entry.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use crate::transformer::Model;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("shape mismatch for '{name}': checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint entry '{name}' does not exist in the model")]
    UnknownEntry { name: String },
    #[error("model parameter '{name}' is missing from the checkpoint")]
    MissingEntry { name: String },
}

const MAGIC: &[u8; 4] = b"DMTC";
const VERSION: u32 = 1;
const STEP_ENTRY: &str = "meta.step";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// In-memory checkpoint: parameter tensors plus the training step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Checkpoint {
        let entries = model
            .named_params()
            .into_iter()
            .map(|p| CheckpointEntry {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                values: p.value(),
            })
            .collect();
        Checkpoint { entries, step }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.entries.len() as u32 + 1;
        buf.extend_from_slice(&count.to_le_bytes());
        for entry in &self.entries {
            write_entry(&mut buf, &entry.name, &entry.shape, &entry.values);
        }
        write_entry(&mut buf, STEP_ENTRY, &[1], &[self.step as f32]);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut file = fs::File::open(path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        let mut cursor = Cursor { data: &data, at: 0 };

        if cursor.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        let mut step = 0u64;
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = cursor.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cursor.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cursor.take(numel * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == STEP_ENTRY {
                step = values.first().copied().unwrap_or(0.0) as u64;
            } else {
                entries.push(CheckpointEntry {
                    name,
                    shape,
                    values,
                });
            }
        }
        Ok(Checkpoint { entries, step })
    }

    /// Loads the entries into a model. With `allow_missing`, parameters not
    /// present in the checkpoint keep their fresh initialization (the
    /// document-finetune bootstrap); otherwise they are an error.
    pub fn apply_to(&self, model: &Model, allow_missing: bool) -> Result<(), CheckpointError> {
        let params = model.named_params();
        let by_name: std::collections::HashMap<&str, &crate::tensor::Param> =
            params.iter().map(|p| (p.name(), p)).collect();
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            let param = by_name
                .get(entry.name.as_str())
                .ok_or_else(|| CheckpointError::UnknownEntry {
                    name: entry.name.clone(),
                })?;
            if param.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: entry.name.clone(),
                    found: entry.shape.clone(),
                    expected: param.shape().to_vec(),
                });
            }
            param.set_value(entry.values.clone());
            seen.insert(entry.name.clone());
        }
        if !allow_missing {
            for p in &params {
                if !seen.contains(p.name()) {
                    return Err(CheckpointError::MissingEntry {
                        name: p.name().to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.data.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}
