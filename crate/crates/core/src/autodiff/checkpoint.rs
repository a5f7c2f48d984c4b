//! Weight checkpoint container.
//!
//! Layout (all little-endian): 8-byte magic, u32 version, u32 entry count,
//! then per entry: u32 name length + UTF-8 name, u32 rank, u32 dims,
//! f32 values in row-major order. Identical bytes imply an identical model,
//! including normalization running statistics.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QSRWGTS\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl CheckpointEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "checkpoint entry: shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        Ok(CheckpointEntry {
            name: name.into(),
            shape,
            values,
        })
    }
}

pub fn checkpoint_to_bytes(entries: &[CheckpointEntry]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
    for e in entries {
        buf.write_u32::<LittleEndian>(e.name.len() as u32).unwrap();
        buf.extend_from_slice(e.name.as_bytes());
        buf.write_u32::<LittleEndian>(e.shape.len() as u32).unwrap();
        for &d in &e.shape {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in &e.values {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    buf
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad checkpoint magic {:?}",
            &magic
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated at version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated at entry count".into()))?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("checkpoint truncated at name length".into()))?
            as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("checkpoint truncated at name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("checkpoint truncated at rank".into()))?
            as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                r.read_u32::<LittleEndian>()
                    .map_err(|_| Error::Format("checkpoint truncated at dims".into()))?
                    as usize,
            );
        }
        let numel: usize = shape.iter().product();
        let mut values = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut values)
            .map_err(|_| Error::Format("checkpoint truncated at values".into()))?;
        entries.push(CheckpointEntry { name, shape, values });
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let bytes = checkpoint_to_bytes(entries);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_entries_and_bytes() {
        let entries = vec![
            CheckpointEntry::new("enc.w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 7.5, -0.125])
                .unwrap(),
            CheckpointEntry::new("enc.b", vec![3], vec![0.5, 1.5, 2.5]).unwrap(),
        ];
        let bytes = checkpoint_to_bytes(&entries);
        let back = read_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(entries, back);
        assert_eq!(bytes, checkpoint_to_bytes(&back));
    }

    #[test]
    fn bad_magic_is_a_checkpoint_error() {
        let mut bytes = checkpoint_to_bytes(&[]);
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
