//! `TENSRCKP` checkpoint files: u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, a u8 rank, rank × u32 dims and the f32 payload.
//! All integers little-endian.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TENSRCKP";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn encode_checkpoint(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("checkpoint name too long: {}", e.name)))?;
        let rank = u8::try_from(e.tensor.rank())
            .map_err(|_| Error::Contract(format!("rank too large for {}", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in e.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing TENSRCKP magic"));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(CheckpointEntry {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let bytes = encode_checkpoint(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

impl ParamStore<f32> {
    /// Entries named `prefix + name`, in store order.
    pub fn to_entries(&self, prefix: &str) -> Vec<CheckpointEntry> {
        self.iter()
            .map(|(name, t)| CheckpointEntry {
                name: format!("{prefix}{name}"),
                tensor: t.clone(),
            })
            .collect()
    }

    /// Overwrites every parameter from the entry named `prefix + name`.
    pub fn load_entries(&mut self, prefix: &str, entries: &[CheckpointEntry]) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}{}", self.name(id));
            let entry = entries
                .iter()
                .find(|e| e.name == key)
                .ok_or_else(|| Error::Contract(format!("checkpoint has no entry {key}")))?;
            if entry.tensor.shape() != self.get(id).shape() {
                return Err(Error::shape("load_checkpoint", self.get(id).shape(), entry.tensor.shape()));
            }
            *self.get_mut(id) = entry.tensor.clone();
        }
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub at: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8).ok() != Some(&magic[..]) {
            return Err(Error::format(
                self.path,
                format!("missing {} magic", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.at),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let entries = vec![CheckpointEntry {
            name: "w".into(),
            tensor: Tensor::new(&[2], vec![1.0, -2.5]).unwrap(),
        }];
        let bytes = encode_checkpoint(&entries).unwrap();
        let mut expected = b"TENSRCKP".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, b'w', 1, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_checkpoint(&bytes, Path::new("x")).unwrap(), entries);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let entries = vec![CheckpointEntry {
            name: "w".into(),
            tensor: Tensor::zeros(&[3, 2]),
        }];
        let bytes = encode_checkpoint(&entries).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
