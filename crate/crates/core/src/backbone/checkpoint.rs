//! The `SMG1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SMG1"                 4 bytes
//! metadata length        u32
//! metadata               UTF-8, one `key=value` line per entry
//! repeated until EOF:
//!   name length          u16
//!   name                 UTF-8
//!   rank                 u8
//!   dims                 rank × u32
//!   values               prod(dims) × f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMG1";

/// Checkpoint metadata; keys are sorted so files are reproducible.
pub type Metadata = BTreeMap<String, String>;

pub fn encode_checkpoint(store: &ParamStore<f32>, meta: &Metadata) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::arg(format!("metadata entry `{k}` is not key=value safe")));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    let mut out = Vec::with_capacity(8 + text.len() + store.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::arg(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::arg(format!("tensor `{name}` has too many dims")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::arg("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, Metadata)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not an SMG1 checkpoint"));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_start = r.pos;
    let text = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format((meta_start + e.valid_up_to()) as u64, "metadata is not UTF-8"))?;
    let mut meta = Metadata::new();
    let mut line_start = meta_start;
    for line in text.split_terminator('\n') {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(line_start as u64, format!("metadata line `{line}` lacks `=`")))?;
        meta.insert(k.to_string(), v.to_string());
        line_start += line.len() + 1;
    }

    let mut store = ParamStore::new();
    while !r.at_end() {
        let entry = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(entry + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(entry, "tensor size overflows"))?;
        let raw = r.take(count, "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format(entry, e.to_string()))?;
    }
    Ok((store, meta))
}

pub fn save_checkpoint(store: &ParamStore<f32>, meta: &Metadata, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(store, meta)?;
    let path = path.as_ref();
    // Write-then-rename so readers never observe a half-written file.
    let tmp = path.with_extension("smg1.partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, Metadata)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_magic_plus_metadata() {
        let mut meta = Metadata::new();
        meta.insert("net".into(), "sketch".into());
        let bytes = encode_checkpoint(&ParamStore::new(), &meta).unwrap();
        assert_eq!(&bytes[..4], b"SMG1");
        assert_eq!(&bytes[4..8], &11u32.to_le_bytes());
        assert_eq!(&bytes[8..], b"net=sketch\n");
        let (store, back) = decode_checkpoint(&bytes).unwrap();
        assert!(store.is_empty());
        assert_eq!(back, meta);
    }

    #[test]
    fn two_by_two_tensor_layout() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let bytes = encode_checkpoint(&store, &Metadata::new()).unwrap();
        let mut expected = b"SMG1".to_vec();
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(2);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert_eq!(decode_checkpoint(&bytes).unwrap().0, store);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = encode_checkpoint(&ParamStore::new(), &Metadata::new()).unwrap();
        bytes[0] = b'X';
        match decode_checkpoint(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut store = ParamStore::new();
        store.insert("abc", Tensor::full(&[3], 1.5f32)).unwrap();
        let bytes = encode_checkpoint(&store, &Metadata::new()).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        match decode_checkpoint(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (8 + 2 + 3 + 1 + 4) as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn metadata_with_newline_rejected() {
        let mut meta = Metadata::new();
        meta.insert("k".into(), "a\nb".into());
        assert!(encode_checkpoint(&ParamStore::new(), &meta).is_err());
    }
}
