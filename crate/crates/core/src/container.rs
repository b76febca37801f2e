//! Binary container shared by checkpoints and attention traces.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HMDSTNSR" | version u32
//! header_len u64 | header bytes (key=value text)
//! n_tensors u32
//! per tensor: name_len u32, name, dtype u8 (0 = f32), ndim u32,
//!             dims u64 × ndim, offset u64 (from payload start)
//! payload_len u64 | payload_crc32 u32 | payload (raw f32 LE)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HMDSTNSR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: KvMap,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(header: KvMap) -> Self {
        Container {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header.to_text();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a tensor container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let header_len = r.u64()? as usize;
        let header_text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header = KvMap::parse(header_text)?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let crc = r.u32()?;
        let payload = r.take(payload_len)?;
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checkpoint("payload checksum mismatch".into()));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            let count: usize = shape.iter().product();
            let end = count
                .checked_mul(4)
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` exceeds the payload")))?;
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Container { header, tensors })
    }

    /// Writes through a temporary sibling file so a failed write leaves no
    /// partial container behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// Rounds to the nearest f32, the precision containers store.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
