//! Single-file binary archive of named tensors plus a JSON metadata block.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the
//! JSON header, then raw little-endian tensor data in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FASARCH\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub meta: serde_json::Value,
    entries: Vec<(String, &'static str, Vec<usize>, Vec<f64>)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new() }
    }

    pub fn insert<T: Float>(&mut self, name: &str, t: &Tensor<T>) {
        let data = t.data().iter().map(|v| v.to_f64()).collect();
        self.entries.retain(|e| e.0 != name);
        self.entries.push((name.to_string(), T::DTYPE, t.shape().to_vec(), data));
    }

    pub fn get<T: Float>(&self, name: &str) -> Option<Tensor<T>> {
        self.entries
            .iter()
            .find(|e| e.0 == name)
            .map(|e| Tensor::new(&e.2, e.3.iter().map(|&v| T::from_f64(v)).collect()).expect("archive entry shape"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0;
        let mut tensors = Vec::new();
        for (name, dtype, shape, data) in &self.entries {
            tensors.push(Entry { name: name.clone(), dtype: dtype.to_string(), shape: shape.clone(), offset });
            offset += data.len() * if *dtype == "f32" { 4 } else { 8 };
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, dtype, _, data) in &self.entries {
            let mut buf = Vec::with_capacity(data.len() * 8);
            for &v in data {
                if *dtype == "f32" {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Archive("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(NnError::Archive(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let mut entries = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (dtype, width): (&'static str, usize) = match e.dtype.as_str() {
                "f32" => ("f32", 4),
                "f64" => ("f64", 8),
                other => return Err(NnError::Archive(format!("unknown dtype {other}"))),
            };
            let bytes = body
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| NnError::Archive(format!("tensor `{}` truncated", e.name)))?;
            let data = bytes
                .chunks_exact(width)
                .map(|c| if width == 4 { f32::from_le_bytes(c.try_into().unwrap()) as f64 } else { f64::from_le_bytes(c.try_into().unwrap()) })
                .collect();
            entries.push((e.name, dtype, e.shape, data));
        }
        Ok(Self { meta: header.meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_meta() {
        let mut a = Archive::new(serde_json::json!({"config_hash": "abc", "iteration": 7}));
        a.insert("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        a.insert("z", &Tensor::<f64>::from_fn(&[4], |i| 1.0 / (i as f64 + 3.0)));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let b = Archive::read_from(&buf[..]).unwrap();
        assert_eq!(b.meta["iteration"], 7);
        assert_eq!(b.get::<f32>("w").unwrap(), a.get::<f32>("w").unwrap());
        assert_eq!(b.get::<f64>("z").unwrap().data()[1], 0.25);
        assert!(b.get::<f32>("nope").is_none());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::read_from(&b"not an archive at all"[..]).is_err());
    }
}
