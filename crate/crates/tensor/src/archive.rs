//! Single-file tensor archive used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CNSARC01"
//! offset 8   u64       manifest length M in bytes
//! offset 16  M bytes   manifest, UTF-8, one line per entry:
//!                        name \t dtype \t shape \t offset \t nbytes \n
//!                      dtype is one of f32 f64 u8 i64; shape is the extents
//!                      joined by 'x' ("-" for rank 0); offset is relative to
//!                      the start of the data section
//! offset 16+M          data section: raw little-endian buffers, packed in
//!                      manifest order without padding
//! ```
//!
//! Entry order is preserved, so save -> load -> save is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::element::{DType, Float};
use crate::error::{Result, TensorError};
use crate::tensor::{numel_of, Tensor};

const MAGIC: &[u8; 8] = b"CNSARC01";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<ArchiveEntry>,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Archive(msg.into())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn push(&mut self, entry: ArchiveEntry) -> Result<()> {
        if entry.name.is_empty() || entry.name.contains(['\t', '\n']) {
            return Err(err(format!("invalid entry name {:?}", entry.name)));
        }
        if self.contains(&entry.name) {
            return Err(err(format!("duplicate entry {:?}", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_values<T: Float>(&mut self, name: &str, shape: &[usize], values: &[T]) -> Result<()> {
        if numel_of(shape) != values.len() {
            return Err(TensorError::DataLength {
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        self.push(ArchiveEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            bytes: T::to_le_bytes_vec(values),
        })
    }

    pub fn push_tensor<T: Float>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.push_values(name, t.shape(), t.data())
    }

    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.push(ArchiveEntry {
            name: name.to_string(),
            dtype: DType::U8,
            shape: vec![bytes.len()],
            bytes: bytes.to_vec(),
        })
    }

    pub fn push_i64(&mut self, name: &str, values: &[i64]) -> Result<()> {
        self.push(ArchiveEntry {
            name: name.to_string(),
            dtype: DType::I64,
            shape: vec![values.len()],
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        })
    }

    fn require(&self, name: &str, dtype: DType) -> Result<&ArchiveEntry> {
        let e = self.entry(name).ok_or_else(|| err(format!("missing entry {name:?}")))?;
        if e.dtype != dtype {
            return Err(err(format!(
                "entry {name:?} has dtype {}, expected {}",
                e.dtype.name(),
                dtype.name()
            )));
        }
        Ok(e)
    }

    /// Reads a floating-point entry, converting between `f32` and `f64`.
    pub fn values<T: Float>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let e = self.entry(name).ok_or_else(|| err(format!("missing entry {name:?}")))?;
        let values = match e.dtype {
            DType::F32 => f32::from_le_bytes_slice(&e.bytes).into_iter().map(|v| T::of(v as f64)).collect(),
            DType::F64 => f64::from_le_bytes_slice(&e.bytes).into_iter().map(T::of).collect(),
            other => return Err(err(format!("entry {name:?} is {}, not floating point", other.name()))),
        };
        Ok((e.shape.clone(), values))
    }

    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        let (shape, values) = self.values(name)?;
        Tensor::new(values, &shape)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        Ok(&self.require(name, DType::U8)?.bytes)
    }

    pub fn i64s(&self, name: &str) -> Result<Vec<i64>> {
        Ok(self
            .require(name, DType::I64)?
            .bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut offset = 0usize;
        for e in &self.entries {
            let shape = if e.shape.is_empty() {
                "-".to_string()
            } else {
                e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.dtype.name(),
                shape,
                offset,
                e.bytes.len()
            ));
            offset += e.bytes.len();
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(err("not a tensor archive (bad magic)"));
        }
        let mlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(mlen).filter(|&e| e <= buf.len()).ok_or_else(|| err("truncated manifest"))?;
        let manifest = std::str::from_utf8(&buf[16..data_start]).map_err(|_| err("manifest is not UTF-8"))?;
        let data = &buf[data_start..];
        let mut archive = Archive::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || err(format!("malformed manifest line {}: {line:?}", lineno + 1));
            if fields.len() != 5 {
                return Err(bad());
            }
            let dtype = DType::parse(fields[1]).ok_or_else(bad)?;
            let shape: Vec<usize> = if fields[2] == "-" {
                vec![]
            } else {
                fields[2].split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?
            };
            let offset: usize = fields[3].parse().map_err(|_| bad())?;
            let nbytes: usize = fields[4].parse().map_err(|_| bad())?;
            if nbytes != numel_of(&shape) * dtype.size() {
                return Err(err(format!("entry {:?}: {nbytes} bytes do not match shape", fields[0])));
            }
            let end = offset.checked_add(nbytes).filter(|&e| e <= data.len()).ok_or_else(|| err(format!("entry {:?} overruns data section", fields[0])))?;
            archive.push(ArchiveEntry {
                name: fields[0].to_string(),
                dtype,
                shape,
                bytes: data[offset..end].to_vec(),
            })?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_entries() {
        let mut a = Archive::new();
        a.push_tensor("w", &Tensor::<f32>::new(vec![1.0, -2.5, 3.25, 0.0], &[2, 2]).unwrap()).unwrap();
        a.push_tensor("s", &Tensor::<f64>::scalar(0.125)).unwrap();
        a.push_bytes("meta", b"key = 1\n").unwrap();
        a.push_i64("step", &[42]).unwrap();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes(), bytes);
        assert_eq!(b.tensor::<f32>("w").unwrap().data(), &[1.0, -2.5, 3.25, 0.0]);
        assert_eq!(b.tensor::<f64>("s").unwrap().shape(), &[] as &[usize]);
        assert_eq!(b.i64s("step").unwrap(), vec![42]);
        assert_eq!(b.bytes("meta").unwrap(), b"key = 1\n");
    }

    #[test]
    fn manifest_is_human_readable() {
        let mut a = Archive::new();
        a.push_values::<f32>("conv.weight", &[2, 1, 1, 1], &[1.0, 2.0]).unwrap();
        let bytes = a.to_bytes();
        let text = String::from_utf8_lossy(&bytes[16..]);
        assert!(text.starts_with("conv.weight\tf32\t2x1x1x1\t0\t8\n"));
    }

    #[test]
    fn rejects_corruption() {
        assert!(Archive::from_bytes(b"garbage!").is_err());
        let mut a = Archive::new();
        a.push_values::<f64>("x", &[3], &[1.0, 2.0, 3.0]).unwrap();
        let mut bytes = a.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Archive::from_bytes(&bytes).is_err());
        assert!(a.push_values::<f64>("x", &[1], &[0.0]).is_err());
    }
}
