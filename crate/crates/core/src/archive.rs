//! Named-array archive used for every model and checkpoint on disk.
//!
//! Layout: a plain-text manifest followed by the raw array bytes.
//!
//! ```text
//! dsinpaint-archive 1
//! arrays 2
//! codec/enc_b/conv1/weight f32 64x3x4x4 0 12288
//! codec/enc_b/conv1/bias f32 64 12288 256
//! end
//! <little-endian IEEE-754 binary32 data>
//! ```
//!
//! Each manifest row is `name dtype shape offset length`, offsets and lengths
//! in bytes relative to the start of the data block.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &str = "dsinpaint-archive 1";

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArrayData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

/// An ordered collection of named f32 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    arrays: IndexMap<String, ArrayData>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayData) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Archive(format!("invalid array name {name:?}")));
        }
        let n: usize = array.shape.iter().product();
        if n != array.data.len() {
            return Err(Error::Archive(format!(
                "array {name}: shape {:?} does not match {} elements",
                array.shape,
                array.data.len()
            )));
        }
        self.arrays.insert(name, array);
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.insert(name, ArrayData::from_tensor(t)?)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayData> {
        self.arrays.get(name)
    }

    pub fn tensor(&self, name: &str, dtype: DType, device: &Device) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("array {name} not found")))?
            .to_tensor(dtype, device)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Arrays whose name starts with `prefix/`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> Archive {
        let p = format!("{prefix}/");
        Archive {
            arrays: self
                .arrays
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Adds every array of `other` under `prefix/`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Archive) -> Result<()> {
        for (k, v) in &other.arrays {
            self.insert(format!("{prefix}/{k}"), v.clone())?;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("arrays {}\n", self.arrays.len()));
        let mut offset = 0usize;
        for (name, a) in &self.arrays {
            let len = a.data.len() * 4;
            let shape = if a.shape.is_empty() {
                "scalar".to_string()
            } else {
                a.shape
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("{name} f32 {shape} {offset} {len}\n"));
            offset += len;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for a in self.arrays.values() {
            let mut buf = Vec::with_capacity(a.data.len() * 4);
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r
                .read_line(line)
                .map_err(|e| Error::Archive(format!("reading manifest: {e}")))?;
            if n == 0 {
                return Err(Error::Archive("unexpected end of manifest".into()));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Archive(format!("bad magic line {:?}", line.trim_end())));
        }
        next_line(&mut r, &mut line)?;
        let count: usize = line
            .trim_end()
            .strip_prefix("arrays ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Archive(format!("bad count line {:?}", line.trim_end())))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            next_line(&mut r, &mut line)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape, offset, len] = fields.as_slice() else {
                return Err(Error::Archive(format!("bad manifest row {:?}", line.trim_end())));
            };
            if *dtype != "f32" {
                return Err(Error::Archive(format!("unsupported element type {dtype}")));
            }
            let shape: Vec<usize> = if *shape == "scalar" {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Archive(format!("bad shape {shape}")))?
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Archive(format!("bad number {s}")))
            };
            entries.push((name.to_string(), shape, parse(offset)?, parse(len)?));
        }
        next_line(&mut r, &mut line)?;
        if line.trim_end() != "end" {
            return Err(Error::Archive("missing end of manifest".into()));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)
            .map_err(|e| Error::Archive(format!("reading data: {e}")))?;
        let mut archive = Archive::new();
        for (name, shape, offset, len) in entries {
            let bytes = data
                .get(offset..offset + len)
                .ok_or_else(|| Error::Archive(format!("array {name} out of bounds")))?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.insert(name, ArrayData { shape, data: values })?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }

    /// SHA-256 of the serialized archive.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            arrays in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u32>()), 0..6)
        ) {
            let mut a = Archive::new();
            for (i, (shape, seed)) in arrays.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(j as u32) & 0x7f7f_ffff))
                    .collect();
                a.insert(format!("group/array{i}"), ArrayData { shape: shape.clone(), data }).unwrap();
            }
            let mut buf = Vec::new();
            a.write_to(&mut buf).unwrap();
            let b = Archive::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.digest(), b.digest());
        }
    }

    #[test]
    fn rejects_bad_names_and_shapes() {
        let mut a = Archive::new();
        assert!(a
            .insert("has space", ArrayData { shape: vec![1], data: vec![0.0] })
            .is_err());
        assert!(a
            .insert("x", ArrayData { shape: vec![2], data: vec![0.0] })
            .is_err());
    }

    #[test]
    fn rejects_truncated_data() {
        let mut a = Archive::new();
        a.insert("x", ArrayData { shape: vec![4], data: vec![1.0; 4] })
            .unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Archive::read_from(buf.as_slice()), Err(Error::Archive(_))));
    }

    #[test]
    fn subset_strips_prefix() {
        let mut a = Archive::new();
        a.insert("p/w", ArrayData { shape: vec![1], data: vec![1.0] })
            .unwrap();
        a.insert("q/w", ArrayData { shape: vec![1], data: vec![2.0] })
            .unwrap();
        let s = a.subset("p");
        assert_eq!(s.len(), 1);
        assert_eq!(s.get("w").unwrap().data, vec![1.0]);
    }
}
