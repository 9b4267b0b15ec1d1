//! Binary tensor container shared by checkpoints, representation banks and
//! prompt files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "OTVP CKP"
//! version u32      = 1
//! count   u32
//! count x { name_len u16, name utf-8, ndim u8, dims ndim x u64, payload f64 x prod(dims) }
//! ```
//!
//! JSON metadata travels as a 1-D tensor holding one UTF-8 byte per element.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OTVP CKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedTensor { name: name.into(), shape, data }
    }

    pub fn json(name: impl Into<String>, json: &str) -> Self {
        let data: Vec<f64> = json.bytes().map(f64::from).collect();
        NamedTensor { name: name.into(), shape: vec![data.len()], data }
    }

    pub fn as_json(&self) -> Result<String> {
        let bytes = self
            .data
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Invalid(format!("tensor {} is not a byte string", self.name)))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(format!("tensor {}: {e}", self.name)))
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Invalid("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("name too long: {}", t.name)))?;
        let ndim = u8::try_from(t.shape.len()).map_err(|_| Error::Invalid(format!("too many dims: {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape("container", format!("{} shape {:?} vs {} values", t.name, t.shape, t.data.len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(ndim);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "bad magic (not an OTVP container)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not utf-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::format(path, "dimension overflow"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("{name}: dimension overflow")))?;
        let bytes_needed = numel.checked_mul(8).ok_or_else(|| Error::format(path, "payload overflow"))?;
        let raw = r.take(bytes_needed)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Look up a tensor by name.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str, path: &Path) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::format(path, format!("missing tensor {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor::json("__config__", r#"{"a":1}"#),
            NamedTensor::new("w", vec![2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0]),
            NamedTensor::new("s", vec![], vec![7.0]),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back[0].as_json().unwrap(), r#"{"a":1}"#);
        assert!(back[1].data[5].is_sign_negative());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"OTVP CKP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = decode(&v2, p).unwrap_err();
        assert!(matches!(err, Error::Version { found: 2, expected: 1 }));
        assert!(err.to_string().contains("version"));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes, p), Err(Error::Format { .. })));
    }
}
