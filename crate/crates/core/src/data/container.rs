//! `CLRA` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLRA" | u32 version | u64 entry count
//! per entry: u32 name length | name (UTF-8) | u8 dtype | u8 rank | rank × u64 dims | payload
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CLRA";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// One stored array. `I32` arrays may have zero-length dimensions
/// (used for empty metadata strings).
#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl Array {
    pub fn dtype(&self) -> DType {
        match self {
            Array::F32(_) => DType::F32,
            Array::F64(_) => DType::F64,
            Array::I32 { .. } => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(t) => t.shape(),
            Array::F64(t) => t.shape(),
            Array::I32 { shape, .. } => shape,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            Array::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            Array::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
            Array::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
}

/// Ordered list of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<(String, Array)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Array)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Array)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate container entry {name}")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        self.push(name, Array::F32(t))
    }

    /// Stores `value` as UTF-8 bytes in an `i32` array named `meta.<key>`.
    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        let data: Vec<i32> = value.bytes().map(i32::from).collect();
        self.push(format!("meta.{key}"), Array::I32 { shape: vec![data.len()], data })
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Array::F32(t)) => Ok(t),
            Some(other) => Err(Error::Format(format!("{name} has dtype {:?}, expected F32", other.dtype()))),
            None => Err(Error::Format(format!("missing entry {name}"))),
        }
    }

    pub fn i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        match self.get(name) {
            Some(Array::I32 { shape, data }) => Ok((shape, data)),
            Some(other) => Err(Error::Format(format!("{name} has dtype {:?}, expected I32", other.dtype()))),
            None => Err(Error::Format(format!("missing entry {name}"))),
        }
    }

    pub fn meta(&self, key: &str) -> Result<String> {
        let (_, data) = self.i32(&format!("meta.{key}"))?;
        let bytes = data
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| Error::Format(format!("meta.{key} is not a byte string"))))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Format(format!("meta.{key} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, arr) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(arr.dtype().code());
            out.push(arr.shape().len() as u8);
            for &d in arr.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            arr.write_payload(&mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a CLRA file".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        if bytes.len() < r.pos + 8 + DIGEST_LEN {
            return Err(Error::Format("truncated file".into()));
        }
        let body_end = bytes.len() - DIGEST_LEN;
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: r.pos,
        };
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("element count overflow".into()))?;
            let nbytes = n
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format("payload size overflow".into()))?;
            let payload = r.take(nbytes)?;
            let arr = match dtype {
                DType::F32 => Array::F32(read_tensor(shape, payload)?),
                DType::F64 => Array::F64(read_tensor(shape, payload)?),
                DType::I32 => Array::I32 {
                    shape,
                    data: payload
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                },
            };
            entries.push((name, arr));
        }
        if r.pos != body_end {
            return Err(Error::Format(format!("{} unexpected trailing bytes", body_end - r.pos)));
        }
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(Error::Checksum("container digest mismatch".into()));
        }
        Ok(Self { entries })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_tensor<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(format!("bad tensor entry: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
