//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EGSPKCKP"
//! version  u32      1
//! dtype    u8       1 = f32, 2 = f64
//! n_meta   u32      then n_meta × (str key, str value)
//! n_sect   u32      then per section:
//!     str name, u32 n_tensors, then per tensor:
//!         str name, u32 ndim, ndim × u64 dims, product(dims) raw LE floats
//! str      = u32 byte length + UTF-8 bytes
//! ```
//!
//! Sections and tensors are written in name order, so equal contents give
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::CheckpointError;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EGSPKCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub sections: BTreeMap<String, ParamStore<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self { meta: BTreeMap::new(), sections: BTreeMap::new() }
    }

    pub fn section(&self, name: &str) -> Result<&ParamStore<T>, CheckpointError> {
        self.sections.get(name).ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Meta(format!("missing key `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, store) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (pname, t) in store.iter() {
                put_str(&mut out, pname);
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let code = r.take(1)?[0];
        let found = DType::from_code(code);
        if found != Some(T::DTYPE) {
            return Err(CheckpointError::DType { expected: T::DTYPE, found });
        }
        let mut ck = Checkpoint::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        let width = T::DTYPE.size();
        for _ in 0..r.u32()? {
            let sname = r.string()?;
            let mut store = ParamStore::new();
            for _ in 0..r.u32()? {
                let pname = r.string()?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let n: usize = shape.iter().product();
                let raw = r.take(n.checked_mul(width).ok_or_else(|| corrupt("tensor size overflow"))?)?;
                let data = raw.chunks_exact(width).map(T::read_le).collect();
                let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
                store.insert(pname, t);
            }
            ck.sections.insert(sname, store);
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(msg: &str) -> CheckpointError {
    CheckpointError::Corrupt(msg.to_string())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("unexpected end"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("non-UTF-8 string"))
    }
}
