//! Versioned binary container: a header (magic, version, config text)
//! followed by named little-endian tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"COPECKPT";
pub const VERSION: u32 = 1;

const TAG_U64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::U64(_) => "u64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub entries: Vec<Entry>,
}

/// Float payload of the requested precision.
pub fn float_entry<T: Scalar>(name: impl Into<String>, dims: Vec<usize>, data: &[T]) -> Entry {
    let data = match T::DTYPE {
        DType::F32 => EntryData::F32(data.iter().map(|x| x.as_f64() as f32).collect()),
        DType::F64 => EntryData::F64(data.iter().map(|x| x.as_f64()).collect()),
    };
    Entry {
        name: name.into(),
        dims,
        data,
    }
}

pub fn u64_entry(name: impl Into<String>, data: Vec<u64>) -> Entry {
    Entry {
        name: name.into(),
        dims: vec![data.len()],
        data: EntryData::U64(data),
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))
    }

    /// Float tensor `name` with the expected shape and precision.
    pub fn floats<T: Scalar>(&self, name: &str, dims: &[usize]) -> Result<Vec<T>> {
        let e = self.get(name)?;
        if e.dims != dims {
            return Err(Error::Config(format!(
                "tensor {name}: checkpoint shape {:?} does not match model shape {dims:?}",
                e.dims
            )));
        }
        match (&e.data, T::DTYPE) {
            (EntryData::F32(v), DType::F32) => Ok(v.iter().map(|&x| T::lit(x as f64)).collect()),
            (EntryData::F64(v), DType::F64) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
            (d, want) => Err(Error::Config(format!(
                "tensor {name}: stored as {} but the run uses {want:?}",
                d.type_name()
            ))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.get(name)?.data {
            EntryData::U64(v) => Ok(v.clone()),
            d => Err(Error::Format(format!(
                "tensor {name}: expected u64, found {}",
                d.type_name()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len())?;
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.entries.len())?;
        for e in &self.entries {
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(Error::Invariant(format!(
                    "tensor {}: dims {:?} vs {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.data {
                EntryData::F32(_) => DType::F32 as u8,
                EntryData::F64(_) => DType::F64 as u8,
                EntryData::U64(_) => TAG_U64,
            });
            put_u32(&mut out, e.dims.len())?;
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = match tag {
                0 => EntryData::F32(
                    r.take(4 * len)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => EntryData::F64(
                    r.take(8 * len)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                TAG_U64 => EntryData::U64(
                    r.take(8 * len)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                t => {
                    return Err(Error::Format(format!(
                        "tensor {name}: unknown dtype tag {t}"
                    )))
                }
            };
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_text,
            entries,
        })
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
