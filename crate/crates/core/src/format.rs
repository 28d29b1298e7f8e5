//! Binary containers.
//!
//! `DFT1` holds one tensor:
//!
//! ```text
//! "DFT1" | u8 dtype (0=f32, 1=f64, 2=i64) | u8 rank | rank × u64 LE extents | LE payload
//! ```
//!
//! `DFC1` holds named tensors:
//!
//! ```text
//! "DFC1" | u32 LE count | count × (u16 LE name length | UTF-8 name | DFT1 record)
//! ```
//!
//! Text entries (such as a configuration echo) are stored as rank-1 `i64`
//! records holding one UTF-8 byte per element.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{format_err, Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DFT1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"DFC1";

/// One stored tensor of any supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Record {
    pub fn dtype(&self) -> DType {
        match self {
            Record::F32(_) => DType::F32,
            Record::F64(_) => DType::F64,
            Record::I64 { .. } => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Record::F32(t) => t.shape(),
            Record::F64(t) => t.shape(),
            Record::I64 { shape, .. } => shape,
        }
    }

    pub fn from_float<T: Float>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Record::F32(t.cast()),
            _ => Record::F64(t.cast()),
        }
    }

    /// Converts a floating record to `T`; integer records are rejected.
    pub fn to_float<T: Float>(&self) -> Result<Tensor<T>> {
        match self {
            Record::F32(t) => Ok(t.cast()),
            Record::F64(t) => Ok(t.cast()),
            Record::I64 { .. } => Err(format_err!("expected a floating-point record, found i64")),
        }
    }

    pub fn int(shape: &[usize], data: Vec<i64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(format_err!(
                "i64 record shape {shape:?} does not hold {} values",
                data.len()
            ));
        }
        Ok(Record::I64 {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn int_scalar(v: i64) -> Self {
        Record::I64 {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn text(s: &str) -> Self {
        let data: Vec<i64> = s.bytes().map(i64::from).collect();
        Record::I64 {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0] } else { data },
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            Record::I64 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Result<String> {
        let ints = self
            .as_ints()
            .ok_or_else(|| format_err!("text entry must be an i64 record"))?;
        let bytes: Vec<u8> = ints
            .iter()
            .filter(|&&b| b != 0)
            .map(|&b| u8::try_from(b).map_err(|_| format_err!("text byte {b} out of range")))
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|e| format_err!("text entry is not UTF-8: {e}"))
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype().code());
        let shape = self.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            Record::F32(t) => t.data().iter().for_each(|&v| v.write_le(out)),
            Record::F64(t) => t.data().iter().for_each(|&v| v.write_le(out)),
            Record::I64 { data, .. } => data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    /// Parses one record from the front of `cur`, advancing it.
    pub fn read_from(cur: &mut Cursor<'_>) -> Result<Self> {
        let magic = cur.take(4, "tensor magic")?;
        if magic != TENSOR_MAGIC {
            return Err(format_err!("bad tensor magic {:?}, expected DFT1", magic));
        }
        let code = cur.u8("dtype")?;
        let dtype =
            DType::from_code(code).ok_or_else(|| format_err!("unknown dtype code {code}"))?;
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64("extent")?;
            if d == 0 {
                return Err(format_err!("zero extent in stored shape"));
            }
            shape.push(usize::try_from(d).map_err(|_| format_err!("extent {d} too large"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err!("stored shape {shape:?} overflows"))?;
        let bytes = n
            .checked_mul(dtype.size())
            .ok_or_else(|| format_err!("payload size overflows"))?;
        let payload = cur.take(bytes, "payload")?;
        let size = dtype.size();
        Ok(match dtype {
            DType::F32 => Record::F32(Tensor::new(
                &shape,
                payload.chunks_exact(size).map(f32::read_le).collect(),
            )?),
            DType::F64 => Record::F64(Tensor::new(
                &shape,
                payload.chunks_exact(size).map(f64::read_le).collect(),
            )?),
            DType::I64 => Record::I64 {
                shape,
                data: payload
                    .chunks_exact(size)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let r = Self::read_from(&mut cur)?;
        cur.finish()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Ordered collection of named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: IndexMap<String, Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, r: Record) {
        self.entries.insert(name.into(), r);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| format_err!("missing entry `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Record)> {
        self.entries.iter()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        let count = u32::try_from(self.entries.len())
            .map_err(|_| format_err!("too many entries for DFC1"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, rec) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| format_err!("entry name `{name}` longer than 65535 bytes"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            rec.write_to(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4, "container magic")?;
        if magic != CONTAINER_MAGIC {
            return Err(format_err!(
                "bad container magic {:?}, expected DFC1",
                magic
            ));
        }
        let count = cur.u32("entry count")?;
        let mut c = Container::new();
        for i in 0..count {
            let len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "entry name")?)
                .map_err(|_| format_err!("entry {i} name is not UTF-8"))?
                .to_string();
            let rec = Record::read_from(&mut cur)
                .map_err(|e| format_err!("entry `{name}`: {}", strip(e)))?;
            if c.entries.insert(name.clone(), rec).is_some() {
                return Err(format_err!("duplicate entry `{name}`"));
            }
        }
        cur.finish()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Format(m) => m,
        other => other.to_string(),
    }
}

/// Bounds-checked little-endian reader.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err!(
                "truncated input reading {what}: need {n} bytes at offset {}",
                self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err!(
                "{} trailing bytes after last record",
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}
