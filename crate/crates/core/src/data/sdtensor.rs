//! `SDT1` named-tensor container.
//!
//! ```text
//! "SDT1"                      4 bytes
//! entry count                 u32
//! per entry:
//!   name length               u16, then UTF-8 name
//!   dtype                     u8 (0 = f32, 1 = f64, 2 = i64)
//!   rank                      u8, then rank × u64 extents
//!   payload                   row-major elements
//! ```
//! All integers and elements are little-endian. Entries are written in name
//! order, so equal maps always encode to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SDT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64 { .. } => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::I64 { shape, .. } => shape,
        }
    }

    pub fn from_i64(data: Vec<i64>) -> Self {
        TensorData::I64 {
            shape: vec![data.len()],
            data,
        }
    }

    /// Float payload converted to `S`; integer payloads are rejected.
    pub fn to_float<S: Scalar>(&self) -> Option<Tensor<S>> {
        match self {
            TensorData::F32(t) => Some(t.cast()),
            TensorData::F64(t) => Some(t.cast()),
            TensorData::I64 { .. } => None,
        }
    }

    /// Exact-type view for `S`, used to restore checkpoints bit for bit.
    pub fn as_exact<S: Scalar>(&self) -> Option<Tensor<S>> {
        (self.dtype() == S::DTYPE).then(|| self.to_float()).flatten()
    }

    pub fn from_float<S: Scalar>(t: &Tensor<S>) -> Self {
        match S::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            _ => TensorData::F64(t.cast()),
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match self {
            TensorData::I64 { data, .. } => Some(data),
            _ => None,
        }
    }
}

pub type TensorMap = BTreeMap<String, TensorData>;

pub fn encode(map: &TensorMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(map.len()).map_err(|_| Error::Contract("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in map {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype() as u8);
        let shape = t.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Contract("rank above 255".into()))?;
        out.push(rank);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match t {
            TensorData::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            TensorData::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            TensorData::I64 { data, .. } => {
                data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| r.fail("file shorter than the magic"))? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected SDT1".into(),
        });
    }
    let count = r.u32()?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                detail: "entry name is not UTF-8".into(),
            })?
            .to_owned();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
            offset: r.pos as u64 - 1,
            detail: format!("unknown dtype tag {tag}"),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u64()?;
            shape.push(usize::try_from(e).map_err(|_| r.fail("extent overflows usize"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| r.fail("element count overflows"))?;
        let nbytes = n
            .checked_mul(dtype.width())
            .ok_or_else(|| r.fail("payload size overflows"))?;
        let at = r.pos;
        let payload = r.take(nbytes)?;
        let bad_shape = |_| Error::Format {
            offset: at as u64,
            detail: format!("entry {name}: zero extent in {shape:?}"),
        };
        let t = match dtype {
            DType::F32 => TensorData::F32(
                Tensor::new(shape.clone(), payload.chunks_exact(4).map(f32::read_le).collect())
                    .map_err(bad_shape)?,
            ),
            DType::F64 => TensorData::F64(
                Tensor::new(shape.clone(), payload.chunks_exact(8).map(f64::read_le).collect())
                    .map_err(bad_shape)?,
            ),
            DType::I64 => TensorData::I64 {
                data: payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8")))
                    .collect(),
                shape,
            },
        };
        if map.insert(name.clone(), t).is_some() {
            return Err(r.fail(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(map)
}

pub fn write_sdtensor(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_sdtensor(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
