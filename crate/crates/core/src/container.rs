//! Binary named-tensor container shared by exam files, checkpoints and the wire.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FLTC" | version u16 | kind u8 | round u32 | sample_count u32 | tensor_count u32
//! per tensor, names in ascending byte order:
//!   name_len u16 | name (UTF-8) | dtype u8 | rank u8 | extents rank×u32 | payload
//! ```
//!
//! dtype codes: 0 float32, 1 float64, 2 uint8, 3 int32. Payloads are row-major.

use std::collections::BTreeMap;

use thiserror::Error;
use ucfed_autograd::{DType, Tensor, TensorData};

pub const CONTAINER_MAGIC: [u8; 4] = *b"FLTC";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4;

/// Header `kind` values.
pub mod kind {
    pub const WEIGHTS: u8 = 0;
    pub const GRADIENTS: u8 = 1;
    pub const DATA: u8 = 2;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: u8,
    pub round: u32,
    pub sample_count: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    #[error("truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("tensor has a zero extent")]
    ZeroExtent,
    #[error("tensor size overflows")]
    Oversized,
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("container parse error at byte {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError { offset: self.pos, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.fail(DecodeErrorKind::Truncated { needed: n - remaining }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(kind: u8, round: u32, sample_count: u32) -> Self {
        Container {
            kind,
            round,
            sample_count,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.tensors.insert(name.into(), t);
        self
    }

    /// Canonical encoding: equal containers produce equal bytes.
    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 2 + n.len() + 2 + 4 * t.shape().len() + t.len() * t.dtype().size_of())
            .sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.push(self.kind);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            assert!(name.len() <= u16::MAX as usize, "tensor name too long: {name}");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            match t.data() {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CONTAINER_MAGIC {
            return Err(DecodeError {
                offset: 0,
                kind: DecodeErrorKind::BadMagic(magic),
            });
        }
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(DecodeError {
                offset: 4,
                kind: DecodeErrorKind::VersionMismatch {
                    found: version,
                    supported: CONTAINER_VERSION,
                },
            });
        }
        let kind = r.u8()?;
        let round = r.u32()?;
        let sample_count = r.u32()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| DecodeError {
                    offset: start + 2,
                    kind: DecodeErrorKind::InvalidName,
                })?
                .to_owned();
            let dtype_at = r.pos;
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or(DecodeError {
                offset: dtype_at,
                kind: DecodeErrorKind::UnknownDType(code),
            })?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let at = r.pos;
                let e = r.u32()? as usize;
                if e == 0 {
                    return Err(DecodeError {
                        offset: at,
                        kind: DecodeErrorKind::ZeroExtent,
                    });
                }
                numel = numel.checked_mul(e).ok_or(DecodeError {
                    offset: at,
                    kind: DecodeErrorKind::Oversized,
                })?;
                shape.push(e);
            }
            let nbytes = numel.checked_mul(dtype.size_of()).ok_or(r.fail(DecodeErrorKind::Oversized))?;
            let raw = r.take(nbytes)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U8 => TensorData::U8(raw.to_vec()),
                DType::I32 => TensorData::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            let tensor = Tensor::new(shape, data).expect("extent and length checked above");
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(DecodeError {
                    offset: start,
                    kind: DecodeErrorKind::DuplicateName(name),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail(DecodeErrorKind::TrailingBytes(bytes.len() - r.pos)));
        }
        Ok(Container {
            kind,
            round,
            sample_count,
            tensors,
        })
    }
}
