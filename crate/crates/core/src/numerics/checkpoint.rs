//! Binary checkpoint format.
//!
//! ```text
//! "TBST1"
//! per parameter:  name_len u32 | name | dtype u8 | ndim u8 | dims u32.. | data
//! version u64
//! ```
//! All integers and data are little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::array::{Array, DimError};
use super::model::{ModelParams, ModelShape, PARAM_NAMES};
use super::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 5] = b"TBST1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("parameter {name}: stored as {got}, expected {expected}")]
    DtypeMismatch { name: String, expected: DType, got: DType },
    #[error("unexpected parameter record {0:?}")]
    UnexpectedParam(String),
    #[error("missing parameter {0}")]
    MissingParam(&'static str),
    #[error(transparent)]
    Dim(#[from] DimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode<S: Scalar>(params: &ModelParams<S>) -> Vec<u8> {
    let mut out = Vec::from(&MAGIC[..]);
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE.code());
        out.push(t.ndim() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        t.write_data_le(&mut out);
    }
    out.extend_from_slice(&params.version.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ModelParams<S>, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut arrays: Vec<Array<S>> = Vec::with_capacity(6);
    for expected_name in PARAM_NAMES {
        if r.buf.len() <= 8 {
            return Err(CheckpointError::MissingParam(expected_name));
        }
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
        if name != expected_name {
            return Err(CheckpointError::UnexpectedParam(name));
        }
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or(CheckpointError::UnknownDtype(code))?;
        if dtype != S::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name,
                expected: S::DTYPE,
                got: dtype,
            });
        }
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = r.take(n * dtype.size(), "data")?;
        arrays.push(Array::from_le_bytes(dims, data)?);
    }
    let version = u64::from_le_bytes(r.take(8, "version")?.try_into().unwrap());
    if !r.buf.is_empty() {
        return Err(CheckpointError::UnexpectedParam(format!(
            "{} trailing bytes",
            r.buf.len()
        )));
    }
    let arrays: [Array<S>; 6] = arrays.try_into().expect("six parameter records");
    Ok(ModelParams::from_arrays(arrays, version)?)
}

pub fn save<S: Scalar>(params: &ModelParams<S>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(params))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<S>, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Loads and checks against the shape the caller's config implies.
pub fn load_checked<S: Scalar>(path: impl AsRef<Path>, shape: ModelShape) -> Result<ModelParams<S>, CheckpointError> {
    let params = load(path)?;
    params.check_shape(shape)?;
    Ok(params)
}
