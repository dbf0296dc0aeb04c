//! Dense row-major arrays.

use thiserror::Error;

use super::scalar::{DType, Element};

/// Shape disagreement between what an operation expects and what it got.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{what}: expected dims {expected:?}, got {got:?}")]
pub struct DimError {
    pub what: String,
    pub expected: Vec<usize>,
    pub got: Vec<usize>,
}

impl DimError {
    pub fn new(what: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        DimError {
            what: what.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

/// Row-major array with a statically known element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy + Default> Array<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, DimError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(DimError::new("array data length", &[n], &[data.len()]));
        }
        Ok(Array { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::default())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Array {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Array {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Rank-0 array holding one value.
    pub fn scalar(value: T) -> Self {
        Array {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Array {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of bounds for dims {:?}", self.dims);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data under new dims with an equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self, DimError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(DimError::new("reshape", dims, &self.dims));
        }
        Ok(Array {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn map<U: Copy + Default>(&self, f: impl FnMut(T) -> U) -> Array<U> {
        Array {
            dims: self.dims.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Length of one row along the last axis; 1 for scalars.
    pub fn row_len(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.row_len().max(1))
    }

    pub fn expect_dims(&self, what: &str, dims: &[usize]) -> Result<(), DimError> {
        if self.dims != dims {
            return Err(DimError::new(what, dims, &self.dims));
        }
        Ok(())
    }
}

impl<T: Element> Array<T> {
    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn write_data_le(&self, out: &mut Vec<u8>) {
        out.reserve(self.data.len() * T::DTYPE.size());
        for &x in &self.data {
            x.write_le(out);
        }
    }

    /// Decodes `Π dims` elements from `bytes`, which must be exactly that long.
    pub fn from_le_bytes(dims: Vec<usize>, bytes: &[u8]) -> Result<Self, DimError> {
        let n: usize = dims.iter().product();
        let size = T::DTYPE.size();
        if bytes.len() != n * size {
            return Err(DimError::new("raw data bytes", &[n * size], &[bytes.len()]));
        }
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        Ok(Array { dims, data })
    }
}

/// Array whose dtype is only known at runtime, e.g. an observation coming
/// off the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum DynArray {
    U8(Array<u8>),
    I64(Array<i64>),
    F32(Array<f32>),
    F64(Array<f64>),
}

macro_rules! each_dtype {
    ($value:expr, $a:ident => $body:expr) => {
        match $value {
            DynArray::U8($a) => $body,
            DynArray::I64($a) => $body,
            DynArray::F32($a) => $body,
            DynArray::F64($a) => $body,
        }
    };
}

impl DynArray {
    pub fn zeros(dtype: DType, dims: &[usize]) -> Self {
        match dtype {
            DType::U8 => DynArray::U8(Array::zeros(dims)),
            DType::I64 => DynArray::I64(Array::zeros(dims)),
            DType::F32 => DynArray::F32(Array::zeros(dims)),
            DType::F64 => DynArray::F64(Array::zeros(dims)),
        }
    }

    /// Copies all of `src` into the flat element range starting at `offset`.
    /// Dtypes must agree.
    pub fn write_at(&mut self, offset: usize, src: &DynArray) -> Result<(), DimError> {
        macro_rules! copy {
            ($dst:expr, $src:expr) => {{
                let end = offset + $src.len();
                if end > $dst.len() {
                    return Err(DimError::new("write range", &[$dst.len()], &[end]));
                }
                $dst.data_mut()[offset..end].copy_from_slice($src.data());
                Ok(())
            }};
        }
        match (self, src) {
            (DynArray::U8(d), DynArray::U8(s)) => copy!(d, s),
            (DynArray::I64(d), DynArray::I64(s)) => copy!(d, s),
            (DynArray::F32(d), DynArray::F32(s)) => copy!(d, s),
            (DynArray::F64(d), DynArray::F64(s)) => copy!(d, s),
            (d, s) => Err(DimError::new(
                format!("dtype {} written into {} array", s.dtype(), d.dtype()),
                d.dims(),
                s.dims(),
            )),
        }
    }

    /// Elements `[offset, offset + Π dims)` as a new array with `dims`.
    pub fn slice(&self, offset: usize, dims: &[usize]) -> DynArray {
        let n: usize = dims.iter().product();
        each_dtype!(self, a => Array {
            dims: dims.to_vec(),
            data: a.data()[offset..offset + n].to_vec(),
        }
        .into())
    }

    /// Time-major interleave: treats every part as rows of `row_len`
    /// elements and emits row 0 of each part, then row 1 of each part, and so
    /// on. All parts must share dtype and length. The result is flat.
    pub fn interleave(parts: &[&DynArray], row_len: usize) -> Result<DynArray, DimError> {
        fn go<T: Copy + Default>(parts: &[&Array<T>], row_len: usize) -> Array<T> {
            let len = parts[0].len();
            let mut data = Vec::with_capacity(len * parts.len());
            for start in (0..len).step_by(row_len.max(1)) {
                for p in parts {
                    data.extend_from_slice(&p.data()[start..start + row_len]);
                }
            }
            Array::vector(data)
        }
        macro_rules! typed {
            ($variant:ident) => {{
                let typed = parts
                    .iter()
                    .map(|p| match p {
                        DynArray::$variant(a) => Ok(a),
                        other => Err(DimError::new(
                            format!("dtype {} mixed with {}", other.dtype(), parts[0].dtype()),
                            parts[0].dims(),
                            other.dims(),
                        )),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                DynArray::$variant(go(&typed, row_len))
            }};
        }
        let first = parts
            .first()
            .ok_or_else(|| DimError::new("interleave of no parts", &[1], &[0]))?;
        if row_len == 0 || first.len() % row_len != 0 {
            return Err(DimError::new("interleave row length", &[row_len], first.dims()));
        }
        if let Some(bad) = parts.iter().find(|p| p.len() != first.len()) {
            return Err(DimError::new("interleave part length", first.dims(), bad.dims()));
        }
        Ok(match first {
            DynArray::U8(_) => typed!(U8),
            DynArray::I64(_) => typed!(I64),
            DynArray::F32(_) => typed!(F32),
            DynArray::F64(_) => typed!(F64),
        })
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self, DimError> {
        Ok(each_dtype!(self, a => a.reshape(dims)?.into()))
    }

    pub fn dtype(&self) -> DType {
        match self {
            DynArray::U8(_) => DType::U8,
            DynArray::I64(_) => DType::I64,
            DynArray::F32(_) => DType::F32,
            DynArray::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            DynArray::U8(a) => a.dims(),
            DynArray::I64(a) => a.dims(),
            DynArray::F32(a) => a.dims(),
            DynArray::F64(a) => a.dims(),
        }
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_data_le(&self, out: &mut Vec<u8>) {
        match self {
            DynArray::U8(a) => a.write_data_le(out),
            DynArray::I64(a) => a.write_data_le(out),
            DynArray::F32(a) => a.write_data_le(out),
            DynArray::F64(a) => a.write_data_le(out),
        }
    }

    pub fn from_le_bytes(dtype: DType, dims: Vec<usize>, bytes: &[u8]) -> Result<Self, DimError> {
        Ok(match dtype {
            DType::U8 => DynArray::U8(Array::from_le_bytes(dims, bytes)?),
            DType::I64 => DynArray::I64(Array::from_le_bytes(dims, bytes)?),
            DType::F32 => DynArray::F32(Array::from_le_bytes(dims, bytes)?),
            DType::F64 => DynArray::F64(Array::from_le_bytes(dims, bytes)?),
        })
    }

    /// Appends the values, converted to `f32`, to `out`.
    pub fn extend_f32(&self, out: &mut Vec<f32>) {
        match self {
            DynArray::U8(a) => out.extend(a.data().iter().map(|&x| f32::from(x))),
            DynArray::I64(a) => out.extend(a.data().iter().map(|&x| x as f32)),
            DynArray::F32(a) => out.extend_from_slice(a.data()),
            DynArray::F64(a) => out.extend(a.data().iter().map(|&x| x as f32)),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.len());
        self.extend_f32(&mut v);
        v
    }
}

impl From<Array<f32>> for DynArray {
    fn from(a: Array<f32>) -> Self {
        DynArray::F32(a)
    }
}

impl From<Array<u8>> for DynArray {
    fn from(a: Array<u8>) -> Self {
        DynArray::U8(a)
    }
}

impl From<Array<i64>> for DynArray {
    fn from(a: Array<i64>) -> Self {
        DynArray::I64(a)
    }
}

impl From<Array<f64>> for DynArray {
    fn from(a: Array<f64>) -> Self {
        DynArray::F64(a)
    }
}
