//! Dense row-major tensors.
//!
//! [`Tensor<T>`] is the statically typed storage used throughout the crate;
//! [`TensorData`] wraps it in a runtime-dtype enum for dataset payloads and
//! the wire protocol. Training math is generic over [`Scalar`] (`f32`/`f64`);
//! everything is little-endian when it touches bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Runtime element type of a [`TensorData`].
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::U8 => "u8",
        }
    }

    /// Code used by the binary wire protocol.
    pub fn wire_code(self) -> u8 {
        match self {
            DType::F32 => 0x01,
            DType::F64 => 0x02,
            DType::I32 => 0x03,
            DType::I64 => 0x04,
            DType::U8 => 0x05,
        }
    }

    pub fn from_wire_code(code: u8) -> Result<Self> {
        Ok(match code {
            0x01 => DType::F32,
            0x02 => DType::F64,
            0x03 => DType::I32,
            0x04 => DType::I64,
            0x05 => DType::U8,
            other => return Err(Error::Protocol(format!("unknown dtype code {other:#04x}"))),
        })
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fixed-width element that can live in a [`Tensor`].
pub trait Element: Copy + PartialEq + PartialOrd + Default + std::fmt::Debug + 'static {
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn wrap(tensor: Tensor<Self>) -> TensorData;
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr, $variant:ident, $from:expr) => {
        impl Element for $ty {
            const DTYPE: DType = $dtype;

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn from_f64(v: f64) -> Self {
                $from(v)
            }

            fn wrap(tensor: Tensor<Self>) -> TensorData {
                TensorData::$variant(tensor)
            }
        }
    };
}

impl_element!(f32, DType::F32, F32, |v: f64| v as f32);
impl_element!(f64, DType::F64, F64, |v: f64| v);
impl_element!(i32, DType::I32, I32, |v: f64| v as i32);
impl_element!(i64, DType::I64, I64, |v: f64| v as i64);
impl_element!(u8, DType::U8, U8, |v: f64| v as u8);

/// Floating-point scalar the training math is generic over.
pub trait Scalar:
    Element
    + num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Display
    + std::iter::Sum
{
    fn from_f64_exact(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor. Rank 0 (`shape == []`) holds a single scalar.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Extent of the leading axis; errors on rank-0 tensors.
    pub fn first_dim(&self) -> Result<usize> {
        self.shape
            .first()
            .copied()
            .ok_or_else(|| Error::ShapeMismatch("rank-0 tensor has no leading axis".into()))
    }

    /// Number of elements in one slice of the leading axis.
    pub fn row_numel(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Rows `[start, stop)` of the leading axis.
    pub fn rows(&self, start: usize, stop: usize) -> Result<Tensor<T>> {
        let n = self.first_dim()?;
        if start > stop || stop > n {
            return Err(Error::RangeOutOfBounds(format!(
                "[{start}, {stop}) of {n} rows"
            )));
        }
        let row = self.row_numel();
        let mut shape = self.shape.clone();
        shape[0] = stop - start;
        Ok(Tensor {
            shape,
            data: self.data[start * row..stop * row].to_vec(),
        })
    }

    /// Rows stacked in the order given; duplicate indices are allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.first_dim()?;
        let row = self.row_numel();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfBounds(format!("row {i} of {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for part in parts {
            if part.shape != first.shape {
                return Err(Error::ShapeMismatch(format!(
                    "stack of {:?} and {:?}",
                    first.shape, part.shape
                )));
            }
            data.extend_from_slice(&part.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the existing leading axis.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut rows = 0usize;
        let mut data = Vec::new();
        for part in parts {
            if part.shape[1..] != first.shape[1..] || part.rank() != first.rank() {
                return Err(Error::ShapeMismatch(format!(
                    "concat of {:?} and {:?}",
                    first.shape, part.shape
                )));
            }
            rows += part.first_dim()?;
            data.extend_from_slice(&part.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel_of(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size_of());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
        let width = T::DTYPE.size_of();
        if numel_of(&shape) * width != bytes.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} bytes, got {}",
                shape,
                numel_of(&shape) * width,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Ok(Tensor { shape, data })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn zip_map(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Row-major matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul of {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                for j in 0..n {
                    data[i * n + j] += a * rhs.data[p * n + j];
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    pub fn transposed(&self) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose of rank-{} tensor",
                self.rank()
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn l2_norm(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

/// Tensor with its element type resolved at runtime.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "dtype", content = "tensor", rename_all = "lowercase")]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I32(Tensor<i32>),
    I64(Tensor<i64>),
    U8(Tensor<u8>),
}

macro_rules! dispatch {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            TensorData::F32($t) => $body,
            TensorData::F64($t) => $body,
            TensorData::I32($t) => $body,
            TensorData::I64($t) => $body,
            TensorData::U8($t) => $body,
        }
    };
}

macro_rules! dispatch_wrap {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            TensorData::F32($t) => TensorData::F32($body),
            TensorData::F64($t) => TensorData::F64($body),
            TensorData::I32($t) => TensorData::I32($body),
            TensorData::I64($t) => TensorData::I64($body),
            TensorData::U8($t) => TensorData::U8($body),
        }
    };
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        dispatch!(self, t => t.shape())
    }

    pub fn rank(&self) -> usize {
        self.shape().len()
    }

    pub fn numel(&self) -> usize {
        dispatch!(self, t => t.numel())
    }

    pub fn first_dim(&self) -> Result<usize> {
        dispatch!(self, t => t.first_dim())
    }

    pub fn rows(&self, start: usize, stop: usize) -> Result<TensorData> {
        Ok(dispatch_wrap!(self, t => t.rows(start, stop)?))
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<TensorData> {
        Ok(dispatch_wrap!(self, t => t.gather_rows(indices)?))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<TensorData> {
        Ok(dispatch_wrap!(self, t => t.reshape(shape)?))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        dispatch!(self, t => t.to_le_bytes())
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<TensorData> {
        Ok(match dtype {
            DType::F32 => TensorData::F32(Tensor::from_le_bytes(shape, bytes)?),
            DType::F64 => TensorData::F64(Tensor::from_le_bytes(shape, bytes)?),
            DType::I32 => TensorData::I32(Tensor::from_le_bytes(shape, bytes)?),
            DType::I64 => TensorData::I64(Tensor::from_le_bytes(shape, bytes)?),
            DType::U8 => TensorData::U8(Tensor::from_le_bytes(shape, bytes)?),
        })
    }

    /// Stacks equally typed and shaped tensors along a new leading axis.
    pub fn stack(parts: &[&TensorData]) -> Result<TensorData> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        for part in parts {
            if part.dtype() != first.dtype() {
                return Err(Error::DTypeMismatch {
                    expected: first.dtype().name().into(),
                    actual: part.dtype().name().into(),
                });
            }
        }
        fn stack_as<T: Element>(parts: &[&TensorData], get: impl Fn(&TensorData) -> &Tensor<T>) -> Result<Tensor<T>> {
            let typed: Vec<&Tensor<T>> = parts.iter().map(|p| get(p)).collect();
            Tensor::stack(&typed)
        }
        Ok(match first.dtype() {
            DType::F32 => TensorData::F32(stack_as(parts, |p| match p {
                TensorData::F32(t) => t,
                _ => unreachable!(),
            })?),
            DType::F64 => TensorData::F64(stack_as(parts, |p| match p {
                TensorData::F64(t) => t,
                _ => unreachable!(),
            })?),
            DType::I32 => TensorData::I32(stack_as(parts, |p| match p {
                TensorData::I32(t) => t,
                _ => unreachable!(),
            })?),
            DType::I64 => TensorData::I64(stack_as(parts, |p| match p {
                TensorData::I64(t) => t,
                _ => unreachable!(),
            })?),
            DType::U8 => TensorData::U8(stack_as(parts, |p| match p {
                TensorData::U8(t) => t,
                _ => unreachable!(),
            })?),
        })
    }

    pub fn concat_rows(parts: &[TensorData]) -> Result<TensorData> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let dtype = first.dtype();
        for part in parts {
            if part.dtype() != dtype {
                return Err(Error::DTypeMismatch {
                    expected: dtype.name().into(),
                    actual: part.dtype().name().into(),
                });
            }
        }
        macro_rules! concat_as {
            ($variant:ident) => {{
                let typed: Vec<_> = parts
                    .iter()
                    .map(|p| match p {
                        TensorData::$variant(t) => t.clone(),
                        _ => unreachable!(),
                    })
                    .collect();
                TensorData::$variant(Tensor::concat_rows(&typed)?)
            }};
        }
        Ok(match dtype {
            DType::F32 => concat_as!(F32),
            DType::F64 => concat_as!(F64),
            DType::I32 => concat_as!(I32),
            DType::I64 => concat_as!(I64),
            DType::U8 => concat_as!(U8),
        })
    }

    /// Converts to the floating scalar used by the training math.
    pub fn cast_scalar<F: Scalar>(&self) -> Tensor<F> {
        dispatch!(self, t => t.cast::<F>())
    }

    /// Casts to another runtime dtype (through f64; exact for the
    /// magnitudes this crate handles).
    pub fn cast_to(&self, dtype: DType) -> TensorData {
        match dtype {
            DType::F32 => TensorData::F32(dispatch!(self, t => t.cast())),
            DType::F64 => TensorData::F64(dispatch!(self, t => t.cast())),
            DType::I32 => TensorData::I32(dispatch!(self, t => t.cast())),
            DType::I64 => TensorData::I64(dispatch!(self, t => t.cast())),
            DType::U8 => TensorData::U8(dispatch!(self, t => t.cast())),
        }
    }

    /// Exact comparison: dtype, shape, and payload bytes.
    pub fn bits_eq(&self, other: &TensorData) -> bool {
        self.dtype() == other.dtype()
            && self.shape() == other.shape()
            && self.to_le_bytes() == other.to_le_bytes()
    }
}

impl<T: Element> From<Tensor<T>> for TensorData {
    fn from(t: Tensor<T>) -> TensorData {
        T::wrap(t)
    }
}

/// One pipeline item: ordered map from source name to value.
pub type Item = indexmap::IndexMap<String, Value>;

/// Value carried by one source of an item. `List` is a ragged batch of
/// per-example tensors (variable-length sequences awaiting padding).
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Value {
    Tensor(TensorData),
    List(Vec<TensorData>),
}

impl Value {
    pub fn as_tensor(&self) -> Result<&TensorData> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::List(_) => Err(Error::ShapeMismatch(
                "expected a rectangular tensor, got a ragged list".into(),
            )),
        }
    }

    pub fn bits_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Tensor(a), Value::Tensor(b)) => a.bits_eq(b),
            (Value::List(a), Value::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits_eq(y))
            }
            _ => false,
        }
    }
}

/// Exact item equality (dtype, shape, payload bytes, source order).
pub fn items_bits_eq(a: &Item, b: &Item) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((ka, va), (kb, vb))| ka == kb && va.bits_eq(vb))
}
