//! Dense row-major tensors and the scalar trait shared by both precisions.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type of a numeric run. `f64` is used by the gradient-check suites,
/// `f32` for training.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BITS: u32;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn of_f32(x: f32) -> Self;

    fn as_f32(self) -> f32;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn of_f32(x: f32) -> Self {
        x
    }

    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn of_f32(x: f32) -> Self {
        x as f64
    }

    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Numeric mode selected by `ROBGAN_PRECISION` (32 or 64, default 32).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub const ENV_VAR: &'static str = "ROBGAN_PRECISION";

    pub fn from_env() -> Result<Self> {
        match std::env::var(Self::ENV_VAR) {
            Err(_) => Ok(Precision::Single),
            Ok(v) => match v.trim() {
                "32" => Ok(Precision::Single),
                "64" => Ok(Precision::Double),
                other => Err(Error::Config(format!(
                    "{} must be 32 or 64, got {other:?}",
                    Self::ENV_VAR
                ))),
            },
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("zero dim in {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        let lead = *self.dims.first().unwrap_or(&0);
        if start + len > lead {
            return Err(Error::shape(
                "rows",
                format!("rows {start}..{} out of {lead}", start + len),
            ));
        }
        let stride = if lead == 0 { 0 } else { self.data.len() / lead };
        let mut dims = self.dims.clone();
        dims[0] = len;
        Ok(Self {
            dims,
            data: self.data[start * stride..(start + len) * stride].to_vec(),
        })
    }

    /// Euclidean norm of the whole tensor, accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}
