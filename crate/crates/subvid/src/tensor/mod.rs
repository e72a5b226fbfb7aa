//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! The kernel set is deliberately small: add, mul (both broadcasting),
//! scalar scale, matmul (optionally batched), permute, reshape, concat,
//! slice, softmax, layer_norm, SiLU, mean. Everything else in the model is
//! composed from these, which bounds the backward-rule surface that has to
//! be verified against finite differences.

mod grad_check;
mod tape;

pub use grad_check::{grad_check, GradCheckReport};
pub use tape::{Grads, Id, Tape};

use crate::error::{Error, Result};

/// Element type for all numerics. Training runs in `f32`; gradient checks
/// instantiate the same code at `f64`.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// A plain value tensor: shape plus row-major data. This is the storage type
/// for parameters, activations that live outside a tape, and test fixtures.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Standard-normal fill via Box-Muller on the supplied RNG.
    pub fn randn<R: rand::Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * th.cos()));
            if data.len() < numel {
                data.push(T::from_f64(r * th.sin()));
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in {what}")));
        }
        Ok(())
    }

    /// Cast between precisions (f32 training values into an f64 tape and back).
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Numpy-style broadcast of two shapes (dims align from the right; each pair
/// must be equal or one of them 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Dimension(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        }
    }
    Ok(out)
}
