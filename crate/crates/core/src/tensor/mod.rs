//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is an immutable value: cloning shares the underlying buffer.
//! Differentiable computation goes through a [`Graph`], which records
//! operations when built with [`Graph::new`] and records nothing when built
//! with [`Graph::inference`].

mod element;
mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

static CHECKED: AtomicBool = AtomicBool::new(true);

/// Enables or disables checked mode (finite-value and zero-divisor validation).
pub fn set_checked(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn is_checked() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, validating that the extents are positive and match
    /// the buffer length. In checked mode non-finite values are rejected.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if is_checked() {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("element {i} of tensor {shape:?}")));
            }
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Unvalidated constructor for kernels whose output shape is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data), requires_grad: false }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    /// Standard-normal samples drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)).unwrap())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)).unwrap())
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap().abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max))
    }

    /// Bit-level identity of shape and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.bits() == b.bits())
    }

    /// Slice of the outermost axis as an owned tensor keeping rank.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::Shape("rank-0 tensor".into()))?;
        if i >= n {
            return Err(Error::Shape(format!("index {i} out of range for extent {n}")));
        }
        let chunk = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self::from_parts(shape, self.data[i * chunk..(i + 1) * chunk].to_vec()))
    }

    /// Item `i` along the leading axis, with that axis removed.
    pub fn select_outer(&self, i: usize) -> Result<Self> {
        let t = self.index_outer(i)?;
        let shape = self.shape[1..].to_vec();
        Ok(Self::from_parts(shape, t.data.to_vec()))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(t.data());
        }
        let mut shape = first.shape.clone();
        shape.insert(0, items.len());
        Ok(Self::from_parts(shape, data))
    }

    /// Joins tensors along their existing leading axis.
    pub fn concat_outer(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.rank() == 0 || t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("cannot concat {:?} with {:?}", first.shape, t.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self::from_parts(shape, data))
    }
}

impl<T: Element> Hash for Tensor<T> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.shape.hash(state);
        for v in self.data.iter() {
            v.bits().hash(state);
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new([0, 2], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite_in_checked_mode() {
        assert!(matches!(
            Tensor::<f32>::new([2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::<f32>::new([2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshape([3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape([4, 2]).is_err());
    }

    #[test]
    fn stack_and_index_are_inverse() {
        let a = Tensor::<f32>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new([1, 2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::concat_outer(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert!(s.index_outer(1).unwrap().bit_eq(&b));
        let st = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(st.shape(), &[2, 1, 2]);
        assert!(st.select_outer(1).unwrap().bit_eq(&b));
    }
}
