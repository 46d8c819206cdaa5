//! Dense row-major tensors and the hand-differentiated kernels built on them.
//!
//! Kernels are generic over [`Scalar`] so that the same code runs in the
//! 32-bit training mode and in the 64-bit mode used for gradient checks and
//! exact equivalence tests.

mod activation;
mod concat;
pub(crate) mod conv;
pub(crate) mod dense;
mod pool;

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

pub use activation::{activation, activation_backward, Activation};
pub use concat::{concat, split_axis};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use pool::{PoolIndices, maxpool2_backward, maxpool2_forward, pad_to_even, pad_to_even_backward};

/// Floating point element type of a [`Tensor`].
pub trait Scalar: Float + NumAssign + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Kernel-internal constructor; callers guarantee the shape invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric {
                op,
                detail: format!("non-finite value at flat index {i} of {:?}", self.shape),
            }),
        }
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Row `i` of the leading axis as a slice.
    pub(crate) fn outer(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(
            "shape",
            format!("shape {shape:?} must be non-empty with every dimension >= 1"),
        ));
    }
    Ok(())
}

pub(crate) fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Input gradient (when requested), parameter gradient and bias gradient.
pub(crate) type BackwardParts<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Inner product with eight independent partial sums so the loop vectorizes.
pub(crate) fn inner<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let head = (lanes[0] + lanes[4]) + (lanes[1] + lanes[5]) + (lanes[2] + lanes[6]) + (lanes[3] + lanes[7]);
    head + tail
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    pub fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central finite-difference derivative of `f` at every entry of `x`.
    pub fn numeric_grad(x: &Tensor<f64>, eps: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += eps;
                let mut minus = x.clone();
                minus.data_mut()[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Weighted sum <w, t>, the scalar loss used by kernel gradient checks.
    pub fn dot(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert!(Tensor::<f64>::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|x| x as f32).collect()).unwrap();
        let r = t.clone().reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4]).is_err());
    }
}
