//! Dense 4-D tensor with shared, immutable storage.
//!
//! Cloning a tensor is cheap: the element buffer is behind an `Arc` and is
//! never mutated after construction. Gradients are not stored inline; they
//! are produced by [`crate::tape::Tape::backward`] keyed by tensor identity,
//! and parameter stores keep their own accumulation buffers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor value; preserved across clones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone)]
pub struct Tensor<S> {
    id: TensorId,
    shape: Shape,
    data: Arc<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        Self::from_vec(Shape::new(n, c, h, w)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(vec![S::zero(); shape.numel()]),
            requires_grad: false,
        }
    }

    pub fn filled(shape: Shape, value: S) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            requires_grad: false,
        }
    }

    /// 1x1x1x1 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor::filled(Shape { n: 1, c: 1, h: 1, w: 1 }, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// Mark this tensor as a gradient leaf. Identity is preserved so that
    /// gradients looked up after backward refer to the same value.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Contiguous (H*W) slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    /// Same data, new identity, gradient tracking off.
    pub fn detach(&self) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place access for parameter updates. Copies on write if the buffer
    /// is still shared (e.g. a tape from the previous step is alive).
    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data)
    }

    /// Element-precision conversion (through f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64_lossy())).collect()),
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        let s = Shape::new(1, 1, 2, 2).unwrap();
        assert!(Tensor::<f32>::from_vec(s, vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(s, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn clone_preserves_identity_detach_does_not() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1).unwrap());
        assert_eq!(t.clone().id(), t.id());
        assert_ne!(t.detach().id(), t.id());
    }

    #[test]
    fn plane_slices_are_contiguous() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2).unwrap(), |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64
        });
        assert_eq!(t.plane(1, 2), &[1200.0, 1201.0, 1210.0, 1211.0]);
    }
}
