//! Dense-tensor engine with reverse-mode differentiation.
//!
//! Layout is fixed: row-major N,C,H,W for 4-D activations, with H the time
//! axis and W the frequency axis. The production path runs in `f32`; every
//! op is generic over [`Element`] so the gradient checker can rerun the same
//! code in `f64`.
//!
//! Forward ops are recorded on a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and returns per-leaf gradients. Tensors themselves are
//! plain buffers (`Send + Sync`); a graph is single-writer, but distinct
//! graphs and model snapshots can live on distinct threads.

mod conv;
mod gradcheck;
mod graph;
mod optim;

pub use conv::ConvSpec;
pub use gradcheck::grad_check;
pub use graph::{BnMode, BnStatUpdate, Gradients, Graph, NodeId};
pub use optim::SgdMomentum;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar type the engine runs on. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array with an optional gradient buffer.
///
/// Data is held behind an `Arc`, so clones are cheap snapshots; mutation goes
/// through [`Tensor::data_mut`] which copies on write when shared.
#[derive(Clone, Debug)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![E::zero(); numel]).expect("zero tensor")
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full tensor")
    }

    pub fn scalar(value: E) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar tensor")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor::new(shape, data).expect("from_fn tensor")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the values; copies when the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[E]) {
        assert_eq!(g.len(), self.numel(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<E>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Convert the values elementwise into another element type.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|v| F::from_f64(v.as_f64())).collect();
        let mut t = Tensor::new(self.shape.clone(), data).expect("cast tensor");
        t.requires_grad = self.requires_grad;
        t
    }
}

pub(crate) fn debug_check_finite<E: Element>(what: &str, data: &[E]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "{what} produced a non-finite value"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f32>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clones_are_snapshots() {
        let mut a = Tensor::<f32>::full(vec![2], 1.0);
        let b = a.clone();
        a.data_mut()[0] = 5.0;
        assert_eq!(b.data(), &[1.0, 1.0]);
        assert_eq!(a.data(), &[5.0, 1.0]);
    }
}
