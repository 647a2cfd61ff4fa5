use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
///
/// Training runs on `f32`; `f64` exists so finite-difference checks can
/// evaluate the exact same graph code at higher precision.
pub trait Element: Float + Debug + Default + Send + Sync + Sum + 'static {
    fn of_f32(v: f32) -> Self;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Element for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} must be non-empty with entries >= 1"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} holds {n} elements but data has {len}"
        )));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Self::new(shape, data, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n], false).expect("full: shape entries must be >= 1")
    }

    pub fn scalar(value: E) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<E>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.data.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-type conversion; gradient buffers are dropped.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Slice `index` along the leading axis, e.g. one image of a batch.
    pub fn select(&self, index: usize) -> Tensor<E> {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Concatenates equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch(format!(
                    "stack of {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    /// Bit-level equality of shape and data (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_contract() {
        let t = Tensor::<f32>::new(&[2, 2], vec![1., 2., 3., 4.], false).unwrap();
        assert_eq!(t.numel(), 4);
        assert!(t.grad().is_none());
        assert!(matches!(
            Tensor::<f32>::new(&[3], vec![0., 0.], false),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(
            Tensor::<f32>::new(&[1], vec![5.0], true).unwrap().sum(),
            5.0
        );
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Tensor::<f32>::new(&[0], vec![], false).is_err());
        assert!(Tensor::<f32>::new(&[], vec![], false).is_err());
    }

    #[test]
    fn stack_and_select() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1., 2.]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![3., 4.]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.select(1).data(), &[3., 4.]);
    }
}
