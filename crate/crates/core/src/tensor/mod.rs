//! Dense row-major tensors and the reverse-mode tape built on them.
//!
//! Values are immutable once constructed (`Arc` storage, cheap clones), which
//! is what makes sharing model parameters across threads and capturing
//! forward values inside backward closures safe.

pub mod checkpoint;
pub mod gemm;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct Tensor<T> {
    shape: Box<[usize]>,
    data: Arc<[T]>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.into(),
            data: data.into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Single element of a `[1]` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.into(),
            data: self.data.clone(),
        })
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.rank(),
            4,
            "expected rank-4 tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "zip_map shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Mutable view of the data, copying first if the storage is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        if Arc::get_mut(&mut self.data).is_none() {
            let owned: Vec<T> = self.data.to_vec();
            self.data = owned.into();
        }
        Arc::get_mut(&mut self.data).expect("unique after copy")
    }

    /// Elementwise `self += other`, in place when storage is unique.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(
            self.shape, other.shape,
            "accumulate shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &x| s + x)
    }

    /// Bitwise equality of shape and payload (stricter than float equality:
    /// distinguishes -0.0 from 0.0 and compares NaN bit patterns).
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: BitPattern,
    {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Cast elementwise through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}

/// Access to the raw bit pattern, for bit-exactness assertions.
pub trait BitPattern {
    fn bits(&self) -> u64;
}

impl BitPattern for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitPattern for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

/// Flat offset into an NCHW tensor.
#[inline(always)]
pub fn idx4(shape: &[usize], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + h) * shape[3] + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_views() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn accumulate_copies_shared_storage() {
        let mut a = Tensor::<f64>::full(&[4], 1.0);
        let b = a.clone();
        a.accumulate(&Tensor::full(&[4], 2.0));
        assert_eq!(a.data(), &[3.0; 4]);
        assert_eq!(b.data(), &[1.0; 4], "shared clone must stay untouched");
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::<f32>::new(&[1], vec![0.0]);
        let b = Tensor::<f32>::new(&[1], vec![-0.0]);
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
