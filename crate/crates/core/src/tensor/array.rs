//! Host-side dense arrays.
//!
//! `Array` is the value type for model parameters, gradients read back from a
//! tape, and wire payloads. It carries no autodiff state; differentiable
//! computation happens on a [`super::Tape`].

use crate::error::{Error, Result};
use crate::tensor::Precision;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A dense row-major array of `f64` values with an explicit shape.
///
/// In `Precision::F32` mode every element is kept rounded to `f32`
/// representability; the 64-bit backing store is the accumulation width.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(
                "Array::from_vec",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Gaussian init with the given standard deviation, rounded to storage
    /// precision.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng, precision: Precision) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| precision.store(dist.sample(rng))).collect();
        Array {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 array");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 array");
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    /// Matrix product of two rank-2 arrays, 64-bit accumulation.
    pub fn matmul(&self, other: &Array) -> Result<Array> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "Array::matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Array::from_vec(&[m, n], out)
    }

    pub fn transpose(&self) -> Array {
        assert_eq!(self.shape.len(), 2, "transpose() needs a rank-2 array");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Array {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn add(&self, other: &Array) -> Result<Array> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Array::add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Array {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Array) -> Result<Array> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Array::sub",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Array {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    /// Squared Frobenius norm (sum of squared elements).
    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every element to storage precision, in place.
    pub fn quantize(&mut self, precision: Precision) {
        precision.store_slice(&mut self.data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Array::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Array::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_result() {
        let a = Array::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Array::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Array::zeros(&[2, 3]);
        let b = Array::zeros(&[2, 3]);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn transpose_round_trips() {
        let a = Array::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
    }
}
