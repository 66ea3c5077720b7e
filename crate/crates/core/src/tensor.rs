//! Dense row-major `f64` tensors.

use std::fmt;

use crate::error::{Error, Result};

/// A dense n-dimensional array stored row-major.
///
/// `shape.iter().product() == data.len()` holds for every constructed value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-dimension slice.
    pub fn per_sample(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.per_sample();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.per_sample();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest element in each leading-dimension row. Ties go
    /// to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|i| {
                let row = self.sample(i);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub(crate) fn check_shape(&self, expected: &[usize], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(format!(
                "{what}: expected {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, " {head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let r = t.clone().reshape(&[2, 4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[3, 3]).is_err());
    }
}
