//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Tape`], which owns every intermediate value and hands out copyable
//! [`Var`] handles. Only scalar–tensor broadcasting is implicit; row-wise
//! bias addition is its own explicit op.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_fn, GradCheck};
pub use tape::{Gradients, Op, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// Norm epsilon inside `sqrt(mean(x^2) + eps)`.
pub const NORM_EPS: f64 = 1e-6;
/// Guard used when dividing by data-dependent magnitudes.
pub const DIV_EPS: f64 = 1e-8;
/// Tolerance for probability-vector checks.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a leaf tensor, rejecting shape/length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for op outputs; callers guarantee the length.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_raw(shape.to_vec(), data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have at least one axis")
    }

    /// Number of last-axis vectors (product of leading dims).
    pub fn outer(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self::from_raw(shape, self.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c] = self.dims2()?;
        if start >= end || end > n {
            return Err(shape_err!("row slice {start}..{end} out of 0..{n}"));
        }
        Ok(Tensor::from_raw(
            vec![end - start, c],
            self.data[start * c..end * c].to_vec(),
        ))
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(shape_err!("expected a 2-D tensor, got {:?}", self.shape)),
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Elementwise `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "axpy")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    /// Concatenates 2-D tensors along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let c = first.dims2()?[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let [m, pc] = p.dims2()?;
            if pc != c {
                return Err(shape_err!("concat width mismatch: {c} vs {pc}"));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_raw(vec![rows, c], data))
    }
}
