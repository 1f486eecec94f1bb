//! Dense tensor storage and the linear-algebra kernels built on it.
//!
//! A [`Tensor`] is a row-major `Vec<f64>` plus a shape. Everything is plain
//! CPU code; the heavy paths (matrix multiply, convolution) go through the
//! deterministic blocked kernel in [`gemm`], which accumulates each output
//! element in ascending-k order so results are bit-identical across thread
//! counts and batch partitions.

mod conv;
mod gemm;
mod norms;

pub use conv::{conv2d_forward, conv2d_input_grad, conv2d_kernel_grad, Conv2dGeometry, Padding};
pub use gemm::{gemm_acc, transpose};
pub use norms::{
    conv_column_norms, matrix_norm, power_iteration_spectral, NormIndex, NormPair,
    SpectralEstimate,
};

use crate::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and flat data; validates length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rank-2 view of this tensor.
    pub fn as_matrix(&self) -> Result<MatrixView<'_>> {
        match self.shape.as_slice() {
            [r, c] => MatrixView::new(*r, *c, &self.data),
            s => Err(Error::shape(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "non-finite value {} at flat index {pos} in tensor of shape {:?}",
                self.data[pos], self.shape
            )));
        }
        Ok(())
    }
}

/// Borrowed rank-2 view: `rows x cols` over a row-major slice.
///
/// The view follows the operator convention `y = W x`: rows index outputs,
/// columns index inputs.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} view over {} values",
                data.len()
            )));
        }
        Ok(MatrixView { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `W x` for a single vector.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec: {}x{} against vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| dot(self.row(i), x))
            .collect())
    }

    /// `Wᵀ y` for a single vector.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "matvec_t: {}x{} against vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            let row = self.row(i);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        Ok(out)
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &MatrixView<'_>, b: &MatrixView<'_>) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    gemm::gemm_acc(
        out.data_mut(),
        a.data(),
        b.data(),
        a.rows(),
        a.cols(),
        b.cols(),
    );
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// p-norm for p in {1, 2, ∞} as used for attack budgets.
pub fn p_norm(v: &[f64], p: crate::sensitivity::InputNorm) -> f64 {
    use crate::sensitivity::InputNorm;
    match p {
        InputNorm::L1 => l1_norm(v),
        InputNorm::L2 => l2_norm(v),
        InputNorm::LInf => linf_norm(v),
    }
}
