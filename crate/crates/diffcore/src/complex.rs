//! Complex matrices as split real/imaginary pairs.

use crate::error::{DiffError, Result, Shape};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Complex matrix value with separate real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(DiffError::shape("ComplexTensor::new", re.shape(), im.shape()));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            re: Tensor::zeros(rows, cols),
            im: Tensor::zeros(rows, cols),
        }
    }

    pub fn real(re: Tensor<T>) -> Self {
        let im = Tensor::zeros(re.rows(), re.cols());
        Self { re, im }
    }

    pub fn shape(&self) -> Shape {
        self.re.shape()
    }

    pub fn get(&self, r: usize, c: usize) -> (T, T) {
        (self.re.get(r, c), self.im.get(r, c))
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> Self {
        Self {
            re: self.re.transpose(),
            im: self.im.transpose().map(|v| -v),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let rr = self.re.matmul(&other.re)?;
        let ii = self.im.matmul(&other.im)?;
        let ri = self.re.matmul(&other.im)?;
        let ir = self.im.matmul(&other.re)?;
        Ok(Self {
            re: rr.zip_map(&ii, |a, b| a - b)?,
            im: ri.zip_map(&ir, |a, b| a + b)?,
        })
    }

    pub fn frobenius_norm_sq(&self) -> T {
        self.re.frobenius_norm_sq() + self.im.frobenius_norm_sq()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            re: self.re.select_rows(idx),
            im: self.im.select_rows(idx),
        }
    }

    pub fn cast<U: Real>(&self) -> ComplexTensor<U> {
        ComplexTensor {
            re: self.re.cast(),
            im: self.im.cast(),
        }
    }
}

/// A complex matrix living in a [`Graph`] as two real nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl<T: Real> Graph<T> {
    pub fn complex_leaf(&mut self, value: ComplexTensor<T>, requires_grad: bool) -> CVar {
        CVar {
            re: self.leaf(value.re, requires_grad),
            im: self.leaf(value.im, requires_grad),
        }
    }

    pub fn complex_value(&self, v: CVar) -> ComplexTensor<T> {
        ComplexTensor {
            re: self.value(v.re).clone(),
            im: self.value(v.im).clone(),
        }
    }

    /// `(a.re b.re - a.im b.im) + j (a.re b.im + a.im b.re)`.
    pub fn cmatmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.matmul(a.re, b.re)?;
        let ii = self.matmul(a.im, b.im)?;
        let ri = self.matmul(a.re, b.im)?;
        let ir = self.matmul(a.im, b.re)?;
        Ok(CVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    pub fn cadd(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.add(a.re, b.re)?,
            im: self.add(a.im, b.im)?,
        })
    }

    /// Elementwise `|z|^2`.
    pub fn abs_sq(&mut self, z: CVar) -> Result<Var> {
        let r2 = self.square(z.re)?;
        let i2 = self.square(z.im)?;
        self.add(r2, i2)
    }
}
