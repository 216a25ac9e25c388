//! Dense row-major matrices over a configurable float width.
//!
//! Everything in this crate is rank-2: batches are `rows x cols` matrices,
//! vectors are `1 x cols` rows, scalars are `1 x 1`. Training runs at `f32`,
//! gradient validation at `f64`; the [`Real`] trait is the switch.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Float widths the numeric stack is generic over.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// A dense row-major `rows x cols` matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(value: F) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn row_vector(data: Vec<F>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    /// Standard-normal entries drawn from `rng`, scaled by `std`.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| F::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    /// The single entry of a `1 x 1` tensor.
    pub fn item(&self) -> Result<F> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("expected scalar, got {}x{}", self.rows, self.cols)))
        }
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.as_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|x| x.as_f64() as f32)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }
}

/// `a . b` for equal-length slices, accumulated at f64.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

pub fn l2_norm<F: Real>(a: &[F]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two slices with a 1e-12 guard on the norms.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> f64 {
    let na = l2_norm(a).max(1e-12);
    let nb = l2_norm(b).max(1e-12);
    dot(a, b) / (na * nb)
}

/// Plain (non-autodiff) matrix product `a . b`.
pub fn matmul_plain<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {}x{} . {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (p, &a_ip) in a_row.iter().enumerate().take(k) {
            let b_row = b.row(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
    Ok(out)
}

/// `S[i][j] = cos(a_i, b_j)` for row collections `a: N x d`, `b: M x d`.
pub fn cosine_matrix_plain<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cosine_matrix: width {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Tensor::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, cosine(a.row(i), b.row(j)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f64>::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn cosine_self_is_one() {
        let v = [0.3f64, -1.2, 0.7];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = [1.0f64, 0.0];
        let b = [0.0f64, 2.0];
        assert_eq!(cosine(&a, &b), 0.0);
    }

    #[test]
    fn matmul_plain_identity() {
        let x = Tensor::from_vec(2, 2, vec![3.0f64, -1.0, 2.0, 0.5]).unwrap();
        let id = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul_plain(&id, &x).unwrap(), x);
    }
}
