//! Minimal dense 2-d tensor over f32 or f64.
//!
//! The whole model fits in a handful of row-major matrices, so there is no
//! need for views, strides or broadcasting. Everything that has to be
//! generic over precision goes through the `Elem` trait; f64 exists so that
//! gradients can be checked against finite differences without float32
//! round-off drowning the signal.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Scalar element of model parameters and activations.
pub trait Elem:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32 slice"))
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64 slice"))
    }
}

/// On-disk element type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Row-major matrix. A vector is a 1 x n or n x 1 tensor by convention of
/// the caller; the model only ever uses matrices and per-row slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Elem> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows_in: &[Vec<f64>]) -> Self {
        let rows = rows_in.len();
        let cols = rows_in.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows * cols);
        for r in rows_in {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend(r.iter().map(|&v| F::from_f64(v)));
        }
        Tensor { rows, cols, data }
    }

    /// Gaussian init with the given standard deviation. Draws are made in
    /// f64 and then narrowed, so f32 and f64 models built from the same
    /// seed hold the same values up to rounding.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let z: f64 = StandardNormal.sample(rng);
            data.push(F::from_f64(z * std));
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }

    /// y = W x for row-major W (rows x cols), x of length cols.
    pub fn matvec(&self, x: &[F], y: &mut [F]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (o, yo) in y.iter_mut().enumerate() {
            let w = self.row(o);
            let mut acc = F::zero();
            for i in 0..self.cols {
                acc += w[i] * x[i];
            }
            *yo = acc;
        }
    }

    /// y = W^T x for row-major W (rows x cols), x of length rows.
    pub fn matvec_t(&self, x: &[F], y: &mut [F]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        y.fill(F::zero());
        for (o, &xo) in x.iter().enumerate() {
            let w = self.row(o);
            for i in 0..self.cols {
                y[i] += w[i] * xo;
            }
        }
    }

    /// W += a ⊗ b (outer product), a of length rows, b of length cols.
    pub fn add_outer(&mut self, a: &[F], b: &[F]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (o, &ao) in a.iter().enumerate() {
            let w = self.row_mut(o);
            for i in 0..b.len() {
                w[i] += ao * b[i];
            }
        }
    }

    pub fn convert<G: Elem>(&self) -> Tensor<G> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matvec_matches_hand_product() {
        let w = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mut y = vec![0.0; 3];
        w.matvec(&[10.0, 100.0], &mut y);
        assert_eq!(y, vec![210.0, 430.0, 650.0]);

        let mut yt = vec![0.0; 2];
        w.matvec_t(&[1.0, 1.0, 1.0], &mut yt);
        assert_eq!(yt, vec![9.0, 12.0]);
    }

    #[test]
    fn outer_product_accumulates() {
        let mut w = Tensor::<f64>::zeros(2, 3);
        w.add_outer(&[2.0, -1.0], &[1.0, 0.0, 3.0]);
        w.add_outer(&[1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!(w.row(0), &[3.0, 1.0, 7.0]);
        assert_eq!(w.row(1), &[0.0, 1.0, -2.0]);
    }

    #[test]
    fn randn_same_seed_same_values_across_dtypes() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f32> = Tensor::randn(3, 4, 0.02, &mut r1);
        let b: Tensor<f64> = Tensor::randn(3, 4, 0.02, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
