//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: dense row-major storage, a tape-based
//! [`Graph`] recording forward operations, and exact reverse-mode gradients.
//! It is generic over the element type so the same model code can run in
//! 32-bit (default) and 64-bit (oracle checks, finite differences).

mod graph;
mod params;

pub use graph::{Graph, Var};
pub use params::{Param, ParamSet};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type the engine is generic over. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Dense tensor with row-major storage. Rank 0 (scalar), 1, and 2 are used.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidArg(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let s = F::from_f64(std);
        let data = (0..numel).map(|_| F::sample_normal(rng) * s).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> F {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select rows by index into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![indices.len(), c], data }
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| Scalar::to_f64(v)).collect(),
        }
    }

    pub fn to_f32_tensor(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| Scalar::to_f32(v)).collect(),
        }
    }
}

/// `out += a @ b` for row-major `a: [m,k]`, `b: [k,n]`.
///
/// Rows of the output are independent, so the row loop is parallelized for
/// large products; per-element accumulation order stays fixed, keeping
/// results bit-identical regardless of thread count. The k dimension is
/// processed in blocks so the touched slice of `b` stays cache-resident
/// across a band of output rows.
pub(crate) fn matmul_acc<F: Scalar>(
    out: &mut [F],
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);

    const KB: usize = 32; // k-block: KB * n floats of b per pass
    let band_job = |(band_idx, out_band): (usize, &mut [F])| {
        let row0 = band_idx * band_rows(n);
        let rows = out_band.len() / n;
        let mut k0 = 0;
        while k0 < k {
            let k1 = (k0 + KB).min(k);
            for r in 0..rows {
                let i = row0 + r;
                let out_row = &mut out_band[r * n..(r + 1) * n];
                let a_row = &a[i * k..(i + 1) * k];
                for kk in k0..k1 {
                    let aik = a_row[kk];
                    if aik == F::zero() {
                        continue;
                    }
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                        *o = *o + aik * bv;
                    }
                }
            }
            k0 = k1;
        }
    };

    let band = band_rows(n) * n;
    if m * n * k >= 1 << 18 && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(band).enumerate().for_each(band_job);
    } else {
        out.chunks_mut(band).enumerate().for_each(band_job);
    }
}

/// Rows per parallel band: enough that the b-block is reused, small enough
/// to split across workers.
fn band_rows(n: usize) -> usize {
    (4096 / n.max(1)).clamp(4, 64)
}

/// `out += a^T @ b` for `a: [k,m]`, `b: [k,n]`, out `[m,n]`.
pub(crate) fn matmul_tn_acc<F: Scalar>(
    out: &mut [F],
    a: &[F],
    b: &[F],
    k: usize,
    m: usize,
    n: usize,
) {
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aik) in a_row.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out += a @ b^T` for `a: [m,k]`, `b: [n,k]`, out `[m,n]`.
pub(crate) fn matmul_nt_acc<F: Scalar>(
    out: &mut [F],
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(out.len(), m * n);
    let row_job = |(i, out_row): (usize, &mut [F])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    };
    if m * n * k >= 1 << 18 && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_job);
    }
}

/// Numerically stable softmax over a slice, in place.
pub(crate) fn softmax_inplace<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}
