//! Dense row-major matrices, the handful of activations every mixer needs,
//! and seeded Gaussian sampling.
//!
//! Everything is `f64`. Products go through `matrixmultiply::dgemm`; the
//! oracles in [`crate::oracle`] use their own fixed-order loops instead so
//! that the two routes stay independent.
//!
//! # Random streams
//!
//! [`Seed`] drives a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, and Gaussian samples are drawn with
//! `rand_distr::StandardNormal`. That generator/distribution pair is the
//! determinism contract of this crate: the same seed gives bit-identical
//! streams on every platform.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(r, c)])?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// A 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// An n×1 column vector.
    pub fn col_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(self.zip_map_unchecked(other, f))
    }

    pub(crate) fn zip_map_unchecked(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column slice out of range");
        Matrix::from_fn(self.rows, len, |r, c| self[(r, start + c)])
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows, "row slice out of range");
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn hconcat(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::shape("hconcat", "row counts differ"));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    pub fn vconcat(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::shape("vconcat", "column counts differ"));
        }
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect::<Vec<_>>();
        Ok(Matrix {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max-norm relative difference `max|self - reference| / max|reference|`.
    ///
    /// Falls back to the absolute difference when the reference is all zeros.
    pub fn rel_err(&self, reference: &Matrix) -> f64 {
        assert_eq!(self.shape(), reference.shape(), "rel_err shape mismatch");
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = reference.max_abs();
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Repeats the rows `k` times: `[x; x; ...; x]`.
    pub fn tile_rows(&self, k: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len() * k);
        for _ in 0..k {
            data.extend_from_slice(&self.data);
        }
        Matrix {
            rows: self.rows * k,
            cols: self.cols,
            data,
        }
    }

    fn expect_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `op(a) * op(b)` where `op` optionally transposes, using strided dgemm.
pub fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Result<Matrix> {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != kb {
        return Err(Error::shape(
            "dense_matmul",
            format!("inner dimensions {k} and {kb} differ"),
        ));
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the strides above describe exactly the row-major buffers of
    // `a`, `b` and `out`, whose lengths match the m/k/n extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Standard matrix product `a * b`.
pub fn dense_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, false, b, false)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    row_softmax_in_place(&mut out);
    out
}

/// [`row_softmax`] without a second buffer.
pub fn row_softmax_in_place(out: &mut Matrix) {
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Softplus `ln(1 + e^u)`, strictly positive for every finite `u`.
pub fn softplus(u: f64) -> f64 {
    if u > 20.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn softplus_grad(u: f64) -> f64 {
    logistic(u)
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Element-wise [`softplus`].
///
/// Floored at the smallest normal `f64` so that very negative inputs, where
/// softplus underflows, still yield a strictly positive value.
pub fn positive_activation(u: &Matrix) -> Matrix {
    u.map(|v| softplus(v).max(f64::MIN_POSITIVE))
}

pub fn silu(u: f64) -> f64 {
    u * logistic(u)
}

pub fn leaky_relu(u: f64, slope: f64) -> f64 {
    if u >= 0.0 {
        u
    } else {
        slope * u
    }
}

/// Adds a 1×cols bias row to every row.
pub fn add_row_bias(a: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != a.cols() {
        return Err(Error::shape(
            "add_row_bias",
            format!("bias of length {} for {} columns", bias.len(), a.cols()),
        ));
    }
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Layer normalization over each row followed by a per-column affine map.
pub fn layer_norm_rows(a: &Matrix, scale: &[f64], shift: &[f64], eps: f64) -> Result<Matrix> {
    if scale.len() != a.cols() || shift.len() != a.cols() {
        return Err(Error::shape("layer_norm_rows", "affine length != columns"));
    }
    let c = a.cols() as f64;
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(scale).zip(shift) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Divides each row by its root-mean-square and applies a per-column scale.
pub fn rms_norm_rows(a: &Matrix, scale: &[f64], eps: f64) -> Result<Matrix> {
    if scale.len() != a.cols() {
        return Err(Error::shape("rms_norm_rows", "scale length != columns"));
    }
    let c = a.cols() as f64;
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / c + eps).sqrt();
        for (v, g) in row.iter_mut().zip(scale) {
            *v = *v / rms * g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// A new seed derived from this one and a stream label, so that
    /// independent components never share a stream.
    pub fn derive(self, stream: u64) -> Seed {
        // splitmix64 finalizer over the pair
        let mut z = self
            .0
            .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Standard-normal samples in row-major order from a fresh stream.
pub fn seeded_gaussian(rows: usize, cols: usize, seed: Seed) -> Matrix {
    let mut rng = seed.rng();
    gaussian_from(&mut rng, rows, cols)
}

pub fn gaussian_from<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix { rows, cols, data }
}

pub fn uniform_from<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            s
        })
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = seeded_gaussian(3, 4, Seed(1));
        let p = dense_matmul(&Matrix::identity(3), &a).unwrap();
        assert_eq!(p, a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let p = dense_matmul(&a, &b).unwrap();
        assert_eq!(p.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = seeded_gaussian(7, 5, Seed(11));
        let b = seeded_gaussian(5, 3, Seed(12));
        let p = dense_matmul(&a, &b).unwrap();
        assert!(p.rel_err(&triple_loop(&a, &b)) <= 1e-14);
    }

    #[test]
    fn transposed_gemm_variants() {
        let a = seeded_gaussian(6, 4, Seed(3));
        let b = seeded_gaussian(6, 5, Seed(4));
        let c = seeded_gaussian(5, 4, Seed(5));
        let tn = gemm(&a, true, &b, false).unwrap();
        assert!(tn.rel_err(&triple_loop(&a.transpose(), &b)) <= 1e-14);
        let nt = gemm(&a, false, &c, true).unwrap();
        assert!(nt.rel_err(&triple_loop(&a, &c.transpose())) <= 1e-14);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(dense_matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&Matrix::row_vector(&[0.0, 0.0]));
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let s = row_softmax(&Matrix::row_vector(&[0.0, 2f64.ln()]));
        assert!((s[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
        let s = row_softmax(&seeded_gaussian(4, 6, Seed(9)).scale(5.0));
        for total in s.row_sums() {
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softplus_examples() {
        assert_eq!(softplus(0.0), 2f64.ln());
        assert!((softplus(100.0) - 100.0).abs() <= 1e-12);
        let tiny = softplus(-100.0);
        assert!(tiny > 0.0);
        assert!((tiny / (-100f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_sensitive() {
        let a = seeded_gaussian(2, 2, Seed(7));
        let b = seeded_gaussian(2, 2, Seed(7));
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(
            seeded_gaussian(1, 1, Seed(1))[(0, 0)],
            seeded_gaussian(1, 1, Seed(2))[(0, 0)]
        );
    }

    #[test]
    fn gaussian_mean_is_near_zero() {
        let m = seeded_gaussian(1, 100_000, Seed(42));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert_eq!(
            Matrix::from_vec(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite("Matrix::from_vec"))
        );
    }

    #[test]
    fn layer_norm_has_zero_mean_unit_variance() {
        let x = seeded_gaussian(3, 10, Seed(2)).scale(3.0);
        let y = layer_norm_rows(&x, &[1.0; 10], &[0.0; 10], 0.0).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 10.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.0f64..50.0) {
                let s = row_softmax(&seeded_gaussian(3, 7, Seed(seed)).scale(scale));
                for total in s.row_sums() {
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                }
            }

            #[test]
            fn softplus_positive_and_monotone(u in -700.0f64..700.0, delta in 1e-6f64..10.0) {
                prop_assert!(softplus(u) > 0.0);
                prop_assert!(softplus(u + delta) >= softplus(u));
            }

            #[test]
            fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
                let s = Seed(seed);
                let a = seeded_gaussian(m, k, s.derive(0));
                let b = seeded_gaussian(k, l, s.derive(1));
                let c = seeded_gaussian(l, n, s.derive(2));
                let left = dense_matmul(&dense_matmul(&a, &b).unwrap(), &c).unwrap();
                let right = dense_matmul(&a, &dense_matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(left.rel_err(&right) <= 1e-10);
            }
        }
    }
}
