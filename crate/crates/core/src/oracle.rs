//! Quadratic-cost reference forms of every mixer.
//!
//! Nothing here calls into [`crate::numerics::gemm`]: all sums are naive
//! loops with `i` (output token) outer and `j` (source token) inner, so the
//! summation order is fixed and the scans/linear forms elsewhere are checked
//! against an independent evaluation.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A materialized token-mixing mask.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseMask {
    /// Lower-triangular cumulative products of scalar forget gates.
    CausalCumprod(Matrix),
    /// `F Gᵀ` for stored low-rank factors (`n×r` each).
    NoncausalLowRank { f: Matrix, g: Matrix, values: Matrix },
    /// One `n×n` mask per state channel.
    NoncausalPerChannel(Vec<Matrix>),
}

impl DenseMask {
    pub fn low_rank(f: Matrix, g: Matrix) -> Result<Self> {
        if f.shape() != g.shape() {
            return Err(Error::shape(
                "DenseMask::low_rank",
                format!("factor shapes {:?} vs {:?}", f.shape(), g.shape()),
            ));
        }
        let values = outer_products(&f, &g);
        Ok(DenseMask::NoncausalLowRank { f, g, values })
    }

    pub fn per_channel(f: &[Matrix], g: &[Matrix]) -> Result<Self> {
        if f.len() != g.len() {
            return Err(Error::shape("DenseMask::per_channel", "factor stack lengths differ"));
        }
        let mut masks = Vec::with_capacity(f.len());
        for (fu, gu) in f.iter().zip(g) {
            if fu.shape() != gu.shape() {
                return Err(Error::shape("DenseMask::per_channel", "factor shapes differ"));
            }
            masks.push(outer_products(fu, gu));
        }
        Ok(DenseMask::NoncausalPerChannel(masks))
    }

    /// The scalar mask, or `None` for the per-channel form.
    pub fn scalar_values(&self) -> Option<&Matrix> {
        match self {
            DenseMask::CausalCumprod(m) => Some(m),
            DenseMask::NoncausalLowRank { values, .. } => Some(values),
            DenseMask::NoncausalPerChannel(_) => None,
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            DenseMask::CausalCumprod(m) => m.rows(),
            DenseMask::NoncausalLowRank { values, .. } => values.rows(),
            DenseMask::NoncausalPerChannel(ms) => ms.first().map_or(0, Matrix::rows),
        }
    }
}

/// `[Σ_v f_iv g_jv]_ij` by explicit loops.
fn outer_products(f: &Matrix, g: &Matrix) -> Matrix {
    Matrix::from_fn(f.rows(), g.rows(), |i, j| {
        let mut s = 0.0;
        for v in 0..f.cols() {
            s += f[(i, v)] * g[(j, v)];
        }
        s
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Multi-head free softmax attention `softmax(QKᵀ/√d′)V`.
pub fn softmax_attention(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    let (n, d) = x.shape();
    if wq.rows() != d || wk.rows() != d || wv.rows() != d || wq.cols() != wk.cols() {
        return Err(Error::shape(
            "softmax_attention",
            format!(
                "x {:?}, wq {:?}, wk {:?}, wv {:?}",
                x.shape(),
                wq.shape(),
                wk.shape(),
                wv.shape()
            ),
        ));
    }
    let q = naive_matmul(x, wq);
    let k = naive_matmul(x, wk);
    let v = naive_matmul(x, wv);
    let scale = 1.0 / (wq.cols() as f64).sqrt();
    let mut y = Matrix::zeros(n, wv.cols());
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            logits[j] = dot(q.row(i), k.row(j)) * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for j in 0..n {
            let w = logits[j] / total;
            for (o, vv) in y.row_mut(i).iter_mut().zip(v.row(j)) {
                *o += w * vv;
            }
        }
    }
    Ok(y)
}

pub(crate) fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "naive_matmul inner dimension");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let aik = a[(i, k)];
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.row(k)) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `Ã_ij = ∏_{k=j+1}^{i} a_k` for `j ≤ i` (empty product 1 on the diagonal),
/// zero above it. `a[0]` never enters a product.
pub fn cumprod_causal_mask(a: &[f64]) -> DenseMask {
    let n = a.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let mut prod = 1.0;
        for j in (0..=i).rev() {
            m[(i, j)] = prod;
            prod *= a[j];
        }
    }
    DenseMask::CausalCumprod(m)
}

/// Dense mask of the two-directional scan.
///
/// Below the diagonal it is the forward cumulative product; above it, the
/// right-to-left product `∏_{k=i}^{j-1} a_bwd[k]`; the diagonal is 1.
pub fn bidirectional_cumprod_mask(a_fwd: &[f64], a_bwd: &[f64]) -> Result<Matrix> {
    if a_fwd.len() != a_bwd.len() {
        return Err(Error::shape("bidirectional_cumprod_mask", "gate lengths differ"));
    }
    let n = a_fwd.len();
    let mut m = match cumprod_causal_mask(a_fwd) {
        DenseMask::CausalCumprod(m) => m,
        _ => unreachable!(),
    };
    for i in 0..n {
        let mut prod = 1.0;
        for j in i + 1..n {
            prod *= a_bwd[j - 1];
            m[(i, j)] = prod;
        }
    }
    Ok(m)
}

/// `M = (C Bᵀ) ⊙ Ã` for a scalar mask.
pub fn effective_attention(c: &Matrix, b: &Matrix, mask: &Matrix) -> Result<Matrix> {
    let n = c.rows();
    if b.shape() != c.shape() || mask.shape() != (n, n) {
        return Err(Error::shape(
            "effective_attention",
            format!("c {:?}, b {:?}, mask {:?}", c.shape(), b.shape(), mask.shape()),
        ));
    }
    Ok(Matrix::from_fn(n, n, |i, j| dot(c.row(i), b.row(j)) * mask[(i, j)]))
}

/// `Y = M X` with naive loops.
pub fn apply_attention(m: &Matrix, x: &Matrix) -> Result<Matrix> {
    if m.cols() != x.rows() {
        return Err(Error::shape("apply_attention", "mask columns != tokens"));
    }
    let mut y = Matrix::zeros(m.rows(), x.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let w = m[(i, j)];
            for (o, xv) in y.row_mut(i).iter_mut().zip(x.row(j)) {
                *o += w * xv;
            }
        }
    }
    Ok(y)
}

/// `Y = ((C Bᵀ) ⊙ Ã) X`, the dense form of the scalar-gated state space model.
pub fn masked_gated_attention_dense(
    c: &Matrix,
    b: &Matrix,
    x: &Matrix,
    mask: &DenseMask,
) -> Result<Matrix> {
    let values = mask.scalar_values().ok_or_else(|| {
        Error::shape(
            "masked_gated_attention_dense",
            "per-channel mask given to the scalar form",
        )
    })?;
    if x.rows() != c.rows() {
        return Err(Error::shape("masked_gated_attention_dense", "x rows != gate rows"));
    }
    let m = effective_attention(c, b, values)?;
    apply_attention(&m, x)
}

/// `Y_i = Σ_u Σ_j c_iu Ã_uij b_ju X_j` for a per-channel mask stack.
pub fn vector_gated_attention_dense(
    c: &Matrix,
    b: &Matrix,
    x: &Matrix,
    masks: &[Matrix],
) -> Result<Matrix> {
    let (n, dp) = c.shape();
    if b.shape() != (n, dp) || x.rows() != n || masks.len() != dp {
        return Err(Error::shape(
            "vector_gated_attention_dense",
            format!(
                "c {:?}, b {:?}, x {:?}, {} masks",
                c.shape(),
                b.shape(),
                x.shape(),
                masks.len()
            ),
        ));
    }
    if masks.iter().any(|m| m.shape() != (n, n)) {
        return Err(Error::shape("vector_gated_attention_dense", "mask is not n×n"));
    }
    let mut y = Matrix::zeros(n, x.cols());
    for i in 0..n {
        for j in 0..n {
            let mut w = 0.0;
            for (u, mask) in masks.iter().enumerate() {
                w += c[(i, u)] * mask[(i, j)] * b[(j, u)];
            }
            for (o, xv) in y.row_mut(i).iter_mut().zip(x.row(j)) {
                *o += w * xv;
            }
        }
    }
    Ok(y)
}

/// Expected output when every token of the input equals `mu`:
/// `Y_ij = μ_j Σ_k M_ik`.
pub fn constant_channel_response(m: &Matrix, mu: &[f64]) -> Matrix {
    let sums: Vec<f64> = (0..m.rows())
        .map(|i| {
            let mut s = 0.0;
            for v in m.row(i) {
                s += v;
            }
            s
        })
        .collect();
    Matrix::from_fn(m.rows(), mu.len(), |i, j| mu[j] * sums[i])
}
