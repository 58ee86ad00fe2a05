//! Linear-time left-to-right and two-directional state space scans.
//!
//! The recurrence is `H_i = a_i H_{i-1} + B_iᵀ X_i`, `Y_i = C_i H_i` with
//! `H_0 = 0`. The hidden state is `d′×d`, so one pass costs `O(n·d′·d)`.
//! The normalized variants run a second recurrence `Z_i = a_i Z_{i-1} + B_i`
//! and divide each readout by `C_i · Z_i`, which is exactly the row sum of
//! the dense mixing matrix, so every token's weights sum to one.
//!
//! The backward direction runs the same recurrence from the last token to
//! the first: `H_i = a_i H_{i+1} + B_iᵀ X_i`. The two directions are merged
//! as `Y_fwd + Y_bwd - diag` so that the `j = i` term is counted once.

use crate::block::{post_mix, BlockFlags};
use crate::error::{Error, Result};
use crate::numerics::{dense_matmul, logistic, positive_activation, Matrix};

/// Denominators at or below this are treated as corrupted gates.
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// How a mixer parameterizes its forget gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateParameterization {
    /// One decay per token: `a_i ∈ ℝ` ([`GateSet`]).
    Scalar,
    /// One decay per token and state channel: `a_i ∈ ℝ^{d′}` ([`VectorGateSet`]).
    Vector,
    /// A separate gate group per output token with a low-rank mask
    /// `Ã = F Gᵀ`, non-causal (see [`crate::linattn::LowRankGateFactors`]).
    LowRankNoncausal,
}

/// Per-token scalar forget gates and the `B`/`C` projections.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    a: Vec<f64>,
    b: Matrix,
    c: Matrix,
}

impl GateSet {
    /// Checks shapes and finiteness only; see [`GateSet::validate`] for the
    /// strict range invariants.
    pub fn new(a: Vec<f64>, b: Matrix, c: Matrix) -> Result<Self> {
        if b.shape() != c.shape() || b.rows() != a.len() {
            return Err(Error::shape(
                "GateSet::new",
                format!("a[{}], b {:?}, c {:?}", a.len(), b.shape(), c.shape()),
            ));
        }
        if a.iter().any(|v| !v.is_finite()) || !b.is_finite() || !c.is_finite() {
            return Err(Error::NonFinite("GateSet::new"));
        }
        Ok(GateSet { a, b, c })
    }

    /// `a_i ∈ (0, 1)` and strictly positive `b`, `c`.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.a.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Config(format!("forget gate a[{i}] = {} not in (0,1)", self.a[i])));
        }
        if self.b.as_slice().iter().chain(self.c.as_slice()).any(|&v| v <= 0.0) {
            return Err(Error::Config("b and c must be strictly positive".into()));
        }
        Ok(())
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn tokens(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.b.cols()
    }

    /// The same gates in reverse token order.
    pub fn reversed(&self) -> GateSet {
        let n = self.tokens();
        let rev = |m: &Matrix| Matrix::from_fn(n, m.cols(), |i, u| m[(n - 1 - i, u)]);
        GateSet {
            a: self.a.iter().rev().copied().collect(),
            b: rev(&self.b),
            c: rev(&self.c),
        }
    }
}

/// Per-channel forget gates: `a` is `n×d′`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGateSet {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

/// Input-dependent gate projections.
#[derive(Debug, Clone, PartialEq)]
pub struct GateProjection {
    pub w_a: Vec<f64>,
    pub bias_a: f64,
    pub w_b: Matrix,
    pub w_c: Matrix,
}

impl GateProjection {
    pub fn model_dim(&self) -> usize {
        self.w_a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.w_b.cols()
    }

    fn check(&self, d: usize) -> Result<()> {
        let dp = self.w_b.cols();
        if self.w_a.len() != d || self.w_b.shape() != (d, dp) || self.w_c.shape() != (d, dp) {
            return Err(Error::shape(
                "GateProjection",
                format!(
                    "w_a[{}], w_b {:?}, w_c {:?} for model dim {d}",
                    self.w_a.len(),
                    self.w_b.shape(),
                    self.w_c.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Forget gate `logistic(X_i·w_a + bias)`, `B = softplus(X W_B)`,
/// `C = softplus(X W_C)`.
pub fn make_gates(x: &Matrix, p: &GateProjection) -> Result<GateSet> {
    p.check(x.cols())?;
    let a = (0..x.rows())
        .map(|i| {
            let s: f64 = x.row(i).iter().zip(&p.w_a).map(|(u, w)| u * w).sum();
            logistic(s + p.bias_a)
        })
        .collect();
    let b = positive_activation(&dense_matmul(x, &p.w_b)?);
    let c = positive_activation(&dense_matmul(x, &p.w_c)?);
    GateSet::new(a, b, c)
}

/// Hidden state `H` (`d′×d`) and normalizer state `Z` (`d′`) of a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState {
    pub h: Matrix,
    pub z: Vec<f64>,
}

impl ScanState {
    pub fn zeros(state_dim: usize, model_dim: usize) -> Self {
        ScanState {
            h: Matrix::zeros(state_dim, model_dim),
            z: vec![0.0; state_dim],
        }
    }

    /// `H ← a H + bᵀ x`, `Z ← a Z + b`.
    pub fn absorb(&mut self, a: f64, b: &[f64], x: &[f64]) {
        for (u, &bu) in b.iter().enumerate() {
            for (h, &xv) in self.h.row_mut(u).iter_mut().zip(x) {
                *h = a * *h + bu * xv;
            }
            self.z[u] = a * self.z[u] + bu;
        }
    }

    /// `c H` written into `out`.
    pub fn readout(&self, c: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (u, &cu) in c.iter().enumerate() {
            for (o, h) in out.iter_mut().zip(self.h.row(u)) {
                *o += cu * h;
            }
        }
    }

    /// `c · Z`.
    pub fn normalizer(&self, c: &[f64]) -> f64 {
        c.iter().zip(&self.z).map(|(a, b)| a * b).sum()
    }
}

fn check_scan_inputs(g: &GateSet, x: &Matrix, op: &'static str) -> Result<()> {
    if x.rows() != g.tokens() {
        return Err(Error::shape(
            op,
            format!("{} gate rows for {} tokens", g.tokens(), x.rows()),
        ));
    }
    Ok(())
}

/// Runs the recurrence and returns the raw readouts `C_i H_i` and the
/// denominators `C_i · Z_i`.
fn scan_with_normalizer(g: &GateSet, x: &Matrix) -> (Matrix, Vec<f64>) {
    let (n, d) = x.shape();
    let mut state = ScanState::zeros(g.state_dim(), d);
    let mut y = Matrix::zeros(n, d);
    let mut den = Vec::with_capacity(n);
    for i in 0..n {
        state.absorb(g.a[i], g.b.row(i), x.row(i));
        state.readout(g.c.row(i), y.row_mut(i));
        den.push(state.normalizer(g.c.row(i)));
    }
    (y, den)
}

/// Left-to-right scan `Y_i = C_i H_i`.
pub fn causal_scan(g: &GateSet, x: &Matrix) -> Result<Matrix> {
    check_scan_inputs(g, x, "causal_scan")?;
    let (n, d) = x.shape();
    let mut state = ScanState::zeros(g.state_dim(), d);
    let mut y = Matrix::zeros(n, d);
    for i in 0..n {
        state.absorb(g.a[i], g.b.row(i), x.row(i));
        state.readout(g.c.row(i), y.row_mut(i));
    }
    Ok(y)
}

/// The normalizer states `Z_i = a_i Z_{i-1} + B_i` as an `n×d′` matrix.
pub fn normalizer_scan(g: &GateSet) -> Matrix {
    let (n, dp) = g.b.shape();
    let mut z = Matrix::zeros(n, dp);
    let mut prev = vec![0.0; dp];
    for i in 0..n {
        for (u, p) in prev.iter_mut().enumerate() {
            *p = g.a[i] * *p + g.b[(i, u)];
        }
        z.row_mut(i).copy_from_slice(&prev);
    }
    z
}

fn divide_rows(mut y: Matrix, den: &[f64]) -> Result<Matrix> {
    for (i, &q) in den.iter().enumerate() {
        if !(q > MIN_DENOMINATOR) {
            return Err(Error::DegenerateGate { token: i, value: q });
        }
        for v in y.row_mut(i) {
            *v /= q;
        }
    }
    Ok(y)
}

/// Left-to-right scan with `C_i` replaced by `C_i / (C_i · Z_i)`.
pub fn normalized_causal_scan(g: &GateSet, x: &Matrix) -> Result<Matrix> {
    check_scan_inputs(g, x, "normalized_causal_scan")?;
    let (y, den) = scan_with_normalizer(g, x);
    divide_rows(y, &den)
}

/// The normalized readout gates `C′ = C / (C ⊙ Z)·1`.
pub fn normalized_readout_gates(g: &GateSet) -> Result<Matrix> {
    let z = normalizer_scan(g);
    let mut c = g.c.clone();
    for i in 0..g.tokens() {
        let den: f64 = c.row(i).iter().zip(z.row(i)).map(|(a, b)| a * b).sum();
        if !(den > MIN_DENOMINATOR) {
            return Err(Error::DegenerateGate { token: i, value: den });
        }
        for v in c.row_mut(i) {
            *v /= den;
        }
    }
    Ok(c)
}

fn reverse_rows(m: &Matrix) -> Matrix {
    let n = m.rows();
    Matrix::from_fn(n, m.cols(), |i, j| m[(n - 1 - i, j)])
}

/// Forward scan plus a right-to-left scan, with the shared diagonal term
/// removed once. When `normalized`, each token is divided by
/// `C_i·Z_fwd,i + C_i·Z_bwd,i - C_i·B_i`.
pub fn bidirectional_scan(
    g_fwd: &GateSet,
    g_bwd: &GateSet,
    x: &Matrix,
    normalized: bool,
) -> Result<Matrix> {
    check_scan_inputs(g_fwd, x, "bidirectional_scan")?;
    check_scan_inputs(g_bwd, x, "bidirectional_scan")?;
    let (y_fwd, den_fwd) = scan_with_normalizer(g_fwd, x);
    let (y_bwd_rev, den_bwd_rev) = scan_with_normalizer(&g_bwd.reversed(), &reverse_rows(x));
    let y_bwd = reverse_rows(&y_bwd_rev);
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut den = Vec::with_capacity(n);
    for i in 0..n {
        let cb: f64 = g_bwd.c.row(i).iter().zip(g_bwd.b.row(i)).map(|(a, b)| a * b).sum();
        let out = y.row_mut(i);
        for (k, o) in out.iter_mut().enumerate() {
            *o = y_fwd[(i, k)] + y_bwd[(i, k)] - cb * x[(i, k)];
        }
        den.push(den_fwd[i] + den_bwd_rev[n - 1 - i] - cb);
    }
    if normalized {
        divide_rows(y, &den)
    } else {
        Ok(y)
    }
}

/// Left-to-right scan with per-channel forget gates:
/// `H_i = diag(a_i) H_{i-1} + B_iᵀ X_i`.
pub fn causal_scan_vector(g: &VectorGateSet, x: &Matrix) -> Result<Matrix> {
    let (n, dp) = g.b.shape();
    if g.a.shape() != (n, dp) || g.c.shape() != (n, dp) || x.rows() != n {
        return Err(Error::shape("causal_scan_vector", "gate and token shapes differ"));
    }
    let d = x.cols();
    let mut h = Matrix::zeros(dp, d);
    let mut y = Matrix::zeros(n, d);
    for i in 0..n {
        for u in 0..dp {
            let (a, b) = (g.a[(i, u)], g.b[(i, u)]);
            for (hv, &xv) in h.row_mut(u).iter_mut().zip(x.row(i)) {
                *hv = a * *hv + b * xv;
            }
        }
        let out = y.row_mut(i);
        for u in 0..dp {
            let c = g.c[(i, u)];
            for (o, hv) in out.iter_mut().zip(h.row(u)) {
                *o += c * hv;
            }
        }
    }
    Ok(y)
}

/// A two-directional scan mixer with its own value/output projections,
/// covering the ablation ladder from the full gated/RMS-normed block to
/// the normalized variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlockParams {
    pub fwd: GateProjection,
    /// Only its forget-gate part is used when `shared_bc` is set.
    pub bwd: GateProjection,
    pub shared_bc: bool,
    pub w_v: Matrix,
    pub w_out: Matrix,
    pub w_gate: Matrix,
    pub rms_scale: Vec<f64>,
    pub flags: BlockFlags,
}

impl SsmBlockParams {
    pub fn model_dim(&self) -> usize {
        self.w_v.rows()
    }

    fn backward_projection(&self) -> GateProjection {
        if self.shared_bc {
            GateProjection {
                w_a: self.bwd.w_a.clone(),
                bias_a: self.bwd.bias_a,
                w_b: self.fwd.w_b.clone(),
                w_c: self.fwd.w_c.clone(),
            }
        } else {
            self.bwd.clone()
        }
    }

    /// Gate sets for both directions.
    pub fn gates(&self, x: &Matrix) -> Result<(GateSet, GateSet)> {
        Ok((make_gates(x, &self.fwd)?, make_gates(x, &self.backward_projection())?))
    }
}

/// `post_mix(bidirectional_scan(x W_v)) W_out`.
pub fn ssm_block(x: &Matrix, p: &SsmBlockParams) -> Result<Matrix> {
    let (g_fwd, g_bwd) = p.gates(x)?;
    let v = dense_matmul(x, &p.w_v)?;
    let y = bidirectional_scan(&g_fwd, &g_bwd, &v, p.flags.normalized)?;
    let y = post_mix(y, x, p.flags, &p.w_gate, &p.rms_scale)?;
    dense_matmul(&y, &p.w_out)
}
