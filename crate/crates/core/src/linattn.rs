//! Non-causal generalized linear attention.
//!
//! When the per-token gate mask factors as `Ã = F Gᵀ`, the masked form
//! `((C Bᵀ) ⊙ Ã) X` collapses to linear attention `f′(X) g′(X)ᵀ X` with
//! Kronecker-product feature maps `f′(X_i) = C_i ⊗ F_i`, `g′(X_j) = B_j ⊗ G_j`
//! (and their per-channel `vec(C_i · F_i)` generalization). This module
//! provides those constructions, the linear and normalized linear attention
//! kernels, the two-branch MLP feature maps that replace the explicit
//! constructions in a trained block, and the block itself.

use rand::Rng;

use crate::block::{post_mix, BlockFlags};
use crate::error::{Error, Result};
use crate::numerics::{
    add_row_bias, dense_matmul, gaussian_from, gemm, layer_norm_rows, leaky_relu, positive_activation,
    Matrix, Seed,
};
use crate::oracle::DenseMask;
use crate::ssm::GateSet;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Low-rank separable gate factors `Ã = F Gᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGateFactors {
    pub f: Matrix,
    pub g: Matrix,
}

impl LowRankGateFactors {
    pub fn new(f: Matrix, g: Matrix) -> Result<Self> {
        if f.shape() != g.shape() || f.cols() == 0 {
            return Err(Error::shape(
                "LowRankGateFactors::new",
                format!("f {:?}, g {:?}, rank must be ≥ 1", f.shape(), g.shape()),
            ));
        }
        Ok(LowRankGateFactors { f, g })
    }

    pub fn rank(&self) -> usize {
        self.f.cols()
    }

    pub fn mask(&self) -> DenseMask {
        DenseMask::low_rank(self.f.clone(), self.g.clone()).expect("shapes checked at construction")
    }
}

/// One factor pair per state channel: `Ã_u = F_u G_uᵀ`, each `n×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerChannelGateFactors {
    pub f: Vec<Matrix>,
    pub g: Vec<Matrix>,
}

impl PerChannelGateFactors {
    pub fn new(f: Vec<Matrix>, g: Vec<Matrix>) -> Result<Self> {
        let shape = f.first().map(Matrix::shape);
        if f.is_empty()
            || f.len() != g.len()
            || f.iter().chain(&g).any(|m| Some(m.shape()) != shape)
            || shape.map_or(true, |(_, r)| r == 0)
        {
            return Err(Error::shape(
                "PerChannelGateFactors::new",
                "factor stacks must be non-empty with one common n×r shape",
            ));
        }
        Ok(PerChannelGateFactors { f, g })
    }

    pub fn mask(&self) -> DenseMask {
        DenseMask::per_channel(&self.f, &self.g).expect("shapes checked at construction")
    }

    /// Token `i`'s `d′×r` block `F_{:i:}`.
    fn token_block(stack: &[Matrix], i: usize) -> Matrix {
        let r = stack[0].cols();
        Matrix::from_fn(stack.len(), r, |u, v| stack[u][(i, v)])
    }
}

/// `c ⊗ f`: entry `u·r + v` is `c_u f_v`.
pub fn kron_featuremap_scalar(c: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(c.len() * f.len());
    for &cu in c {
        for &fv in f {
            out.push(cu * fv);
        }
    }
    out
}

/// `vec(c · f)` for a `d′×r` matrix `f`: entry `u·r + v` is `c_u f_uv`.
pub fn kron_featuremap_vector(c: &[f64], f: &Matrix) -> Result<Vec<f64>> {
    if f.rows() != c.len() {
        return Err(Error::shape(
            "kron_featuremap_vector",
            format!("{} gate channels for a {:?} factor block", c.len(), f.shape()),
        ));
    }
    let mut out = Vec::with_capacity(f.len());
    for (u, &cu) in c.iter().enumerate() {
        for &fv in f.row(u) {
            out.push(cu * fv);
        }
    }
    Ok(out)
}

/// Row-wise [`kron_featuremap_scalar`]: `n×d′` and `n×r` to `n×(d′·r)`.
pub fn kron_rows(c: &Matrix, f: &Matrix) -> Result<Matrix> {
    if c.rows() != f.rows() {
        return Err(Error::shape("kron_rows", "row counts differ"));
    }
    let data = (0..c.rows())
        .flat_map(|i| kron_featuremap_scalar(c.row(i), f.row(i)))
        .collect();
    Matrix::from_vec(c.rows(), c.cols() * f.cols(), data)
}

/// Row-wise [`kron_featuremap_vector`] over a per-channel factor stack.
pub fn kron_rows_vector(c: &Matrix, stack: &[Matrix]) -> Result<Matrix> {
    if stack.len() != c.cols() || stack.iter().any(|m| m.rows() != c.rows()) {
        return Err(Error::shape("kron_rows_vector", "stack does not match gates"));
    }
    let r = stack.first().map_or(0, Matrix::cols);
    let mut data = Vec::with_capacity(c.rows() * c.cols() * r);
    for i in 0..c.rows() {
        data.extend(kron_featuremap_vector(
            c.row(i),
            &PerChannelGateFactors::token_block(stack, i),
        )?);
    }
    Matrix::from_vec(c.rows(), c.cols() * r, data)
}

fn check_attention_inputs(phi_q: &Matrix, phi_k: &Matrix, v: &Matrix, op: &'static str) -> Result<()> {
    if phi_q.shape() != phi_k.shape() || phi_k.rows() != v.rows() {
        return Err(Error::shape(
            op,
            format!(
                "phi_q {:?}, phi_k {:?}, v {:?}",
                phi_q.shape(),
                phi_k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(())
}

/// `Y = phi_q (phi_kᵀ v)`: one `d″×d` aggregate, then one product per token.
pub fn linear_attention(phi_q: &Matrix, phi_k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_attention_inputs(phi_q, phi_k, v, "linear_attention")?;
    let s = gemm(phi_k, true, v, false)?;
    dense_matmul(phi_q, &s)
}

/// Finishes normalized attention from a precomputed aggregate `s = phi_kᵀ v`
/// and normalizer `z = Σ_j phi_k,j`.
pub fn finish_normalized(phi_q: &Matrix, s: &Matrix, z: &[f64]) -> Result<Matrix> {
    if s.rows() != phi_q.cols() || z.len() != phi_q.cols() {
        return Err(Error::shape("finish_normalized", "aggregate does not match features"));
    }
    let mut y = dense_matmul(phi_q, s)?;
    for i in 0..y.rows() {
        let den: f64 = phi_q.row(i).iter().zip(z).map(|(a, b)| a * b).sum();
        if !(den > crate::ssm::MIN_DENOMINATOR) {
            return Err(Error::DegenerateFeature { token: i, value: den });
        }
        for o in y.row_mut(i) {
            *o /= den;
        }
    }
    Ok(y)
}

/// `Y_i = (phi_q,i S) / (phi_q,i · z)`, so each token's weights sum to one.
pub fn normalized_linear_attention(phi_q: &Matrix, phi_k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_attention_inputs(phi_q, phi_k, v, "normalized_linear_attention")?;
    let s = gemm(phi_k, true, v, false)?;
    finish_normalized(phi_q, &s, &phi_k.col_sums())
}

/// The `n×n` effective attention matrix `phi_q phi_kᵀ`, row-normalized when
/// asked. Quadratic; meant for checks and small attention-map dumps.
pub fn dense_attention_matrix(phi_q: &Matrix, phi_k: &Matrix, normalized: bool) -> Matrix {
    let n = phi_q.rows();
    let mut m = Matrix::from_fn(n, phi_k.rows(), |i, j| {
        phi_q.row(i).iter().zip(phi_k.row(j)).map(|(a, b)| a * b).sum()
    });
    if normalized {
        for i in 0..n {
            let total: f64 = m.row(i).iter().sum();
            for v in m.row_mut(i) {
                *v /= total;
            }
        }
    }
    m
}

/// A two-branch feature map: `softplus(x W_lin + nonlinear(x))` where
/// `nonlinear(x) = LeakyReLU(LayerNorm(x W_in + b_in)) W_out + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapParams {
    pub linear: Matrix,
    pub inner: Matrix,
    pub inner_bias: Vec<f64>,
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    pub leaky_slope: f64,
    pub outer: Matrix,
    pub outer_bias: Vec<f64>,
}

impl FeatureMapParams {
    pub fn input_dim(&self) -> usize {
        self.linear.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.linear.cols()
    }

    /// Linear branch from `linear`, nonlinear inner layer drawn from `rng`,
    /// nonlinear output layer zero.
    pub fn with_linear<R: Rng>(linear: Matrix, rng: &mut R) -> Self {
        let (d, dpp) = linear.shape();
        let inner = gaussian_from(rng, d, dpp).scale(1.0 / (d as f64).sqrt());
        FeatureMapParams {
            linear,
            inner,
            inner_bias: vec![0.0; dpp],
            norm_scale: vec![1.0; dpp],
            norm_shift: vec![0.0; dpp],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            outer: Matrix::zeros(dpp, dpp),
            outer_bias: vec![0.0; dpp],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, dpp) = self.linear.shape();
        let ok = self.inner.shape() == (d, dpp)
            && self.outer.shape() == (dpp, dpp)
            && self.inner_bias.len() == dpp
            && self.norm_scale.len() == dpp
            && self.norm_shift.len() == dpp
            && self.outer_bias.len() == dpp;
        if !ok {
            return Err(Error::shape("FeatureMapParams", "branch shapes disagree"));
        }
        Ok(())
    }
}

/// The nonlinear branch alone (zero right after teacher initialization).
pub fn nonlinear_branch(x: &Matrix, p: &FeatureMapParams) -> Result<Matrix> {
    let h = add_row_bias(&dense_matmul(x, &p.inner)?, &p.inner_bias)?;
    let h = layer_norm_rows(&h, &p.norm_scale, &p.norm_shift, LAYER_NORM_EPS)?;
    let h = h.map(|u| leaky_relu(u, p.leaky_slope));
    add_row_bias(&dense_matmul(&h, &p.outer)?, &p.outer_bias)
}

/// Pre-activation sum of the two branches.
pub fn featuremap_preactivation(x: &Matrix, p: &FeatureMapParams) -> Result<Matrix> {
    p.validate()?;
    dense_matmul(x, &p.linear)?.add(&nonlinear_branch(x, p)?)
}

/// `softplus(linear(x) + nonlinear(x))`, strictly positive.
pub fn featuremap_forward(x: &Matrix, p: &FeatureMapParams) -> Result<Matrix> {
    Ok(positive_activation(&featuremap_preactivation(x, p)?))
}

/// Embeds `d×d′` teacher weights into `d×(d′·r)` linear branches:
/// the teacher occupies the first `d′` columns, the rest are zero.
pub fn embed_teacher_weights(w: &Matrix, rank: usize) -> Matrix {
    let (d, dp) = w.shape();
    Matrix::from_fn(d, dp * rank, |i, j| if j < dp { w[(i, j)] } else { 0.0 })
}

/// Query and key feature maps whose linear branches start from the teacher
/// projections and whose nonlinear branches output exactly zero.
pub fn init_from_teacher(
    wq: &Matrix,
    wk: &Matrix,
    rank: usize,
    seed: Seed,
) -> Result<(FeatureMapParams, FeatureMapParams)> {
    if rank < 1 {
        return Err(Error::Config("feature-map rank must be at least 1".into()));
    }
    if wq.shape() != wk.shape() {
        return Err(Error::shape("init_from_teacher", "W_Q and W_K shapes differ"));
    }
    let mut rng = seed.rng();
    let q = FeatureMapParams::with_linear(embed_teacher_weights(wq, rank), &mut rng);
    let k = FeatureMapParams::with_linear(embed_teacher_weights(wk, rank), &mut rng);
    Ok((q, k))
}

/// Parameters of the linear-attention mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinFusionBlockParams {
    /// `f′`, one per head.
    pub query_maps: Vec<FeatureMapParams>,
    /// `g′`, one per head.
    pub key_maps: Vec<FeatureMapParams>,
    pub w_v: Matrix,
    pub w_out: Matrix,
    /// Used only when `flags.gated`.
    pub w_gate: Matrix,
    /// Used only when `flags.rms_normed`.
    pub rms_scale: Vec<f64>,
    pub flags: BlockFlags,
}

impl LinFusionBlockParams {
    /// Initializes every head from multi-head teacher attention weights.
    ///
    /// `wq`/`wk` are `d×(heads·d′)` with head `h` in columns
    /// `h·d′..(h+1)·d′`; `wv`/`wo` are `d×d`.
    pub fn from_teacher(
        wq: &Matrix,
        wk: &Matrix,
        wv: &Matrix,
        wo: &Matrix,
        heads: usize,
        rank: usize,
        seed: Seed,
    ) -> Result<Self> {
        let d = wv.rows();
        if heads == 0 || wq.cols() % heads != 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention width {} and model width {d}",
                wq.cols()
            )));
        }
        let head_dim = wq.cols() / heads;
        let mut query_maps = Vec::with_capacity(heads);
        let mut key_maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let (q, k) = init_from_teacher(
                &wq.slice_cols(h * head_dim, head_dim),
                &wk.slice_cols(h * head_dim, head_dim),
                rank,
                seed.derive(h as u64),
            )?;
            query_maps.push(q);
            key_maps.push(k);
        }
        let mut rng = seed.derive(u64::MAX).rng();
        let w_gate = gaussian_from(&mut rng, d, d).scale(1.0 / (d as f64).sqrt());
        let p = LinFusionBlockParams {
            query_maps,
            key_maps,
            w_v: wv.clone(),
            w_out: wo.clone(),
            w_gate,
            rms_scale: vec![1.0; d],
            flags: BlockFlags::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.query_maps.len()
    }

    pub fn model_dim(&self) -> usize {
        self.w_v.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.query_maps.first().map_or(0, FeatureMapParams::feature_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        let heads = self.heads();
        if heads == 0 || heads != self.key_maps.len() || d % heads != 0 {
            return Err(Error::Config(format!(
                "{} query maps / {} key maps for model width {d}",
                heads,
                self.key_maps.len()
            )));
        }
        let dpp = self.feature_dim();
        for m in self.query_maps.iter().chain(&self.key_maps) {
            m.validate()?;
            if m.input_dim() != d || m.feature_dim() != dpp {
                return Err(Error::shape("LinFusionBlockParams", "feature map widths differ"));
            }
        }
        if self.w_v.shape() != (d, d)
            || self.w_out.shape() != (d, d)
            || self.w_gate.shape() != (d, d)
            || self.rms_scale.len() != d
        {
            return Err(Error::shape("LinFusionBlockParams", "projection shapes"));
        }
        Ok(())
    }
}

/// Rows per chunk in [`linfusion_block`]; keeps the per-chunk working set in
/// cache regardless of sequence length.
pub const BLOCK_CHUNK_ROWS: usize = 512;

/// Per head: `normalized_linear_attention(f′(x), g′(x), (x W_V)_head)`;
/// heads concatenated, optional gating / RMS norm, then `W_out`.
/// No residual connection.
///
/// Streams the tokens twice in chunks of [`BLOCK_CHUNK_ROWS`]: once to
/// accumulate `S` and `z` per head, once to finish each token.
pub fn linfusion_block(x: &Matrix, p: &LinFusionBlockParams) -> Result<Matrix> {
    p.validate()?;
    let (n, d) = x.shape();
    if d != p.model_dim() {
        return Err(Error::shape("linfusion_block", "input width differs from the block"));
    }
    let hd = p.head_dim();
    let dpp = p.feature_dim();
    let mut s = vec![Matrix::zeros(dpp, hd); p.heads()];
    let mut z = vec![vec![0.0; dpp]; p.heads()];
    for start in (0..n).step_by(BLOCK_CHUNK_ROWS) {
        let xc = x.slice_rows(start, BLOCK_CHUNK_ROWS.min(n - start));
        let v = dense_matmul(&xc, &p.w_v)?;
        for h in 0..p.heads() {
            let phi_k = featuremap_forward(&xc, &p.key_maps[h])?;
            s[h].add_assign(&gemm(&phi_k, true, &v.slice_cols(h * hd, hd), false)?)?;
            for (acc, c) in z[h].iter_mut().zip(phi_k.col_sums()) {
                *acc += c;
            }
        }
    }
    let mut out = Matrix::zeros(n, d);
    for start in (0..n).step_by(BLOCK_CHUNK_ROWS) {
        let xc = x.slice_rows(start, BLOCK_CHUNK_ROWS.min(n - start));
        let mut outs = Vec::with_capacity(p.heads());
        for h in 0..p.heads() {
            let phi_q = featuremap_forward(&xc, &p.query_maps[h])?;
            outs.push(if p.flags.normalized {
                finish_normalized(&phi_q, &s[h], &z[h]).map_err(|e| match e {
                    Error::DegenerateFeature { token, value } => {
                        Error::DegenerateFeature { token: token + start, value }
                    }
                    e => e,
                })?
            } else {
                dense_matmul(&phi_q, &s[h])?
            });
        }
        let y = post_mix(Matrix::hconcat(&outs)?, &xc, p.flags, &p.w_gate, &p.rms_scale)?;
        let y = dense_matmul(&y, &p.w_out)?;
        for i in 0..y.rows() {
            out.row_mut(start + i).copy_from_slice(y.row(i));
        }
    }
    Ok(out)
}

/// Dense `n×n` mixing matrix of one head of the block.
pub fn block_attention_matrix(x: &Matrix, p: &LinFusionBlockParams, head: usize) -> Result<Matrix> {
    let phi_q = featuremap_forward(x, &p.query_maps[head])?;
    let phi_k = featuremap_forward(x, &p.key_maps[head])?;
    Ok(dense_attention_matrix(&phi_q, &phi_k, p.flags.normalized))
}

/// Per-token hidden states `H_i = Σ_j mask_ij (B_jᵀ X_j)` of a non-causal
/// gated mixer with an arbitrary dense mask.
pub fn noncausal_hidden_states(mask: &Matrix, g: &GateSet, x: &Matrix) -> Result<Vec<Matrix>> {
    let n = g.tokens();
    if mask.shape() != (n, n) || x.rows() != n {
        return Err(Error::shape("noncausal_hidden_states", "mask/tokens/gates disagree"));
    }
    let (dp, d) = (g.state_dim(), x.cols());
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let mut h = Matrix::zeros(dp, d);
        for j in 0..n {
            let w = mask[(i, j)];
            for u in 0..dp {
                let coef = w * g.b()[(j, u)];
                for (hv, xv) in h.row_mut(u).iter_mut().zip(x.row(j)) {
                    *hv += coef * xv;
                }
            }
        }
        states.push(h);
    }
    Ok(states)
}

/// `max_i ‖H_i − H_1‖∞`.
pub fn max_state_deviation(states: &[Matrix]) -> f64 {
    match states.split_first() {
        None => 0.0,
        Some((first, rest)) => rest.iter().fold(0.0, |m, h| m.max(h.max_abs_diff(first))),
    }
}

/// The mask obtained by dropping the causal restriction while every token
/// shares one gate group: `mask_ij = ∏_{k=j+1}^{n} a_k`, the same for all `i`.
pub fn shared_gate_mask(a: &[f64]) -> Matrix {
    let n = a.len();
    Matrix::from_fn(n, n, |_, j| a[j + 1..].iter().product())
}

/// Maximum hidden-state deviation across tokens under a shared gate group.
/// Always zero: every token ends up with the same state.
pub fn shared_gate_degenerate_check(g: &GateSet, x: &Matrix) -> Result<f64> {
    let states = noncausal_hidden_states(&shared_gate_mask(g.a()), g, x)?;
    Ok(max_state_deviation(&states))
}

/// The same deviation under per-token gate groups `Ã = F Gᵀ`.
pub fn per_token_gate_deviation(factors: &LowRankGateFactors, g: &GateSet, x: &Matrix) -> Result<f64> {
    let mask = factors.mask();
    let states = noncausal_hidden_states(mask.scalar_values().expect("scalar mask"), g, x)?;
    Ok(max_state_deviation(&states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_gaussian, softplus};
    use crate::oracle::{masked_gated_attention_dense, naive_matmul, vector_gated_attention_dense};

    fn positive(n: usize, m: usize, seed: u64) -> Matrix {
        seeded_gaussian(n, m, Seed(seed)).map(softplus)
    }

    #[test]
    fn kron_scalar_examples() {
        assert_eq!(kron_featuremap_scalar(&[1.0, 0.0], &[1.0, 1.0]), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(kron_featuremap_scalar(&[2.0], &[3.0]), vec![6.0]);
    }

    #[test]
    fn kron_mixed_product_identity() {
        let v = seeded_gaussian(4, 2, Seed(1));
        let (c, b, f, g) = (v.row(0), v.row(1), v.row(2), v.row(3));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&kron_featuremap_scalar(c, f), &kron_featuremap_scalar(b, g));
        let rhs = dot(c, b) * dot(f, g);
        assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs().max(1.0));
    }

    #[test]
    fn kron_vector_collapses_and_flattens() {
        let c = [0.5, -1.0, 2.0];
        let f = [3.0, 4.0];
        let broadcast = Matrix::from_fn(3, 2, |_, v| f[v]);
        assert_eq!(
            kron_featuremap_vector(&c, &broadcast).unwrap(),
            kron_featuremap_scalar(&c, &f)
        );
        let block = seeded_gaussian(3, 2, Seed(2));
        assert_eq!(
            kron_featuremap_vector(&[1.0; 3], &block).unwrap(),
            block.as_slice().to_vec()
        );
    }

    #[test]
    fn kron_vector_matches_loop() {
        let c = seeded_gaussian(1, 3, Seed(3)).into_vec();
        let f = seeded_gaussian(3, 2, Seed(4));
        let mut expected = vec![0.0; 6];
        for u in 0..3 {
            for v in 0..2 {
                expected[u * 2 + v] = c[u] * f[(u, v)];
            }
        }
        assert_eq!(kron_featuremap_vector(&c, &f).unwrap(), expected);
        assert!(kron_featuremap_vector(&c, &seeded_gaussian(2, 2, Seed(5))).is_err());
    }

    #[test]
    fn linear_attention_examples() {
        let v = seeded_gaussian(4, 3, Seed(6));
        let eye = Matrix::identity(4);
        assert!(linear_attention(&eye, &eye, &v).unwrap().rel_err(&v) < 1e-15);
        let zero = Matrix::zeros(4, 4);
        assert_eq!(linear_attention(&eye, &zero, &v).unwrap(), Matrix::zeros(4, 3));
    }

    #[test]
    fn linear_attention_matches_dense_product() {
        let phi_q = seeded_gaussian(6, 4, Seed(7));
        let phi_k = seeded_gaussian(6, 4, Seed(8));
        let v = seeded_gaussian(6, 3, Seed(9));
        let y = linear_attention(&phi_q, &phi_k, &v).unwrap();
        let dense = naive_matmul(&naive_matmul(&phi_q, &phi_k.transpose()), &v);
        assert!(y.rel_err(&dense) <= 1e-12);
        assert!(linear_attention(&phi_q, &phi_k, &Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn normalized_preserves_constants() {
        let n = 9;
        let mu = [2.5, -0.5];
        let v = Matrix::from_fn(n, 2, |_, j| mu[j]);
        let y = normalized_linear_attention(&positive(n, 5, 10), &positive(n, 5, 11), &v).unwrap();
        for i in 0..n {
            for (a, m) in y.row(i).iter().zip(&mu) {
                assert!((a - m).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tiling_scales_unnormalized_and_fixes_normalized() {
        // Values on a coarse dyadic grid keep every sum exact, so the
        // comparisons below are bit-for-bit.
        let grid = |n, m, s| seeded_gaussian(n, m, Seed(s)).map(|v| ((v * 8.0).round().abs() + 1.0) / 8.0);
        let (phi_q, phi_k) = (grid(5, 3, 12), grid(5, 3, 13));
        let v = seeded_gaussian(5, 2, Seed(14)).map(|v| (v * 16.0).round() / 16.0);
        let k = 4;
        let (tq, tk, tv) = (phi_q.tile_rows(k), phi_k.tile_rows(k), v.tile_rows(k));

        let base = linear_attention(&phi_q, &phi_k, &v).unwrap();
        let tiled = linear_attention(&tq, &tk, &tv).unwrap();
        let base_n = normalized_linear_attention(&phi_q, &phi_k, &v).unwrap();
        let tiled_n = normalized_linear_attention(&tq, &tk, &tv).unwrap();
        for copy in 0..k {
            assert_eq!(tiled.slice_rows(copy * 5, 5), base.scale(k as f64));
            assert_eq!(tiled_n.slice_rows(copy * 5, 5), base_n);
        }
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let m = dense_attention_matrix(&positive(12, 6, 15), &positive(12, 6, 16), true);
        for total in m.row_sums() {
            assert!((total - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn degenerate_features_are_rejected() {
        let phi = Matrix::zeros(3, 2);
        let v = Matrix::filled(3, 1, 1.0);
        assert!(matches!(
            normalized_linear_attention(&phi, &phi, &v),
            Err(Error::DegenerateFeature { token: 0, .. })
        ));
    }

    #[test]
    fn prop2_construction_matches_masked_form() {
        let (n, d, dp, r) = (7, 3, 2, 3);
        let x = seeded_gaussian(n, d, Seed(17));
        let c = seeded_gaussian(n, dp, Seed(18));
        let b = seeded_gaussian(n, dp, Seed(19));
        let factors =
            LowRankGateFactors::new(seeded_gaussian(n, r, Seed(20)), seeded_gaussian(n, r, Seed(21)))
                .unwrap();
        let dense = masked_gated_attention_dense(&c, &b, &x, &factors.mask()).unwrap();
        let y = linear_attention(
            &kron_rows(&c, &factors.f).unwrap(),
            &kron_rows(&b, &factors.g).unwrap(),
            &x,
        )
        .unwrap();
        assert!(y.rel_err(&dense) <= 1e-10);
    }

    #[test]
    fn prop3_construction_matches_per_channel_form() {
        let (n, d, dp, r) = (5, 3, 2, 2);
        let x = seeded_gaussian(n, d, Seed(22));
        let c = seeded_gaussian(n, dp, Seed(23));
        let b = seeded_gaussian(n, dp, Seed(24));
        let f: Vec<Matrix> = (0..dp).map(|u| seeded_gaussian(n, r, Seed(30 + u as u64))).collect();
        let g: Vec<Matrix> = (0..dp).map(|u| seeded_gaussian(n, r, Seed(40 + u as u64))).collect();
        let factors = PerChannelGateFactors::new(f, g).unwrap();
        let masks = match factors.mask() {
            DenseMask::NoncausalPerChannel(m) => m,
            _ => unreachable!(),
        };
        let dense = vector_gated_attention_dense(&c, &b, &x, &masks).unwrap();
        let y = linear_attention(
            &kron_rows_vector(&c, &factors.f).unwrap(),
            &kron_rows_vector(&b, &factors.g).unwrap(),
            &x,
        )
        .unwrap();
        assert!(y.rel_err(&dense) <= 1e-10);
    }

    fn random_block(d: usize, dp: usize, rank: usize, heads: usize, seed: u64) -> LinFusionBlockParams {
        let s = Seed(seed);
        LinFusionBlockParams::from_teacher(
            &seeded_gaussian(d, dp * heads, s.derive(1)).scale(0.5),
            &seeded_gaussian(d, dp * heads, s.derive(2)).scale(0.5),
            &seeded_gaussian(d, d, s.derive(3)),
            &seeded_gaussian(d, d, s.derive(4)),
            heads,
            rank,
            s.derive(5),
        )
        .unwrap()
    }

    fn perturb(p: &mut FeatureMapParams, seed: u64) {
        let (r, c) = p.outer.shape();
        p.outer = seeded_gaussian(r, c, Seed(seed)).scale(0.3);
        p.outer_bias = seeded_gaussian(1, c, Seed(seed + 1)).scale(0.1).into_vec();
    }

    #[test]
    fn fresh_feature_map_is_linear_branch_only() {
        let p = random_block(6, 2, 3, 1, 50);
        let x = seeded_gaussian(8, 6, Seed(51));
        let nl = nonlinear_branch(&x, &p.query_maps[0]).unwrap();
        assert!(nl.as_slice().iter().all(|&v| v == 0.0));
        let phi = featuremap_forward(&x, &p.query_maps[0]).unwrap();
        let lin = positive_activation(&dense_matmul(&x, &p.query_maps[0].linear).unwrap());
        assert_eq!(phi, lin);
        let at_zero = featuremap_forward(&Matrix::zeros(3, 6), &p.key_maps[0]).unwrap();
        assert!(at_zero.as_slice().iter().all(|&v| v == 2f64.ln()));
    }

    #[test]
    fn perturbed_feature_maps_stay_positive() {
        let mut checked = 0;
        for s in 0..40u64 {
            let mut p = random_block(8, 4, 4, 1, 60 + s).query_maps.remove(0);
            perturb(&mut p, 1000 + s);
            p.leaky_slope = 0.2;
            let x = seeded_gaussian(1600, 8, Seed(2000 + s)).scale(1.0 + s as f64 / 4.0);
            let phi = featuremap_forward(&x, &p).unwrap();
            assert!(phi.as_slice().iter().all(|&v| v > 0.0));
            checked += phi.len();
        }
        assert!(checked >= 1_000_000);
    }

    #[test]
    fn rank_one_init_copies_teacher() {
        let wq = seeded_gaussian(5, 3, Seed(70));
        let wk = seeded_gaussian(5, 3, Seed(71));
        let (q, k) = init_from_teacher(&wq, &wk, 1, Seed(72)).unwrap();
        assert_eq!(q.linear, wq);
        assert_eq!(k.linear, wk);
        assert!(matches!(init_from_teacher(&wq, &wk, 0, Seed(72)), Err(Error::Config(_))));
        let (q4, _) = init_from_teacher(&wq, &wk, 4, Seed(72)).unwrap();
        assert_eq!(q4.linear.shape(), (5, 12));
        assert_eq!(q4.linear.slice_cols(0, 3), wq);
        assert!(q4.linear.slice_cols(3, 9).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deleting_zero_branch_changes_no_bit() {
        let p = random_block(8, 2, 4, 2, 80);
        let x = seeded_gaussian(10, 8, Seed(81));
        let y = linfusion_block(&x, &p).unwrap();
        // Recompute with the nonlinear branch removed entirely.
        let v = dense_matmul(&x, &p.w_v).unwrap();
        let mut outs = Vec::new();
        for h in 0..2 {
            let phi_q = positive_activation(&dense_matmul(&x, &p.query_maps[h].linear).unwrap());
            let phi_k = positive_activation(&dense_matmul(&x, &p.key_maps[h].linear).unwrap());
            outs.push(normalized_linear_attention(&phi_q, &phi_k, &v.slice_cols(h * 4, 4)).unwrap());
        }
        let expected = dense_matmul(&Matrix::hconcat(&outs).unwrap(), &p.w_out).unwrap();
        assert_eq!(y, expected);
    }

    #[test]
    fn block_preserves_constant_channels() {
        let d = 6;
        let mut p = random_block(d, 3, 2, 1, 90);
        p.w_v = Matrix::identity(d);
        p.w_out = Matrix::identity(d);
        perturb(&mut p.query_maps[0], 91);
        let mu = [1.0, -2.0, 0.5, 3.0, 0.0, -7.5];
        let x = Matrix::from_fn(11, d, |_, j| mu[j]);
        let y = linfusion_block(&x, &p).unwrap();
        for i in 0..11 {
            for (a, m) in y.row(i).iter().zip(&mu) {
                assert!((a - m).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn single_token_block_is_value_then_output() {
        let p = random_block(8, 2, 2, 2, 100);
        let x = seeded_gaussian(1, 8, Seed(101));
        let y = linfusion_block(&x, &p).unwrap();
        let expected = naive_matmul(&naive_matmul(&x, &p.w_v), &p.w_out);
        assert!(y.rel_err(&expected) <= 1e-12);
    }

    #[test]
    fn block_matches_dense_normalized_oracle() {
        let (n, d) = (8, 8);
        let mut p = random_block(d, 2, 2, 1, 110);
        perturb(&mut p.query_maps[0], 111);
        perturb(&mut p.key_maps[0], 112);
        let x = seeded_gaussian(n, d, Seed(113));
        let y = linfusion_block(&x, &p).unwrap();
        let m = block_attention_matrix(&x, &p, 0).unwrap();
        let expected = naive_matmul(&naive_matmul(&m, &naive_matmul(&x, &p.w_v)), &p.w_out);
        assert!(y.rel_err(&expected) <= 1e-10);
    }

    #[test]
    fn gated_and_rms_variants_run() {
        let mut p = random_block(8, 2, 2, 1, 120);
        let x = seeded_gaussian(5, 8, Seed(121));
        let base = linfusion_block(&x, &p).unwrap();
        p.flags.gated = true;
        p.flags.rms_normed = true;
        let varied = linfusion_block(&x, &p).unwrap();
        assert_eq!(varied.shape(), base.shape());
        assert!(varied.max_abs_diff(&base) > 0.0);
    }

    #[test]
    fn shared_gates_collapse_hidden_states() {
        let (n, d, dp) = (9, 3, 2);
        let x = seeded_gaussian(n, d, Seed(130));
        let a: Vec<f64> = (0..n).map(|i| 0.5 + 0.04 * i as f64).collect();
        let g = GateSet::new(a, positive(n, dp, 131), positive(n, dp, 132)).unwrap();
        assert_eq!(shared_gate_degenerate_check(&g, &x).unwrap(), 0.0);

        let single = GateSet::new(vec![0.5], positive(1, dp, 133), positive(1, dp, 134)).unwrap();
        assert_eq!(shared_gate_degenerate_check(&single, &x.slice_rows(0, 1)).unwrap(), 0.0);

        let factors =
            LowRankGateFactors::new(seeded_gaussian(n, n, Seed(135)), seeded_gaussian(n, n, Seed(136)))
                .unwrap();
        assert!(per_token_gate_deviation(&factors, &g, &x).unwrap() > 0.0);
    }
}
