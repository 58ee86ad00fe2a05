//! Named property suites comparing every fast mixer against its dense
//! reference form.
//!
//! Each suite draws its instances from `(seed, suite)` only, so reports are
//! reproducible; they carry errors, never timings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::block::BlockFlags;
use crate::error::Result;
use crate::linattn::{
    featuremap_forward, kron_rows, kron_rows_vector, linear_attention, linfusion_block,
    normalized_linear_attention, per_token_gate_deviation, shared_gate_degenerate_check,
    LinFusionBlockParams, LowRankGateFactors,
};
use crate::numerics::{gaussian_from, softplus, uniform_from, Matrix, Seed};
use crate::oracle::{
    apply_attention, bidirectional_cumprod_mask, cumprod_causal_mask, effective_attention,
    masked_gated_attention_dense, vector_gated_attention_dense, DenseMask,
};
use crate::shard::{
    partial_aggregate, payload_size, quadratic_baseline_payload, sharded_block_forward, split_rows,
};
use crate::ssm::{bidirectional_scan, causal_scan, normalized_causal_scan, GateSet};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub seed: Seed,
    pub duality_instances: usize,
    pub kronecker_instances: usize,
    pub per_channel_instances: usize,
    /// Instances for the remaining suites.
    pub instances: usize,
    pub shard_partitions: usize,
    pub payload_tokens: Vec<usize>,
    /// Test fixture: evaluate the "normalized" variants without their
    /// normalizer, which must make the row-sum suite fail.
    pub break_normalization: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: Seed(0),
            duality_instances: 1000,
            kronecker_instances: 1000,
            per_channel_instances: 500,
            instances: 200,
            shard_partitions: 24,
            payload_tokens: vec![256, 4096, 65536],
            break_normalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    /// Worst observed error, in the suite's own metric.
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, instances: usize, max_err: f64, tolerance: f64, detail: String) -> Self {
        SuiteReport {
            name,
            instances,
            max_err,
            tolerance,
            passed: max_err <= tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<24} instances={:<5} max_err={:.3e} tol={:.0e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_err,
            self.tolerance,
            if self.detail.is_empty() { String::new() } else { format!("  {}", self.detail) }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect()
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn render(&self) -> String {
        let mut out: String = self.suites.iter().map(|s| s.line() + "\n").collect();
        let failed = self.failed();
        if failed.is_empty() {
            out.push_str(&format!("all {} suites passed\n", self.suites.len()));
        } else {
            out.push_str(&format!("failed: {}\n", failed.join(", ")));
        }
        out
    }
}

pub const SUITE_NAMES: [&str; 10] = [
    "ssd duality",
    "kronecker scalar",
    "kronecker per-channel",
    "normalization row-sum",
    "constant channel",
    "tiling",
    "degenerate shared gates",
    "bidirectional",
    "shard algebra",
    "shard payload",
];

/// Positive forget gates in `[lo, hi)` and softplus-positive `B`, `C`.
pub fn random_gates(rng: &mut ChaCha8Rng, n: usize, dp: usize) -> GateSet {
    let a = uniform_from(rng, 1, n, 0.05, 0.99).into_vec();
    let b = gaussian_from(rng, n, dp).map(softplus);
    let c = gaussian_from(rng, n, dp).map(softplus);
    GateSet::new(a, b, c).expect("shapes agree")
}

/// A block initialized from random teacher weights, with a nonzero
/// nonlinear branch so both feature-map branches are exercised.
pub fn random_block(seed: Seed, d: usize, heads: usize, head_dim: usize, rank: usize, flags: BlockFlags) -> Result<LinFusionBlockParams> {
    let mut rng = seed.rng();
    let s = 1.0 / (d as f64).sqrt();
    let aw = heads * head_dim;
    let wq = gaussian_from(&mut rng, d, aw).scale(s);
    let wk = gaussian_from(&mut rng, d, aw).scale(s);
    let wv = gaussian_from(&mut rng, d, d).scale(s);
    let wo = gaussian_from(&mut rng, d, d).scale(s);
    let mut p = LinFusionBlockParams::from_teacher(&wq, &wk, &wv, &wo, heads, rank, seed.derive(1))?;
    for f in p.query_maps.iter_mut().chain(p.key_maps.iter_mut()) {
        let (r, c) = f.outer.shape();
        f.outer = gaussian_from(&mut rng, r, c).scale(0.2);
    }
    p.flags = flags;
    Ok(p)
}

fn all_flags() -> impl Iterator<Item = BlockFlags> {
    (0u8..8).map(|b| BlockFlags::from_bits(b).expect("three bits"))
}

/// Runs `f` over `count` instances concurrently; each gets its own stream.
fn over_instances(seed: Seed, count: usize, f: impl Fn(&mut ChaCha8Rng) -> Result<f64> + Sync) -> Result<f64> {
    let errs: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|k| f(&mut seed.derive(k as u64).rng()))
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn max_row_sum_dev(m: &Matrix) -> f64 {
    m.row_sums().iter().fold(0.0, |acc, s| acc.max((s - 1.0).abs()))
}

fn suite_seed(cfg: &VerifyConfig, k: usize) -> Seed {
    cfg.seed.derive(1000 + k as u64)
}

pub fn ssd_duality(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 0), cfg.duality_instances, |rng| {
        let (n, d, dp) = (rng.random_range(1..=64), rng.random_range(1..=8), rng.random_range(1..=4));
        let g = random_gates(rng, n, dp);
        let x = gaussian_from(rng, n, d);
        let dense = masked_gated_attention_dense(g.c(), g.b(), &x, &cumprod_causal_mask(g.a()))?;
        Ok(causal_scan(&g, &x)?.rel_err(&dense))
    })?;
    Ok(SuiteReport::new("ssd duality", cfg.duality_instances, err, 1e-10, "n≤64 d≤8 d′≤4".into()))
}

pub fn kronecker_scalar(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 1), cfg.kronecker_instances, |rng| {
        let (n, d, dp, r) = (
            rng.random_range(1..=64),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let (c, b) = (gaussian_from(rng, n, dp), gaussian_from(rng, n, dp));
        let (f, g) = (gaussian_from(rng, n, r), gaussian_from(rng, n, r));
        let x = gaussian_from(rng, n, d);
        let dense = masked_gated_attention_dense(&c, &b, &x, &DenseMask::low_rank(f.clone(), g.clone())?)?;
        Ok(linear_attention(&kron_rows(&c, &f)?, &kron_rows(&b, &g)?, &x)?.rel_err(&dense))
    })?;
    Ok(SuiteReport::new("kronecker scalar", cfg.kronecker_instances, err, 1e-10, String::new()))
}

pub fn kronecker_per_channel(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 2), cfg.per_channel_instances, |rng| {
        let (n, d, dp, r) = (
            rng.random_range(1..=64),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let (c, b) = (gaussian_from(rng, n, dp), gaussian_from(rng, n, dp));
        let fs: Vec<Matrix> = (0..dp).map(|_| gaussian_from(rng, n, r)).collect();
        let gs: Vec<Matrix> = (0..dp).map(|_| gaussian_from(rng, n, r)).collect();
        let x = gaussian_from(rng, n, d);
        let masks = match DenseMask::per_channel(&fs, &gs)? {
            DenseMask::NoncausalPerChannel(ms) => ms,
            _ => unreachable!("per_channel builds per-channel masks"),
        };
        let dense = vector_gated_attention_dense(&c, &b, &x, &masks)?;
        Ok(linear_attention(&kron_rows_vector(&c, &fs)?, &kron_rows_vector(&b, &gs)?, &x)?.rel_err(&dense))
    })?;
    Ok(SuiteReport::new("kronecker per-channel", cfg.per_channel_instances, err, 1e-10, String::new()))
}

/// The normalized mixers evaluated on an input, optionally with the
/// normalizer removed.
struct NormalizedVariants {
    fwd: GateSet,
    bwd: GateSet,
    phi_q: Matrix,
    phi_k: Matrix,
    block: LinFusionBlockParams,
    block_input: Matrix,
    broken: bool,
}

impl NormalizedVariants {
    fn draw(rng: &mut ChaCha8Rng, broken: bool) -> Result<Self> {
        let (n, dp) = (rng.random_range(2..=48), rng.random_range(1..=4));
        let fwd = random_gates(rng, n, dp);
        let bwd = random_gates(rng, n, dp);
        let dpp = rng.random_range(1..=8);
        let phi_q = gaussian_from(rng, n, dpp).map(softplus);
        let phi_k = gaussian_from(rng, n, dpp).map(softplus);
        let block = random_block(Seed(rng.random()), 8, 2, 2, 2, BlockFlags::default())?;
        let block_input = gaussian_from(rng, n, 8);
        Ok(NormalizedVariants { fwd, bwd, phi_q, phi_k, block, block_input, broken })
    }

    /// Every variant applied to `v` (`n×k`).
    fn apply(&self, v: &Matrix) -> Result<Vec<Matrix>> {
        let norm = !self.broken;
        let mut out = vec![
            if norm { normalized_causal_scan(&self.fwd, v)? } else { causal_scan(&self.fwd, v)? },
            bidirectional_scan(&self.fwd, &self.bwd, v, norm)?,
            if norm {
                normalized_linear_attention(&self.phi_q, &self.phi_k, v)?
            } else {
                linear_attention(&self.phi_q, &self.phi_k, v)?
            },
        ];
        for h in 0..self.block.heads() {
            let q = featuremap_forward(&self.block_input, &self.block.query_maps[h])?;
            let k = featuremap_forward(&self.block_input, &self.block.key_maps[h])?;
            out.push(if norm { normalized_linear_attention(&q, &k, v)? } else { linear_attention(&q, &k, v)? });
        }
        Ok(out)
    }

    fn tokens(&self) -> usize {
        self.fwd.tokens()
    }
}

pub fn normalization_row_sum(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 3), cfg.instances, |rng| {
        let v = NormalizedVariants::draw(rng, cfg.break_normalization)?;
        // applied to the identity, each mixer yields its effective n×n matrix
        let masks = v.apply(&Matrix::identity(v.tokens()))?;
        Ok(masks.iter().map(max_row_sum_dev).fold(0.0, f64::max))
    })?;
    Ok(SuiteReport::new(
        "normalization row-sum",
        cfg.instances,
        err,
        1e-8,
        "causal, bidirectional, linear, block heads".into(),
    ))
}

pub fn constant_channel(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 4), cfg.instances, |rng| {
        let v = NormalizedVariants::draw(rng, cfg.break_normalization)?;
        let width = rng.random_range(1..=8);
        let mu = gaussian_from(rng, 1, width);
        let x = mu.tile_rows(v.tokens());
        Ok(v.apply(&x)?.iter().map(|y| y.rel_err(&x)).fold(0.0, f64::max))
    })?;
    Ok(SuiteReport::new("constant channel", cfg.instances, err, 1e-10, String::new()))
}

pub fn tiling(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let count = cfg.instances.div_ceil(4).max(1);
    let err = over_instances(suite_seed(cfg, 5), count, |rng| {
        let (n, k) = (rng.random_range(1..=24), rng.random_range(2..=5));
        let x = gaussian_from(rng, n, 8);
        let tiled = x.tile_rows(k);
        let seed = Seed(rng.random());
        let mut worst = 0.0f64;
        for flags in all_flags() {
            let p = random_block(seed, 8, 2, 2, 2, flags)?;
            let base = linfusion_block(&x, &p)?.tile_rows(k);
            let y = linfusion_block(&tiled, &p)?;
            let err = if p.flags.normalized {
                y.rel_err(&base)
            } else if !p.flags.rms_normed {
                y.rel_err(&base.scale(k as f64))
            } else {
                // RMS normalization undoes any per-token rescaling
                continue;
            };
            worst = worst.max(err);
        }
        Ok(worst)
    })?;
    Ok(SuiteReport::new(
        "tiling",
        count,
        err,
        1e-12,
        "k-fold tiles: normalized unchanged, unnormalized ×k".into(),
    ))
}

pub fn degenerate_shared_gates(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let count = cfg.instances;
    let devs: Vec<(f64, f64)> = (0..count)
        .into_par_iter()
        .map(|k| {
            let rng = &mut suite_seed(cfg, 6).derive(k as u64).rng();
            let (n, d, dp) = (rng.random_range(2..=32), rng.random_range(1..=8), rng.random_range(1..=4));
            let g = random_gates(rng, n, dp);
            let x = gaussian_from(rng, n, d);
            let shared = shared_gate_degenerate_check(&g, &x)?;
            let f = uniform_from(rng, n, 2, 0.1, 1.0);
            let gg = uniform_from(rng, n, 2, 0.1, 1.0);
            let per_token = per_token_gate_deviation(&LowRankGateFactors::new(f, gg)?, &g, &x)?;
            Ok((shared, per_token))
        })
        .collect::<Result<_>>()?;
    let shared = devs.iter().map(|d| d.0).fold(0.0, f64::max);
    let per_token_min = devs.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let mut r = SuiteReport::new(
        "degenerate shared gates",
        count,
        shared,
        0.0,
        format!("per-token gates min deviation {per_token_min:.3e}"),
    );
    // the per-token contrast must actually separate states
    r.passed &= per_token_min > 0.0;
    Ok(r)
}

pub fn bidirectional(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 7), cfg.instances, |rng| {
        let (n, d, dp) = (rng.random_range(1..=48), rng.random_range(1..=8), rng.random_range(1..=4));
        let (gf, gb) = (random_gates(rng, n, dp), random_gates(rng, n, dp));
        let x = gaussian_from(rng, n, d);
        let m = bidirectional_cumprod_mask(gf.a(), gb.a())?;
        let lower = Matrix::from_fn(n, n, |i, j| if j <= i { m[(i, j)] } else { 0.0 });
        let upper = Matrix::from_fn(n, n, |i, j| if j > i { m[(i, j)] } else { 0.0 });
        let a = effective_attention(gf.c(), gf.b(), &lower)?.add(&effective_attention(gb.c(), gb.b(), &upper)?)?;
        let sums = a.row_sums();
        let a_norm = Matrix::from_fn(n, n, |i, j| a[(i, j)] / sums[i]);
        let raw = bidirectional_scan(&gf, &gb, &x, false)?.rel_err(&apply_attention(&a, &x)?);
        let norm = bidirectional_scan(&gf, &gb, &x, true)?.rel_err(&apply_attention(&a_norm, &x)?);
        Ok(raw.max(norm))
    })?;
    Ok(SuiteReport::new("bidirectional", cfg.instances, err, 1e-10, "raw and normalized".into()))
}

pub fn shard_algebra(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let err = over_instances(suite_seed(cfg, 8), cfg.shard_partitions, |rng| {
        let n = rng.random_range(8..=160);
        let shards = rng.random_range(1..=8.min(n));
        // random cut points give every shard at least one token
        let mut cuts: Vec<usize> = Vec::new();
        while cuts.len() < shards - 1 {
            let c = rng.random_range(1..n);
            if !cuts.contains(&c) {
                cuts.push(c);
            }
        }
        cuts.sort_unstable();
        let mut sizes = Vec::with_capacity(shards);
        let mut prev = 0;
        for c in cuts.into_iter().chain(std::iter::once(n)) {
            sizes.push(c - prev);
            prev = c;
        }
        let flags = BlockFlags::from_bits(rng.random_range(0..8))?;
        let p = random_block(Seed(rng.random()), 8, 2, 2, 2, flags)?;
        let x = gaussian_from(rng, n, 8);
        Ok(sharded_block_forward(&split_rows(&x, &sizes)?, &p)?.rel_err(&linfusion_block(&x, &p)?))
    })?;
    Ok(SuiteReport::new("shard algebra", cfg.shard_partitions, err, 1e-12, String::new()))
}

/// Per-head summary bytes at each token count, and the expected value.
pub fn payload_bytes(p: &LinFusionBlockParams, tokens: &[usize], seed: Seed) -> Result<(Vec<usize>, usize)> {
    let hd = p.head_dim();
    let expected = p.heads() * payload_size(hd, p.feature_dim());
    let measured = tokens
        .iter()
        .map(|&n| {
            let x = gaussian_from(&mut seed.derive(n as u64).rng(), n, p.model_dim());
            Ok(partial_aggregate(&x, p, 0)?.iter().map(|s| s.encode().len()).sum())
        })
        .collect::<Result<_>>()?;
    Ok((measured, expected))
}

pub fn shard_payload(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let (heads, head_dim) = (2, 4);
    let p = random_block(suite_seed(cfg, 9), 16, heads, head_dim, 2, BlockFlags::default())?;
    let (measured, expected) = payload_bytes(&p, &cfg.payload_tokens, suite_seed(cfg, 9))?;
    let mismatches = measured.iter().filter(|&&b| b != expected).count();
    let d = p.model_dim();
    let aw = heads * head_dim;
    let first = cfg.payload_tokens.first().copied().unwrap_or(1);
    let baseline_linear = cfg.payload_tokens.iter().all(|&n| {
        quadratic_baseline_payload(n, d, aw) * first == quadratic_baseline_payload(first, d, aw) * n
    });
    let mut r = SuiteReport::new(
        "shard payload",
        measured.len(),
        mismatches as f64,
        0.0,
        format!("{expected} bytes at n={:?}", cfg.payload_tokens),
    );
    r.passed &= baseline_linear;
    Ok(r)
}

/// Runs every suite in order.
pub fn run_verification(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let suites = [
        ssd_duality,
        kronecker_scalar,
        kronecker_per_channel,
        normalization_row_sum,
        constant_channel,
        tiling,
        degenerate_shared_gates,
        bidirectional,
        shard_algebra,
        shard_payload,
    ];
    Ok(VerifyReport {
        suites: suites.iter().map(|s| s(cfg)).collect::<Result<_>>()?,
    })
}
