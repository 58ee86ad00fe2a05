//! Forward-time scaling of the three mixers.
//!
//! Memory is reported from an allocation model: the bytes of the mixing
//! buffers each method must hold at once, excluding the `O(n)` inputs,
//! projections and outputs that every method shares.
//!
//! - softmax attention: the `n×n` score matrix, `8n²` bytes;
//! - linear-attention block: per head `S` (`d″×d_h`) and `z` (`d″`);
//! - causal scan: `H` (`d′×d`) and `Z` (`d′`).

use std::time::Instant;

use crate::error::{Error, Result};
use crate::linattn::{linfusion_block, LinFusionBlockParams};
use crate::numerics::{gaussian_from, gemm, row_softmax_in_place, seeded_gaussian, softplus, uniform_from, Matrix, Seed};
use crate::ssm::{causal_scan, GateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixerKind {
    Softmax,
    LinFusion,
    Scan,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Softmax => "softmax",
            MixerKind::LinFusion => "linfusion",
            MixerKind::Scan => "scan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(MixerKind::Softmax),
            "linfusion" => Ok(MixerKind::LinFusion),
            "scan" => Ok(MixerKind::Scan),
            _ => Err(Error::Config(format!("unknown mixer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// The allocation model exceeds the budget; larger sizes are skipped.
    OutOfMemory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mixer: MixerKind,
    pub n: usize,
    /// Median over the timed repeats; `None` when not run.
    pub wall_time_s: Option<f64>,
    pub peak_extra_bytes: u64,
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// `(mixer, ascending token counts)`.
    pub plan: Vec<(MixerKind, Vec<usize>)>,
    /// Model width.
    pub d: usize,
    /// Per-head query/key width (softmax, linear attention) and scan state width.
    pub head_dim: usize,
    pub heads: usize,
    pub rank: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Largest modeled auxiliary allocation attempted.
    pub aux_budget_bytes: u64,
    pub seed: Seed,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            plan: vec![
                (MixerKind::Softmax, (10..=13).map(|k| 1 << k).collect()),
                (MixerKind::LinFusion, (12..=16).map(|k| 1 << k).collect()),
                (MixerKind::Scan, (12..=16).map(|k| 1 << k).collect()),
            ],
            d: 32,
            head_dim: 8,
            heads: 4,
            rank: 4,
            repeats: 5,
            warmup: 1,
            aux_budget_bytes: 1 << 30,
            seed: Seed(0),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::Config("at least 5 timed repeats are required".into()));
        }
        if self.d == 0 || self.head_dim == 0 || self.heads == 0 || self.rank == 0 || self.d % self.heads != 0 {
            return Err(Error::Config("bench widths must be positive and heads must divide d".into()));
        }
        for (kind, ns) in &self.plan {
            if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) || ns[0] == 0 {
                return Err(Error::Config(format!("{} token counts must be positive and ascending", kind.name())));
            }
        }
        Ok(())
    }
}

/// Modeled auxiliary bytes for one forward pass.
pub fn aux_bytes(kind: MixerKind, n: usize, cfg: &BenchConfig) -> u64 {
    let n = n as u64;
    match kind {
        MixerKind::Softmax => 8 * n * n,
        MixerKind::LinFusion => {
            let dpp = (cfg.head_dim * cfg.rank) as u64;
            let dh = (cfg.d / cfg.heads) as u64;
            8 * cfg.heads as u64 * (dpp * dh + dpp)
        }
        MixerKind::Scan => {
            let dp = cfg.head_dim as u64;
            8 * (dp * cfg.d as u64 + dp)
        }
    }
}

/// Multi-head softmax attention that materializes one head's `n×n`
/// scores at a time, matching the allocation model.
pub fn softmax_forward(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, heads: usize) -> Result<Matrix> {
    let q = gemm(x, false, wq, false)?;
    let k = gemm(x, false, wk, false)?;
    let v = gemm(x, false, wv, false)?;
    let (hd, vd) = (wq.cols() / heads, wv.cols() / heads);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut a = gemm(&q.slice_cols(h * hd, hd).scale(scale), false, &k.slice_cols(h * hd, hd), true)?;
        row_softmax_in_place(&mut a);
        outs.push(gemm(&a, false, &v.slice_cols(h * vd, vd), false)?);
    }
    Matrix::hconcat(&outs)
}

enum Prepared {
    Softmax { wq: Matrix, wk: Matrix, wv: Matrix },
    LinFusion(LinFusionBlockParams),
    Scan(GateSet),
}

fn prepare(kind: MixerKind, n: usize, cfg: &BenchConfig) -> Result<Prepared> {
    let s = cfg.seed.derive(kind as u64);
    let (d, aw) = (cfg.d, cfg.head_dim * cfg.heads);
    let w = |k: u64, r: usize, c: usize| seeded_gaussian(r, c, s.derive(k)).scale(1.0 / (d as f64).sqrt());
    Ok(match kind {
        MixerKind::Softmax => Prepared::Softmax {
            wq: w(1, d, aw),
            wk: w(2, d, aw),
            wv: w(3, d, d),
        },
        MixerKind::LinFusion => Prepared::LinFusion(LinFusionBlockParams::from_teacher(
            &w(1, d, aw),
            &w(2, d, aw),
            &w(3, d, d),
            &w(4, d, d),
            cfg.heads,
            cfg.rank,
            s.derive(5),
        )?),
        MixerKind::Scan => {
            let mut rng = s.derive(6).rng();
            let a = uniform_from(&mut rng, 1, n, 0.5, 0.99).into_vec();
            let b = gaussian_from(&mut rng, n, cfg.head_dim).map(softplus);
            let c = gaussian_from(&mut rng, n, cfg.head_dim).map(softplus);
            Prepared::Scan(GateSet::new(a, b, c)?)
        }
    })
}

fn run_once(p: &Prepared, x: &Matrix, heads: usize) -> Result<Matrix> {
    match p {
        Prepared::Softmax { wq, wk, wv } => softmax_forward(x, wq, wk, wv, heads),
        Prepared::LinFusion(b) => linfusion_block(x, b),
        Prepared::Scan(g) => causal_scan(g, x),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Times one mixer at one size: `warmup` untimed runs, then the median
/// of `repeats` timed runs.
pub fn time_mixer(kind: MixerKind, n: usize, cfg: &BenchConfig) -> Result<f64> {
    let p = prepare(kind, n, cfg)?;
    let x = seeded_gaussian(n, cfg.d, cfg.seed.derive(100 + n as u64));
    for _ in 0..cfg.warmup {
        std::hint::black_box(run_once(&p, &x, cfg.heads)?);
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t0 = Instant::now();
        std::hint::black_box(run_once(&p, std::hint::black_box(&x), cfg.heads)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Runs the whole plan. When a size's modeled allocation exceeds the
/// budget, that row is recorded as out of memory and the mixer's larger
/// sizes are skipped.
pub fn run_bench(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (kind, ns) in &cfg.plan {
        for &n in ns {
            let bytes = aux_bytes(*kind, n, cfg);
            let row = if bytes > cfg.aux_budget_bytes {
                BenchRow {
                    mixer: *kind,
                    n,
                    wall_time_s: None,
                    peak_extra_bytes: bytes,
                    status: RowStatus::OutOfMemory,
                }
            } else {
                BenchRow {
                    mixer: *kind,
                    n,
                    wall_time_s: Some(time_mixer(*kind, n, cfg)?),
                    peak_extra_bytes: bytes,
                    status: RowStatus::Ok,
                }
            };
            on_row(&row);
            let stop = row.status == RowStatus::OutOfMemory;
            rows.push(row);
            if stop {
                break;
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Config("slope needs at least two positive points".into()));
    }
    let k = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Per-mixer summary of measured rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSummary {
    pub mixer: MixerKind,
    pub slope: Option<f64>,
    /// `time(2n) / time(n)` for consecutive doublings.
    pub doubling_ratios: Vec<(usize, f64)>,
    pub aux_constant: bool,
}

pub fn summarize(rows: &[BenchRow], kind: MixerKind) -> ScalingSummary {
    let timed: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.mixer == kind)
        .filter_map(|r| r.wall_time_s.map(|t| (r.n, t)))
        .collect();
    let pts: Vec<(f64, f64)> = timed.iter().map(|&(n, t)| (n as f64, t)).collect();
    let doubling_ratios = timed
        .windows(2)
        .filter(|w| w[1].0 == 2 * w[0].0)
        .map(|w| (w[1].0, w[1].1 / w[0].1))
        .collect();
    let bytes: Vec<u64> = rows.iter().filter(|r| r.mixer == kind).map(|r| r.peak_extra_bytes).collect();
    ScalingSummary {
        mixer: kind,
        slope: loglog_slope(&pts).ok(),
        doubling_ratios,
        aux_constant: bytes.windows(2).all(|w| w[0] == w[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::softmax_attention;

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = (1..6).map(|k| (2f64.powi(k), 3.0 * 2f64.powi(2 * k))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_err());
        assert!(loglog_slope(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn allocation_model() {
        let cfg = BenchConfig::default();
        assert_eq!(aux_bytes(MixerKind::Softmax, 1024, &cfg), 8 * 1024 * 1024);
        let lin = aux_bytes(MixerKind::LinFusion, 4096, &cfg);
        assert_eq!(lin, aux_bytes(MixerKind::LinFusion, 65536, &cfg));
        // 4 heads of S (32×8) plus z (32)
        assert_eq!(lin, 8 * 4 * (32 * 8 + 32));
        assert_eq!(aux_bytes(MixerKind::Scan, 7, &cfg), 8 * (8 * 32 + 8));
    }

    #[test]
    fn softmax_forward_matches_oracle() {
        let x = seeded_gaussian(20, 6, Seed(1));
        let (wq, wk, wv) = (seeded_gaussian(6, 4, Seed(2)), seeded_gaussian(6, 4, Seed(3)), seeded_gaussian(6, 6, Seed(4)));
        let y = softmax_forward(&x, &wq, &wk, &wv, 2).unwrap();
        let heads: Vec<Matrix> = (0..2)
            .map(|h| softmax_attention(&x, &wq.slice_cols(2 * h, 2), &wk.slice_cols(2 * h, 2), &wv.slice_cols(3 * h, 3)).unwrap())
            .collect();
        assert!(y.rel_err(&Matrix::hconcat(&heads).unwrap()) < 1e-12);
    }

    #[test]
    fn budget_marks_and_skips() {
        let cfg = BenchConfig {
            plan: vec![(MixerKind::Softmax, vec![64, 128, 256]), (MixerKind::Scan, vec![64, 128])],
            aux_budget_bytes: 8 * 128 * 128,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg, |_| {}).unwrap();
        let soft: Vec<_> = rows.iter().filter(|r| r.mixer == MixerKind::Softmax).collect();
        assert_eq!(soft.len(), 3);
        assert_eq!(soft[2].status, RowStatus::OutOfMemory);
        assert!(soft[2].wall_time_s.is_none());
        assert!(soft[1].wall_time_s.is_some());
        let s = summarize(&rows, MixerKind::Scan);
        assert!(s.aux_constant);
        assert!(!summarize(&rows, MixerKind::Softmax).aux_constant);
    }

    #[test]
    fn config_checks() {
        assert!(BenchConfig { repeats: 4, ..BenchConfig::default() }.validate().is_err());
        let descending = BenchConfig { plan: vec![(MixerKind::Scan, vec![128, 64])], ..BenchConfig::default() };
        assert!(descending.validate().is_err());
        assert_eq!(MixerKind::parse("scan").unwrap(), MixerKind::Scan);
    }
}
