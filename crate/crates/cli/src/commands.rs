use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use linmix::bench::{run_bench, summarize, BenchConfig, MixerKind, RowStatus};
use linmix::block::BlockFlags;
use linmix::checkpoint::Checkpoint;
use linmix::distill::drift::with_normalization;
use linmix::distill::net::NetShape;
use linmix::distill::{
    cross_resolution_drift, train_distill_with, train_teacher, DenoiserNet, DistillConfig, DriftProbe, Fixture,
    LossWeights, Variant,
};
use linmix::numerics::seeded_gaussian;
use linmix::shard::{quadratic_baseline_payload, sharded_block_forward, split_rows};
use linmix::linattn::linfusion_block;
use linmix::verify::{payload_bytes, random_block, run_verification, VerifyConfig};
use linmix::Seed;

use crate::config::{list_string, ConfigError, RunConfig};
use crate::svg::{Chart, Series};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] linmix::Error),
    #[error("{0}")]
    Failed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(linmix::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Where a command writes, plus the provenance stamped on every CSV.
pub struct Output {
    pub dir: PathBuf,
    pub hash: String,
    pub seed: u64,
}

impl Output {
    pub fn create(dir: &Path, cfg: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.render())?;
        Ok(Output {
            dir: dir.to_path_buf(),
            hash: cfg.hash(),
            seed: cfg.get("seed")?,
        })
    }

    pub fn csv(&self, name: &str, header: &str, rows: &[String]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path)?;
        writeln!(f, "# config_sha256={} seed={}", self.hash, self.seed)?;
        writeln!(f, "{header}")?;
        for r in rows {
            writeln!(f, "{r}")?;
        }
        Ok(path)
    }

    pub fn text(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, body)?;
        Ok(path)
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(ConfigError::Invalid(msg.into()))
}

// ---- verify ----

pub fn verify_defaults() -> Vec<(&'static str, String)> {
    let d = VerifyConfig::default();
    vec![
        ("seed", "0".into()),
        ("duality_instances", d.duality_instances.to_string()),
        ("kronecker_instances", d.kronecker_instances.to_string()),
        ("per_channel_instances", d.per_channel_instances.to_string()),
        ("instances", d.instances.to_string()),
        ("shard_partitions", d.shard_partitions.to_string()),
        ("payload_tokens", list_string(&d.payload_tokens)),
        ("break_normalization", "false".into()),
    ]
}

pub fn verify_config(cfg: &RunConfig) -> CliResult<VerifyConfig> {
    Ok(VerifyConfig {
        seed: Seed(cfg.get("seed")?),
        duality_instances: cfg.get("duality_instances")?,
        kronecker_instances: cfg.get("kronecker_instances")?,
        per_channel_instances: cfg.get("per_channel_instances")?,
        instances: cfg.get("instances")?,
        shard_partitions: cfg.get("shard_partitions")?,
        payload_tokens: cfg.list("payload_tokens")?,
        break_normalization: cfg.get("break_normalization")?,
    })
}

pub fn cmd_verify(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let report = run_verification(&verify_config(cfg)?)?;
    let text = report.render();
    print!("{text}");
    out.text("report.txt", &text)?;
    let rows: Vec<String> = report
        .suites
        .iter()
        .map(|s| format!("{},{},{:e},{:e},{}", s.name, s.instances, s.max_err, s.tolerance, s.passed))
        .collect();
    out.csv("verify.csv", "suite,instances,max_err,tolerance,passed", &rows)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", report.failed().join(", "))))
    }
}

// ---- bench ----

pub fn bench_defaults() -> Vec<(&'static str, String)> {
    let d = BenchConfig::default();
    let ns = |k: MixerKind| list_string(&d.plan.iter().find(|p| p.0 == k).expect("default plan").1);
    vec![
        ("seed", "0".into()),
        ("softmax_n", ns(MixerKind::Softmax)),
        ("linfusion_n", ns(MixerKind::LinFusion)),
        ("scan_n", ns(MixerKind::Scan)),
        ("d", d.d.to_string()),
        ("head_dim", d.head_dim.to_string()),
        ("heads", d.heads.to_string()),
        ("rank", d.rank.to_string()),
        ("repeats", d.repeats.to_string()),
        ("warmup", d.warmup.to_string()),
        ("aux_budget_bytes", d.aux_budget_bytes.to_string()),
    ]
}

pub fn bench_config(cfg: &RunConfig) -> CliResult<BenchConfig> {
    let b = BenchConfig {
        plan: vec![
            (MixerKind::Softmax, cfg.list("softmax_n")?),
            (MixerKind::LinFusion, cfg.list("linfusion_n")?),
            (MixerKind::Scan, cfg.list("scan_n")?),
        ]
        .into_iter()
        .filter(|(_, ns): &(MixerKind, Vec<usize>)| !ns.is_empty())
        .collect(),
        d: cfg.get("d")?,
        head_dim: cfg.get("head_dim")?,
        heads: cfg.get("heads")?,
        rank: cfg.get("rank")?,
        repeats: cfg.get("repeats")?,
        warmup: cfg.get("warmup")?,
        aux_budget_bytes: cfg.get("aux_budget_bytes")?,
        seed: Seed(cfg.get("seed")?),
    };
    b.validate()?;
    Ok(b)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let b = bench_config(cfg)?;
    println!("mixer,n,wall_time_s,peak_extra_bytes,status");
    let fmt = |r: &linmix::bench::BenchRow| {
        format!(
            "{},{},{},{},{}",
            r.mixer.name(),
            r.n,
            r.wall_time_s.map_or(String::new(), |t| format!("{t:e}")),
            r.peak_extra_bytes,
            if r.status == RowStatus::Ok { "ok" } else { "oom" }
        )
    };
    let rows = run_bench(&b, |r| println!("{}", fmt(r)))?;
    out.csv(
        "bench.csv",
        "mixer,n,wall_time_s,peak_extra_bytes,status",
        &rows.iter().map(fmt).collect::<Vec<_>>(),
    )?;
    let mut series = Vec::new();
    for (kind, _) in &b.plan {
        let s = summarize(&rows, *kind);
        let ratios: Vec<String> = s.doubling_ratios.iter().map(|(n, r)| format!("{n}:{r:.2}")).collect();
        println!(
            "{}: slope {} doubling ratios [{}] aux bytes {}",
            kind.name(),
            s.slope.map_or("n/a".into(), |v| format!("{v:.3}")),
            ratios.join(" "),
            if s.aux_constant { "constant" } else { "growing" }
        );
        series.push(Series {
            label: kind.name().into(),
            points: rows
                .iter()
                .filter(|r| r.mixer == *kind)
                .filter_map(|r| r.wall_time_s.map(|t| (r.n as f64, t)))
                .collect(),
        });
    }
    let chart = Chart {
        title: "forward time vs tokens".into(),
        x_label: "tokens n".into(),
        y_label: "median seconds".into(),
        log_x: true,
        log_y: true,
        series,
    };
    out.text("bench.svg", &chart.render())?;
    Ok(())
}

// ---- distill ----

pub fn distill_defaults() -> Vec<(&'static str, String)> {
    let d = DistillConfig::default();
    vec![
        ("seed", "0".into()),
        ("variant", d.variant.name().into()),
        ("height", d.shape.height.to_string()),
        ("width", d.shape.width.to_string()),
        ("dim", d.shape.dim.to_string()),
        ("depth", d.shape.depth.to_string()),
        ("heads", d.shape.heads.to_string()),
        ("rank", d.rank.to_string()),
        ("dataset_size", d.dataset_size.to_string()),
        ("heldout_size", d.heldout_size.to_string()),
        ("batch", d.batch.to_string()),
        ("schedule_steps", d.schedule_steps.to_string()),
        ("teacher_max_steps", d.teacher_max_steps.to_string()),
        ("teacher_lr", d.teacher_lr.to_string()),
        ("teacher_eval_every", d.teacher_eval_every.to_string()),
        ("teacher_patience", d.teacher_patience.to_string()),
        ("plateau_tol", d.plateau_tol.to_string()),
        ("steps", d.steps.to_string()),
        ("lr", d.lr.to_string()),
        ("weight_decay", d.weight_decay.to_string()),
        ("alpha", d.weights.alpha.to_string()),
        ("beta", d.weights.beta.to_string()),
        ("eval_every", d.eval_every.to_string()),
        ("drift_scale", "2".into()),
    ]
}

pub fn distill_config(cfg: &RunConfig) -> CliResult<DistillConfig> {
    let d = DistillConfig {
        shape: NetShape {
            height: cfg.get("height")?,
            width: cfg.get("width")?,
            dim: cfg.get("dim")?,
            depth: cfg.get("depth")?,
            heads: cfg.get("heads")?,
        },
        rank: cfg.get("rank")?,
        variant: Variant::parse(cfg.raw("variant"))?,
        seed: Seed(cfg.get("seed")?),
        dataset_size: cfg.get("dataset_size")?,
        heldout_size: cfg.get("heldout_size")?,
        batch: cfg.get("batch")?,
        schedule_steps: cfg.get("schedule_steps")?,
        teacher_max_steps: cfg.get("teacher_max_steps")?,
        teacher_lr: cfg.get("teacher_lr")?,
        teacher_eval_every: cfg.get("teacher_eval_every")?,
        teacher_patience: cfg.get("teacher_patience")?,
        plateau_tol: cfg.get("plateau_tol")?,
        steps: cfg.get("steps")?,
        lr: cfg.get("lr")?,
        weight_decay: cfg.get("weight_decay")?,
        weights: LossWeights::new(cfg.get("alpha")?, cfg.get("beta")?)?,
        eval_every: cfg.get("eval_every")?,
    };
    d.validate()?;
    Ok(d)
}

pub fn cmd_distill(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let d = distill_config(cfg)?;
    let scale: usize = cfg.get("drift_scale")?;
    if scale < 1 {
        return Err(invalid("drift_scale must be ≥ 1"));
    }
    let t0 = Instant::now();
    let fx = Fixture::new(&d)?;
    let teacher_path = out.dir.join("teacher.lmx");
    let teacher = if teacher_path.exists() {
        let t = DenoiserNet::from_checkpoint(&Checkpoint::load(&teacher_path)?)?;
        if t.shape != d.shape {
            return Err(invalid(format!("{} was trained for a different shape", teacher_path.display())));
        }
        println!("teacher: loaded {}", teacher_path.display());
        t
    } else {
        let t = train_teacher(&d, &fx)?;
        println!(
            "teacher: {} steps{}, validation loss {:.4} -> {:.4}",
            t.steps,
            if t.plateaued { " (plateau)" } else { "" },
            t.validation.first().map_or(f64::NAN, |v| v.1),
            t.validation.last().map_or(f64::NAN, |v| v.1)
        );
        t.teacher.to_checkpoint().save(&teacher_path)?;
        t.teacher
    };
    let outcome = train_distill_with(&d, &fx, &teacher, |m, kd| {
        if let Some(kd) = kd {
            println!("step {:>5} loss {:.5} held-out kd {:.5}", m.step, m.parts.total, kd);
        }
    })?;
    outcome.student.to_checkpoint().save(out.dir.join("student.lmx"))?;

    let mut kd_at = outcome.heldout_kd.iter().peekable();
    let rows: Vec<String> = std::iter::once(format!("0,,,,,{:e}", outcome.kd_initial()))
        .chain(outcome.log.iter().map(|m| {
            while kd_at.peek().is_some_and(|e| e.0 < m.step) {
                kd_at.next();
            }
            let kd = kd_at.peek().filter(|e| e.0 == m.step).map_or(String::new(), |e| format!("{:e}", e.1));
            format!("{},{:e},{:e},{:e},{:e},{kd}", m.step, m.parts.total, m.parts.simple, m.parts.kd, m.parts.feat)
        }))
        .collect();
    out.csv("metrics.csv", "step,loss_total,loss_simple,loss_kd,loss_feat,heldout_kd", &rows)?;
    let chart = Chart {
        title: format!("held-out distillation loss ({})", d.variant.name()),
        x_label: "step".into(),
        y_label: "kd".into(),
        log_x: false,
        log_y: true,
        series: vec![Series {
            label: "held-out kd".into(),
            points: outcome.heldout_kd.iter().map(|&(s, v)| (s as f64, v)).collect(),
        }],
    };
    out.text("kd.svg", &chart.render())?;

    let train_tokens = d.shape.tokens();
    let test_tokens = train_tokens * scale * scale;
    let probe = DriftProbe::default();
    let seed = d.seed.derive(30);
    let drift = cross_resolution_drift(&outcome.student, train_tokens, test_tokens, &probe, seed)?;
    let normalized = outcome.student.mixers.iter().any(|m| m.flags().is_some_and(|f: BlockFlags| f.normalized));
    let ablation = cross_resolution_drift(&with_normalization(&outcome.student, !normalized), train_tokens, test_tokens, &probe, seed)?;
    let summary = format!(
        "variant {}\nheld-out kd {:.5} -> {:.5} (ratio {:.3})\n\
         drift {}→{} tokens: student {:.3} [{:.3}, {:.3}]; with normalization {} {:.3} [{:.3}, {:.3}]\n\
         elapsed {:.1}s\n",
        d.variant.name(),
        outcome.kd_initial(),
        outcome.kd_final(),
        outcome.kd_ratio(),
        train_tokens,
        test_tokens,
        drift.mean_ratio(),
        drift.min_ratio(),
        drift.max_ratio(),
        if normalized { "off" } else { "on" },
        ablation.mean_ratio(),
        ablation.min_ratio(),
        ablation.max_ratio(),
        t0.elapsed().as_secs_f64()
    );
    print!("{summary}");
    out.text("summary.txt", &summary)?;
    Ok(())
}

// ---- shard-demo ----

pub fn shard_defaults() -> Vec<(&'static str, String)> {
    vec![
        ("seed", "0".into()),
        ("tokens", "256,4096,65536".into()),
        ("shards", "4".into()),
        ("d", "32".into()),
        ("heads", "4".into()),
        ("head_dim", "8".into()),
        ("rank", "4".into()),
        ("tolerance", "1e-12".into()),
    ]
}

pub fn cmd_shard_demo(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let tokens: Vec<usize> = cfg.list("tokens")?;
    let shards: usize = cfg.get("shards")?;
    let (d, heads, head_dim, rank): (usize, usize, usize, usize) =
        (cfg.get("d")?, cfg.get("heads")?, cfg.get("head_dim")?, cfg.get("rank")?);
    let tol: f64 = cfg.get("tolerance")?;
    if tokens.is_empty() || shards == 0 || tokens.iter().any(|&n| n < shards) {
        return Err(invalid("need token counts ≥ shards ≥ 1"));
    }
    let seed = Seed(cfg.get("seed")?);
    let p = random_block(seed, d, heads, head_dim, rank, BlockFlags::default())?;
    let (payloads, expected) = payload_bytes(&p, &tokens, seed.derive(1))?;
    println!("n,linfusion_payload_bytes,baseline_payload_bytes,rel_err");
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&n, &bytes) in tokens.iter().zip(&payloads) {
        let x = seeded_gaussian(n, d, seed.derive(2).derive(n as u64));
        let sizes: Vec<usize> = (0..shards).map(|s| n / shards + usize::from(s < n % shards)).collect();
        let err = sharded_block_forward(&split_rows(&x, &sizes)?, &p)?.rel_err(&linfusion_block(&x, &p)?);
        let baseline = quadratic_baseline_payload(n, d, heads * head_dim);
        let row = format!("{n},{bytes},{baseline},{err:e}");
        println!("{row}");
        rows.push(row);
        if err > tol {
            failures.push(format!("n={n}: rel err {err:e} > {tol:e}"));
        }
        if bytes != expected {
            failures.push(format!("n={n}: payload {bytes} != {expected}"));
        }
    }
    out.csv("shard.csv", "n,linfusion_payload_bytes,baseline_payload_bytes,rel_err", &rows)?;
    let chart = Chart {
        title: "bytes exchanged per shard".into(),
        x_label: "tokens n".into(),
        y_label: "bytes".into(),
        log_x: true,
        log_y: true,
        series: vec![
            Series { label: "linear".into(), points: tokens.iter().zip(&payloads).map(|(&n, &b)| (n as f64, b as f64)).collect() },
            Series {
                label: "quadratic".into(),
                points: tokens.iter().map(|&n| (n as f64, quadratic_baseline_payload(n, d, heads * head_dim) as f64)).collect(),
            },
        ],
    };
    out.text("shard.svg", &chart.render())?;
    println!("payload per shard: {expected} bytes ({heads} heads)");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(failures.join("; ")))
    }
}
