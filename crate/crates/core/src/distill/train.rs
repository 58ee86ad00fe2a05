//! Teacher pre-training and student distillation loops.
//!
//! Each step draws its samples from seeds derived from `(run seed, phase,
//! step, slot)`, evaluates samples concurrently and reduces gradients in
//! slot order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::block::BlockFlags;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_from, Matrix, Seed};

use super::data::{make_toy_dataset, ToyDataset};
use super::loss::{sample_loss_on_tape, HeldOut, LossParts, LossWeights, Sample};
use super::net::{DenoiserNet, NetShape, StudentKind};
use super::optim::AdamW;
use super::schedule::{diffuse, NoiseSchedule};

const PHASE_TEACHER: u64 = 1;
const PHASE_STUDENT: u64 = 2;
const PHASE_TEACHER_VAL: u64 = 3;
const PHASE_HELDOUT: u64 = 4;
const PHASE_TRAIN_IMAGES: u64 = 10;
const PHASE_HELDOUT_IMAGES: u64 = 11;
const PHASE_TEACHER_INIT: u64 = 20;
const PHASE_STUDENT_INIT: u64 = 21;

/// Student mixer family used by a distillation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Normalized linear attention, the default.
    LinFusion,
    /// The same block with normalization switched off.
    Unnormalized,
    /// Full ladder: normalized, gated and RMS-normed linear attention.
    LinFusionGated,
    /// Two-directional scan mixer.
    Ssm,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linfusion" | "normalized" => Ok(Variant::LinFusion),
            "unnormalized" => Ok(Variant::Unnormalized),
            "gated" => Ok(Variant::LinFusionGated),
            "ssm" => Ok(Variant::Ssm),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected linfusion, unnormalized, gated or ssm)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::LinFusion => "linfusion",
            Variant::Unnormalized => "unnormalized",
            Variant::LinFusionGated => "gated",
            Variant::Ssm => "ssm",
        }
    }

    pub fn student_kind(self, rank: usize) -> StudentKind {
        let flags = |normalized, extra| BlockFlags {
            normalized,
            gated: extra,
            rms_normed: extra,
        };
        match self {
            Variant::LinFusion => StudentKind::LinFusion { rank, flags: flags(true, false) },
            Variant::Unnormalized => StudentKind::LinFusion { rank, flags: flags(false, false) },
            Variant::LinFusionGated => StudentKind::LinFusion { rank, flags: flags(true, true) },
            Variant::Ssm => StudentKind::Ssm { flags: flags(true, false) },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub shape: NetShape,
    /// Feature-map expansion factor; each head has `head_dim·rank` features.
    pub rank: usize,
    pub variant: Variant,
    pub seed: Seed,
    pub dataset_size: usize,
    pub heldout_size: usize,
    pub batch: usize,
    pub schedule_steps: usize,
    pub teacher_max_steps: usize,
    pub teacher_lr: f64,
    pub teacher_eval_every: usize,
    /// Validation evaluations without a relative improvement of at least
    /// `plateau_tol` before teacher training stops.
    pub teacher_patience: usize,
    pub plateau_tol: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub eval_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            shape: NetShape::toy(),
            rank: 4,
            variant: Variant::LinFusion,
            seed: Seed(0),
            dataset_size: 256,
            heldout_size: 16,
            batch: 2,
            schedule_steps: 100,
            teacher_max_steps: 1500,
            teacher_lr: 1e-3,
            teacher_eval_every: 50,
            teacher_patience: 3,
            plateau_tol: 0.01,
            steps: 2000,
            lr: 1e-4,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            eval_every: 100,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let positive = [
            ("rank", self.rank),
            ("dataset_size", self.dataset_size),
            ("heldout_size", self.heldout_size),
            ("batch", self.batch),
            ("schedule_steps", self.schedule_steps),
            ("teacher_eval_every", self.teacher_eval_every),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.teacher_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive, decay non-negative".into()));
        }
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, 1e-4, 2e-2)
    }
}

/// One logged optimization step (training-batch losses).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub parts: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutcome {
    pub teacher: DenoiserNet,
    /// `(step, validation denoising loss)` at every evaluation.
    pub validation: Vec<(usize, f64)>,
    pub steps: usize,
    pub plateaued: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub student: DenoiserNet,
    pub log: Vec<StepMetrics>,
    /// `(step, held-out output-distillation loss)`, starting at step 0.
    pub heldout_kd: Vec<(usize, f64)>,
}

impl DistillOutcome {
    pub fn kd_initial(&self) -> f64 {
        self.heldout_kd.first().map_or(f64::NAN, |e| e.1)
    }

    pub fn kd_final(&self) -> f64 {
        self.heldout_kd.last().map_or(f64::NAN, |e| e.1)
    }

    pub fn kd_ratio(&self) -> f64 {
        self.kd_final() / self.kd_initial()
    }
}

/// Training images, held-out images, and the schedule of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub train: ToyDataset,
    pub heldout: ToyDataset,
    pub schedule: NoiseSchedule,
}

impl Fixture {
    pub fn new(cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = (cfg.shape.height, cfg.shape.width);
        Ok(Fixture {
            train: make_toy_dataset(cfg.seed.derive(PHASE_TRAIN_IMAGES), cfg.dataset_size, h, w),
            heldout: make_toy_dataset(cfg.seed.derive(PHASE_HELDOUT_IMAGES), cfg.heldout_size, h, w),
            schedule: cfg.schedule()?,
        })
    }

    fn draw(&self, ds: &ToyDataset, dim: usize, seed: Seed) -> Sample {
        let mut rng = seed.rng();
        let idx = rng.random_range(0..ds.len());
        let t = rng.random_range(1..=self.schedule.steps());
        let eps = gaussian_from(&mut rng, ds.tokens(), dim);
        Sample {
            z0: ds.lifted(idx, dim),
            t,
            eps,
        }
    }

    /// Training samples of one step.
    pub fn batch(&self, cfg: &DistillConfig, phase: u64, step: usize) -> Vec<Sample> {
        let base = cfg.seed.derive(phase).derive(step as u64);
        (0..cfg.batch)
            .map(|b| self.draw(&self.train, cfg.shape.dim, base.derive(b as u64)))
            .collect()
    }

    /// A fixed evaluation set over the held-out images: image `i` at a
    /// seeded step with seeded noise.
    pub fn evaluation_set(&self, cfg: &DistillConfig, phase: u64) -> Vec<Sample> {
        let base = cfg.seed.derive(phase);
        (0..self.heldout.len())
            .map(|i| {
                let mut s = self.draw(&self.heldout, cfg.shape.dim, base.derive(i as u64));
                s.z0 = self.heldout.lifted(i, cfg.shape.dim);
                s
            })
            .collect()
    }
}

fn sum_in_order(grads: Vec<Vec<Option<Matrix>>>, scale: f64) -> Vec<Option<Matrix>> {
    let mut iter = grads.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in acc.iter_mut().zip(g) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b).expect("gradient shapes agree"),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }
    for g in acc.iter_mut().flatten() {
        *g = g.scale(scale);
    }
    acc
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training { step, loss })
    }
}

/// Ordinary denoising training of a fresh softmax teacher with Adam,
/// stopping once the validation loss plateaus or at `teacher_max_steps`.
pub fn train_teacher(cfg: &DistillConfig, fx: &Fixture) -> Result<TeacherOutcome> {
    let mut teacher = DenoiserNet::teacher(cfg.shape, cfg.seed.derive(PHASE_TEACHER_INIT))?;
    let val = fx.evaluation_set(cfg, PHASE_TEACHER_VAL);
    let bb_len = teacher.backbone.tensors().len();
    let mut params: Vec<Matrix> = teacher.backbone.tensors();
    for m in teacher.mixer_tensors() {
        params.extend(m);
    }
    let mut opt = AdamW::new(cfg.teacher_lr, 0.0);
    let mut validation = vec![(0, super::loss::denoising_loss(&teacher, &val, &fx.schedule)?)];
    let mut best = validation[0].1;
    let mut stale = 0;
    let mut plateaued = false;
    let mut step = 0;
    while step < cfg.teacher_max_steps {
        let batch = fx.batch(cfg, PHASE_TEACHER, step);
        let per_sample = batch
            .par_iter()
            .map(|s| -> Result<(f64, Vec<Option<Matrix>>)> {
                let mut tape = Tape::new();
                let bound = teacher.bind(&mut tape, true, true);
                let zt = diffuse(&s.z0, s.t, &s.eps, &fx.schedule)?;
                let z = tape.constant(zt);
                let eps = tape.constant(s.eps.clone());
                let out = teacher.forward_on_tape(&mut tape, &bound, z, s.t)?;
                let diff = tape.sub(eps, out.eps);
                let loss = tape.mean_square(diff);
                let g = tape.backward(loss);
                let vars = bound.backbone.iter().chain(bound.mixers.iter().flatten());
                Ok((tape.value(loss)[(0, 0)], vars.map(|&v| g.get(v).cloned()).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = per_sample.iter().map(|p| p.0).sum::<f64>() / batch.len() as f64;
        check_finite(step, loss)?;
        let grads = sum_in_order(per_sample.into_iter().map(|p| p.1).collect(), 1.0 / batch.len() as f64);
        opt.step(&mut params, &grads);
        teacher.backbone.set_tensors(&params[..bb_len])?;
        let mut offset = bb_len;
        for m in teacher.mixers.iter_mut() {
            let k = m.tensors().len();
            m.set_tensors(&params[offset..offset + k])?;
            offset += k;
        }
        step += 1;
        if step % cfg.teacher_eval_every == 0 {
            let v = super::loss::denoising_loss(&teacher, &val, &fx.schedule)?;
            check_finite(step, v)?;
            validation.push((step, v));
            if v < best * (1.0 - cfg.plateau_tol) {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.teacher_patience {
                    plateaued = true;
                    break;
                }
            }
        }
    }
    Ok(TeacherOutcome {
        teacher,
        validation,
        steps: step,
        plateaued,
    })
}

/// Distills `teacher` into a fresh student of `cfg.variant`: only mixer
/// parameters are updated (AdamW); the copied backbone stays frozen.
pub fn train_distill(cfg: &DistillConfig, fx: &Fixture, teacher: &DenoiserNet) -> Result<DistillOutcome> {
    train_distill_with(cfg, fx, teacher, |_, _| {})
}

/// [`train_distill`] with a callback after every step.
pub fn train_distill_with(
    cfg: &DistillConfig,
    fx: &Fixture,
    teacher: &DenoiserNet,
    mut on_step: impl FnMut(&StepMetrics, Option<f64>),
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let mut student = DenoiserNet::student_from(
        teacher,
        cfg.variant.student_kind(cfg.rank),
        cfg.seed.derive(PHASE_STUDENT_INIT),
    )?;
    let held = HeldOut::new(teacher, &fx.evaluation_set(cfg, PHASE_HELDOUT), &fx.schedule)?;
    let mut heldout_kd = vec![(0, held.kd(&student)?)];
    let counts: Vec<usize> = student.mixers.iter().map(|m| m.tensors().len()).collect();
    let mut params: Vec<Matrix> = student.mixer_tensors().into_iter().flatten().collect();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = fx.batch(cfg, PHASE_STUDENT, step);
        let per_sample = batch
            .par_iter()
            .map(|s| -> Result<(LossParts, Vec<Option<Matrix>>)> {
                let mut tape = Tape::new();
                let sv = student.bind(&mut tape, false, true);
                let tv = teacher.bind(&mut tape, false, false);
                let lv = sample_loss_on_tape(&mut tape, &student, &sv, teacher, &tv, s, &fx.schedule, cfg.weights)?;
                let g = tape.backward(lv.total);
                Ok((lv.read(&tape), sv.mixers.iter().flatten().map(|&v| g.get(v).cloned()).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        let parts = LossParts::mean(&per_sample.iter().map(|p| p.0).collect::<Vec<_>>());
        if !parts.is_finite() {
            return Err(Error::Training { step, loss: parts.total });
        }
        let grads = sum_in_order(per_sample.into_iter().map(|p| p.1).collect(), 1.0 / batch.len() as f64);
        opt.step(&mut params, &grads);
        let mut offset = 0;
        for (m, &k) in student.mixers.iter_mut().zip(&counts) {
            m.set_tensors(&params[offset..offset + k])?;
            offset += k;
        }
        let metrics = StepMetrics { step: step + 1, parts };
        let eval = if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let kd = held.kd(&student)?;
            check_finite(step + 1, kd)?;
            heldout_kd.push((step + 1, kd));
            Some(kd)
        } else {
            None
        };
        on_step(&metrics, eval);
        log.push(metrics);
    }
    Ok(DistillOutcome {
        student,
        log,
        heldout_kd,
    })
}

/// Full pipeline: fixture, teacher pre-training, distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillRun {
    pub teacher: TeacherOutcome,
    pub distill: DistillOutcome,
}

pub fn run_distillation(cfg: &DistillConfig) -> Result<DistillRun> {
    let fx = Fixture::new(cfg)?;
    let teacher = train_teacher(cfg, &fx)?;
    let distill = train_distill(cfg, &fx, &teacher.teacher)?;
    Ok(DistillRun { teacher, distill })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DistillConfig {
        DistillConfig {
            shape: NetShape {
                height: 4,
                width: 4,
                dim: 8,
                depth: 2,
                heads: 2,
            },
            rank: 2,
            dataset_size: 8,
            heldout_size: 4,
            teacher_max_steps: 20,
            teacher_eval_every: 10,
            steps: 6,
            eval_every: 3,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn zero_steps_keep_teacher_initialization() {
        let cfg = DistillConfig { steps: 0, ..tiny() };
        let fx = Fixture::new(&cfg).unwrap();
        let teacher = DenoiserNet::teacher(cfg.shape, Seed(3)).unwrap();
        let out = train_distill(&cfg, &fx, &teacher).unwrap();
        let fresh = DenoiserNet::student_from(&teacher, cfg.variant.student_kind(cfg.rank), cfg.seed.derive(PHASE_STUDENT_INIT)).unwrap();
        assert_eq!(out.student, fresh);
        assert!(out.log.is_empty());
        assert_eq!(out.heldout_kd.len(), 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny();
        let a = run_distillation(&cfg).unwrap();
        let b = run_distillation(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.distill.log.len(), 6);
        assert_eq!(a.distill.heldout_kd.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 3, 6]);
    }

    #[test]
    fn backbone_stays_frozen() {
        let cfg = tiny();
        let fx = Fixture::new(&cfg).unwrap();
        let teacher = train_teacher(&cfg, &fx).unwrap();
        assert!(teacher.validation.len() >= 2);
        let out = train_distill(&cfg, &fx, &teacher.teacher).unwrap();
        assert_eq!(out.student.backbone, teacher.teacher.backbone);
        assert_ne!(out.student.mixers, DenoiserNet::student_from(&teacher.teacher, cfg.variant.student_kind(2), cfg.seed.derive(PHASE_STUDENT_INIT)).unwrap().mixers);
    }

    #[test]
    fn variants_parse() {
        for v in [Variant::LinFusion, Variant::Unnormalized, Variant::LinFusionGated, Variant::Ssm] {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("softmax").is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(Fixture::new(&DistillConfig { batch: 0, ..tiny() }).is_err());
        assert!(Fixture::new(&DistillConfig { lr: 0.0, ..tiny() }).is_err());
    }
}
