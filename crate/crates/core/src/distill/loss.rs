//! Denoising, output-distillation and feature-matching losses.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::net::{BoundNet, DenoiserNet};
use super::schedule::{diffuse, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {alpha}, {beta}")));
        }
        Ok(LossWeights { alpha, beta })
    }
}

/// One training example: a clean latent, a step and the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z0: Matrix,
    pub t: usize,
    pub eps: Matrix,
}

/// Loss parts; every square is averaged over batch × tokens × channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub simple: f64,
    pub kd: f64,
    pub feat: f64,
}

impl LossParts {
    pub fn combine(simple: f64, kd: f64, feat: f64, w: LossWeights) -> Self {
        LossParts {
            total: simple + w.alpha * kd + w.beta * feat,
            simple,
            kd,
            feat,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.simple.is_finite() && self.kd.is_finite() && self.feat.is_finite()
    }

    /// Mean of per-sample parts (all samples have equal size).
    pub fn mean(parts: &[LossParts]) -> LossParts {
        let k = parts.len().max(1) as f64;
        let mut acc = LossParts::default();
        for p in parts {
            acc.total += p.total;
            acc.simple += p.simple;
            acc.kd += p.kd;
            acc.feat += p.feat;
        }
        LossParts {
            total: acc.total / k,
            simple: acc.simple / k,
            kd: acc.kd / k,
            feat: acc.feat / k,
        }
    }
}

/// Tape handles of one sample's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub simple: Var,
    pub kd: Var,
    pub feat: Var,
}

impl LossVars {
    pub fn read(&self, tape: &Tape) -> LossParts {
        LossParts {
            total: tape.value(self.total)[(0, 0)],
            simple: tape.value(self.simple)[(0, 0)],
            kd: tape.value(self.kd)[(0, 0)],
            feat: tape.value(self.feat)[(0, 0)],
        }
    }
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    tape.mean_square(d)
}

/// Builds the composite loss of one sample. The teacher is evaluated on
/// the same tape and its outputs are detached, so no gradient can reach
/// its parameters whether they are bound as leaves or constants.
pub fn sample_loss_on_tape(
    tape: &mut Tape,
    student: &DenoiserNet,
    student_vars: &BoundNet,
    teacher: &DenoiserNet,
    teacher_vars: &BoundNet,
    sample: &Sample,
    sched: &NoiseSchedule,
    w: LossWeights,
) -> Result<LossVars> {
    if student.depth() != teacher.depth() {
        return Err(Error::Tap {
            student: student.depth(),
            teacher: teacher.depth(),
        });
    }
    let zt = diffuse(&sample.z0, sample.t, &sample.eps, sched)?;
    let z = tape.constant(zt);
    let eps = tape.constant(sample.eps.clone());
    let t_out = teacher.forward_on_tape(tape, teacher_vars, z, sample.t)?;
    let t_eps = tape.detach(t_out.eps);
    let t_taps: Vec<Var> = t_out.taps.iter().map(|&v| tape.detach(v)).collect();
    let s_out = student.forward_on_tape(tape, student_vars, z, sample.t)?;
    let simple = mse(tape, eps, s_out.eps);
    let kd = mse(tape, s_out.eps, t_eps);
    let per_layer: Vec<Var> = s_out
        .taps
        .iter()
        .zip(&t_taps)
        .map(|(&s, &t)| mse(tape, s, t))
        .collect();
    let feat_sum = tape.sum_scalars(&per_layer);
    let feat = tape.scale(feat_sum, 1.0 / per_layer.len() as f64);
    let wkd = tape.scale(kd, w.alpha);
    let wfeat = tape.scale(feat, w.beta);
    let total = tape.sum_scalars(&[simple, wkd, wfeat]);
    Ok(LossVars {
        total,
        simple,
        kd,
        feat,
    })
}

/// Composite loss of `student` against a frozen `teacher`, averaged over
/// the batch.
pub fn composite_loss(
    student: &DenoiserNet,
    teacher: &DenoiserNet,
    batch: &[Sample],
    sched: &NoiseSchedule,
    w: LossWeights,
) -> Result<LossParts> {
    let parts = batch
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let sv = student.bind(&mut tape, false, false);
            let tv = teacher.bind(&mut tape, false, false);
            Ok(sample_loss_on_tape(&mut tape, student, &sv, teacher, &tv, s, sched, w)?.read(&tape))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossParts::mean(&parts))
}

/// Plain denoising loss `mean (eps - eps_θ)²` of one network.
pub fn denoising_loss(net: &DenoiserNet, batch: &[Sample], sched: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let zt = diffuse(&s.z0, s.t, &s.eps, sched)?;
        let out = net.forward(&zt, s.t)?;
        total += out.eps.sub(&s.eps)?.mean_square();
    }
    Ok(total / batch.len().max(1) as f64)
}

/// A held-out set with the teacher's predictions cached.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub inputs: Vec<(Matrix, usize)>,
    pub teacher_eps: Vec<Matrix>,
}

impl HeldOut {
    pub fn new(teacher: &DenoiserNet, samples: &[Sample], sched: &NoiseSchedule) -> Result<Self> {
        let mut inputs = Vec::with_capacity(samples.len());
        let mut teacher_eps = Vec::with_capacity(samples.len());
        for s in samples {
            let zt = diffuse(&s.z0, s.t, &s.eps, sched)?;
            teacher_eps.push(teacher.forward(&zt, s.t)?.eps);
            inputs.push((zt, s.t));
        }
        Ok(HeldOut { inputs, teacher_eps })
    }

    /// `mean (eps_student - eps_teacher)²` over the set.
    pub fn kd(&self, student: &DenoiserNet) -> Result<f64> {
        let mut total = 0.0;
        for ((zt, t), te) in self.inputs.iter().zip(&self.teacher_eps) {
            total += student.forward(zt, *t)?.eps.sub(te)?.mean_square();
        }
        Ok(total / self.inputs.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::BlockFlags;
    use crate::distill::net::{NetShape, StudentKind};
    use crate::numerics::{seeded_gaussian, Seed};

    fn shape() -> NetShape {
        NetShape {
            height: 2,
            width: 4,
            dim: 8,
            depth: 2,
            heads: 2,
        }
    }

    fn batch() -> Vec<Sample> {
        (0..2)
            .map(|i| Sample {
                z0: seeded_gaussian(8, 8, Seed(100 + i)).scale(0.5),
                t: 10 + 30 * i as usize,
                eps: seeded_gaussian(8, 8, Seed(200 + i)),
            })
            .collect()
    }

    #[test]
    fn self_distillation_has_zero_kd_and_feat() {
        let teacher = DenoiserNet::teacher(shape(), Seed(1)).unwrap();
        let p = composite_loss(&teacher, &teacher, &batch(), &NoiseSchedule::toy(), LossWeights::default()).unwrap();
        assert_eq!(p.kd, 0.0);
        assert_eq!(p.feat, 0.0);
        assert_eq!(p.total, p.simple);
    }

    #[test]
    fn zero_weights_collapse_to_simple() {
        let teacher = DenoiserNet::teacher(shape(), Seed(2)).unwrap();
        let student = DenoiserNet::student_from(&teacher, StudentKind::LinFusion { rank: 2, flags: BlockFlags::default() }, Seed(3)).unwrap();
        let p = composite_loss(&student, &teacher, &batch(), &NoiseSchedule::toy(), LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert!(p.kd > 0.0 && p.feat > 0.0);
        assert_eq!(p.total, p.simple);
    }

    #[test]
    fn parts_match_independent_recomputation() {
        let sched = NoiseSchedule::toy();
        let teacher = DenoiserNet::teacher(shape(), Seed(4)).unwrap();
        let student = DenoiserNet::student_from(&teacher, StudentKind::LinFusion { rank: 2, flags: BlockFlags::default() }, Seed(5)).unwrap();
        let b = batch();
        let p = composite_loss(&student, &teacher, &b, &sched, LossWeights::default()).unwrap();
        let (mut simple, mut kd, mut feat) = (0.0, 0.0, 0.0);
        for s in &b {
            let zt = diffuse(&s.z0, s.t, &s.eps, &sched).unwrap();
            let so = student.forward(&zt, s.t).unwrap();
            let to = teacher.forward(&zt, s.t).unwrap();
            simple += so.eps.sub(&s.eps).unwrap().mean_square();
            kd += so.eps.sub(&to.eps).unwrap().mean_square();
            let layers: f64 = so.taps.iter().zip(&to.taps).map(|(a, b)| a.sub(b).unwrap().mean_square()).sum();
            feat += layers / so.taps.len() as f64;
        }
        let k = b.len() as f64;
        let (simple, kd, feat) = (simple / k, kd / k, feat / k);
        assert!((p.simple - simple).abs() < 1e-12 * simple);
        assert!((p.kd - kd).abs() < 1e-12 * kd);
        assert!((p.feat - feat).abs() < 1e-12 * feat);
        assert!((p.total - (simple + 0.5 * (kd + feat))).abs() < 1e-12 * p.total);
        assert!(p.simple >= 0.0 && p.kd >= 0.0 && p.feat >= 0.0);
        assert!((denoising_loss(&student, &b, &sched).unwrap() - simple).abs() < 1e-12 * simple);
        let held = HeldOut::new(&teacher, &b, &sched).unwrap();
        assert!((held.kd(&student).unwrap() - kd).abs() < 1e-12 * kd);
    }

    #[test]
    fn layer_mismatch_is_a_tap_error() {
        let teacher = DenoiserNet::teacher(shape(), Seed(6)).unwrap();
        let mut student = teacher.clone();
        student.mixers.pop();
        student.backbone.layers.pop();
        let err = composite_loss(&student, &teacher, &batch(), &NoiseSchedule::toy(), LossWeights::default()).unwrap_err();
        assert_eq!(err, Error::Tap { student: 1, teacher: 2 });
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights::new(-0.1, 0.5).is_err());
    }
}
