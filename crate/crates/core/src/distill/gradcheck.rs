//! Central-difference verification of tape gradients.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Seed};

use super::loss::{sample_loss_on_tape, LossWeights, Sample};
use super::net::{bind, BoundNet, DenoiserNet};
use super::schedule::NoiseSchedule;

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// A named tensor that belongs to a parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTensor {
    pub name: String,
    pub group: String,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    /// `(group, probes, max rel err)` in first-appearance order.
    pub groups: Vec<(String, usize, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn group_order(tensors: &[ProbeTensor]) -> Vec<String> {
    let mut groups: Vec<String> = Vec::new();
    for t in tensors {
        if !groups.contains(&t.group) {
            groups.push(t.group.clone());
        }
    }
    groups
}

/// Probes `probe_count` coordinates, cycling through the parameter groups
/// so each is covered; within a group a coordinate is drawn uniformly.
///
/// `loss` builds a scalar from tensors bound on the tape it is given; it
/// is called once with trainable leaves and twice per probe with constants.
pub fn finite_difference_check(
    tensors: &[ProbeTensor],
    loss: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    probe_count: usize,
    epsilon: f64,
    seed: Seed,
) -> Result<GradCheckReport> {
    if tensors.is_empty() || tensors.iter().any(|t| t.value.is_empty()) {
        return Err(Error::Config("gradient check needs non-empty tensors".into()));
    }
    let values: Vec<Matrix> = tensors.iter().map(|t| t.value.clone()).collect();
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &values, true);
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l);
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect();

    let eval = |k: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut vs = values.clone();
        vs[k].as_mut_slice()[idx] += delta;
        let mut t = Tape::new();
        let v = bind(&mut t, &vs, false);
        let l = loss(&mut t, &v)?;
        Ok(t.value(l)[(0, 0)])
    };

    let groups = group_order(tensors);
    let members: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| (0..tensors.len()).filter(|&i| &tensors[i].group == g).collect())
        .collect();
    let mut rng = seed.rng();
    let mut probes = Vec::with_capacity(probe_count);
    let mut per_group = vec![(0usize, 0.0f64); groups.len()];
    for p in 0..probe_count {
        let gi = p % groups.len();
        let size: usize = members[gi].iter().map(|&i| tensors[i].value.len()).sum();
        let mut pick = rng.random_range(0..size);
        let mut k = members[gi][0];
        for &i in &members[gi] {
            if pick < tensors[i].value.len() {
                k = i;
                break;
            }
            pick -= tensors[i].value.len();
        }
        let numeric = (eval(k, pick, epsilon)? - eval(k, pick, -epsilon)?) / (2.0 * epsilon);
        let a = analytic[k].as_slice()[pick];
        let rel_err = relative_error(a, numeric);
        per_group[gi].0 += 1;
        per_group[gi].1 = per_group[gi].1.max(rel_err);
        probes.push(Probe {
            tensor: k,
            index: pick,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_err,
        groups: groups
            .into_iter()
            .zip(per_group)
            .map(|(g, (n, e))| (g, n, e))
            .collect(),
    })
}

/// Result of checking a student against its teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGradCheck {
    pub report: GradCheckReport,
    /// Largest analytic gradient magnitude on any teacher parameter when
    /// the teacher is bound as trainable leaves.
    pub teacher_grad_max_abs: f64,
}

/// Checks the composite-loss gradient of every student mixer tensor.
pub fn student_gradcheck(
    student: &DenoiserNet,
    teacher: &DenoiserNet,
    batch: &[Sample],
    sched: &NoiseSchedule,
    weights: LossWeights,
    probe_count: usize,
    epsilon: f64,
    seed: Seed,
) -> Result<StudentGradCheck> {
    let mut tensors = Vec::new();
    let mut counts = Vec::new();
    for (l, m) in student.mixers.iter().enumerate() {
        let ts = m.tensors();
        counts.push(ts.len());
        for ((name, group), value) in m.tensor_labels().into_iter().zip(ts) {
            tensors.push(ProbeTensor {
                name: format!("layer{l}.{name}"),
                group: group.to_string(),
                value,
            });
        }
    }
    let build = |tape: &mut Tape, vars: &[Var], teacher_leaves: bool| -> Result<(Var, BoundNet)> {
        let mut mixers = Vec::with_capacity(counts.len());
        let mut offset = 0;
        for &c in &counts {
            mixers.push(vars[offset..offset + c].to_vec());
            offset += c;
        }
        let sv = BoundNet {
            backbone: bind(tape, &student.backbone.tensors(), false),
            mixers,
        };
        let tv = teacher.bind(tape, teacher_leaves, teacher_leaves);
        let mut parts = Vec::with_capacity(batch.len());
        for s in batch {
            parts.push(sample_loss_on_tape(tape, student, &sv, teacher, &tv, s, sched, weights)?.total);
        }
        let sum = tape.sum_scalars(&parts);
        Ok((tape.scale(sum, 1.0 / batch.len() as f64), tv))
    };
    let report = finite_difference_check(&tensors, |t, v| Ok(build(t, v, false)?.0), probe_count, epsilon, seed)?;

    // Same loss with every teacher tensor as a leaf.
    let mut tape = Tape::new();
    let values: Vec<Matrix> = tensors.iter().map(|t| t.value.clone()).collect();
    let vars = bind(&mut tape, &values, true);
    let (loss, tv) = build(&mut tape, &vars, true)?;
    let grads = tape.backward(loss);
    let teacher_grad_max_abs = tv
        .backbone
        .iter()
        .chain(tv.mixers.iter().flatten())
        .map(|&v| grads.get(v).map_or(0.0, Matrix::max_abs))
        .fold(0.0, f64::max);
    Ok(StudentGradCheck {
        report,
        teacher_grad_max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::BlockFlags;
    use crate::distill::net::{Mixer, NetShape, StudentKind};
    use crate::numerics::seeded_gaussian;

    #[test]
    fn linear_layer_is_exact() {
        let x = seeded_gaussian(6, 4, Seed(1));
        let y = seeded_gaussian(6, 3, Seed(2));
        let tensors = vec![
            ProbeTensor { name: "w".into(), group: "weight".into(), value: seeded_gaussian(4, 3, Seed(3)) },
            ProbeTensor { name: "b".into(), group: "bias".into(), value: seeded_gaussian(1, 3, Seed(4)) },
        ];
        let r = finite_difference_check(
            &tensors,
            |t, v| {
                let xv = t.constant(x.clone());
                let yv = t.constant(y.clone());
                let h = t.matmul(xv, v[0]);
                let h = t.add_row(h, v[1]);
                let d = t.sub(h, yv);
                Ok(t.mean_square(d))
            },
            20,
            DEFAULT_EPSILON,
            Seed(5),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-9, "{}", r.max_rel_err);
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.groups[0].1, 10);
    }

    #[test]
    fn student_block_gradients_and_frozen_teacher() {
        let shape = NetShape { height: 2, width: 3, dim: 8, depth: 2, heads: 2 };
        let teacher = DenoiserNet::teacher(shape, Seed(6)).unwrap();
        let flags = BlockFlags { normalized: true, gated: true, rms_normed: true };
        for kind in [StudentKind::LinFusion { rank: 2, flags }, StudentKind::Ssm { flags }] {
            let mut student = DenoiserNet::student_from(&teacher, kind, Seed(7)).unwrap();
            for m in &mut student.mixers {
                if let Mixer::LinFusion(p) = m {
                    for f in p.query_maps.iter_mut().chain(p.key_maps.iter_mut()) {
                        let (r, c) = f.outer.shape();
                        f.outer = seeded_gaussian(r, c, Seed(8)).scale(0.2);
                    }
                }
            }
            let batch = vec![Sample {
                z0: seeded_gaussian(6, 8, Seed(9)),
                t: 40,
                eps: seeded_gaussian(6, 8, Seed(10)),
            }];
            let r = student_gradcheck(&student, &teacher, &batch, &NoiseSchedule::toy(), LossWeights::default(), 60, DEFAULT_EPSILON, Seed(11)).unwrap();
            assert!(r.report.max_rel_err <= 1e-4, "{:?}", r.report.groups);
            assert_eq!(r.teacher_grad_max_abs, 0.0);
        }
    }
}
