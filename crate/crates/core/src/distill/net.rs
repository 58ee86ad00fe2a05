//! The toy denoiser: a pre-norm transformer-style backbone whose token
//! mixer is softmax attention (teacher), the linear-attention block or the
//! two-directional scan block (students).
//!
//! Every network is evaluated on an autograd [`Tape`]; parameters are bound
//! either as trainable leaves or as constants, so the same code serves
//! inference, teacher training and distillation.

use crate::autograd::{Decay, Tape, Var};
use crate::block::{BlockFlags, RMS_EPS};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::linattn::{linfusion_block, FeatureMapParams, LinFusionBlockParams, LAYER_NORM_EPS};
use crate::numerics::{gaussian_from, Matrix, Seed};
use crate::ssm::{ssm_block, GateProjection, SsmBlockParams, MIN_DENOMINATOR};

use super::schedule::time_embedding;

pub const MLP_RATIO: usize = 4;
pub const NET_NORM_EPS: f64 = 1e-5;
/// Initial forget-gate value of a scan student, before any input dependence.
pub const SSM_INIT_GATE: f64 = 0.9;

const BACKBONE_TENSORS_PER_LAYER: usize = 8;
const FEATURE_MAP_TENSORS: usize = 7;

/// Placeholder for a text condition; there is only the empty one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NullCondition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl NetShape {
    /// 16×16 tokens, width 32, four layers, four heads.
    pub fn toy() -> Self {
        NetShape {
            height: 16,
            width: 16,
            dim: 32,
            depth: 4,
            heads: 4,
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens() == 0 || self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }
}

/// Everything in a layer except the mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_scale: Vec<f64>,
    pub ln1_shift: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln2_scale: Vec<f64>,
    pub ln2_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<LayerParams>,
    pub out_scale: Vec<f64>,
    pub out_shift: Vec<f64>,
    pub w_head: Matrix,
    pub b_head: Vec<f64>,
}

/// Multi-head softmax attention with output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMixer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Softmax(SoftmaxMixer),
    LinFusion(LinFusionBlockParams),
    Ssm(SsmBlockParams),
}

/// How to build a student's mixers from a softmax teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentKind {
    LinFusion { rank: usize, flags: BlockFlags },
    Ssm { flags: BlockFlags },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub shape: NetShape,
    pub backbone: Backbone,
    pub mixers: Vec<Mixer>,
}

/// Network output and the per-layer mixer outputs (taken before the
/// residual add).
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub eps: Matrix,
    pub taps: Vec<Matrix>,
}

/// Tape handles of a bound network.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub backbone: Vec<Var>,
    pub mixers: Vec<Vec<Var>>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct TapeOutput {
    pub eps: Var,
    pub taps: Vec<Var>,
}

fn row(v: &[f64]) -> Matrix {
    Matrix::row_vector(v)
}

fn scaled_gaussian(seed: Seed, rows: usize, cols: usize, scale: f64) -> Matrix {
    gaussian_from(&mut seed.rng(), rows, cols).scale(scale)
}

fn set_row(dst: &mut Vec<f64>, m: &Matrix, what: &'static str) -> Result<()> {
    if m.shape() != (1, dst.len()) {
        return Err(Error::shape(what, format!("expected 1x{}, got {:?}", dst.len(), m.shape())));
    }
    dst.copy_from_slice(m.as_slice());
    Ok(())
}

fn set_matrix(dst: &mut Matrix, m: &Matrix, what: &'static str) -> Result<()> {
    if m.shape() != dst.shape() {
        return Err(Error::shape(what, format!("expected {:?}, got {:?}", dst.shape(), m.shape())));
    }
    *dst = m.clone();
    Ok(())
}

impl Backbone {
    fn random(shape: &NetShape, seed: Seed) -> Self {
        let d = shape.dim;
        let hidden = MLP_RATIO * d;
        let layers = (0..shape.depth)
            .map(|l| {
                let s = seed.derive(l as u64);
                LayerParams {
                    ln1_scale: vec![1.0; d],
                    ln1_shift: vec![0.0; d],
                    w1: scaled_gaussian(s.derive(0), d, hidden, 1.0 / (d as f64).sqrt()),
                    b1: vec![0.0; hidden],
                    w2: scaled_gaussian(s.derive(1), hidden, d, 0.5 / (hidden as f64).sqrt()),
                    b2: vec![0.0; d],
                    ln2_scale: vec![1.0; d],
                    ln2_shift: vec![0.0; d],
                }
            })
            .collect();
        Backbone {
            layers,
            out_scale: vec![1.0; d],
            out_shift: vec![0.0; d],
            w_head: scaled_gaussian(seed.derive(u64::MAX), d, d, 0.1 / (d as f64).sqrt()),
            b_head: vec![0.0; d],
        }
    }

    /// Canonical flat order: per layer `ln1 scale/shift, w1, b1, w2, b2,
    /// ln2 scale/shift`, then the output norm and head.
    pub fn tensors(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([
                row(&l.ln1_scale),
                row(&l.ln1_shift),
                l.w1.clone(),
                row(&l.b1),
                l.w2.clone(),
                row(&l.b2),
                row(&l.ln2_scale),
                row(&l.ln2_shift),
            ]);
        }
        out.extend([
            row(&self.out_scale),
            row(&self.out_shift),
            self.w_head.clone(),
            row(&self.b_head),
        ]);
        out
    }

    pub fn set_tensors(&mut self, ts: &[Matrix]) -> Result<()> {
        let expected = self.layers.len() * BACKBONE_TENSORS_PER_LAYER + 4;
        if ts.len() != expected {
            return Err(Error::shape("Backbone::set_tensors", format!("{} tensors, expected {expected}", ts.len())));
        }
        for (l, chunk) in self.layers.iter_mut().zip(ts.chunks(BACKBONE_TENSORS_PER_LAYER)) {
            set_row(&mut l.ln1_scale, &chunk[0], "ln1_scale")?;
            set_row(&mut l.ln1_shift, &chunk[1], "ln1_shift")?;
            set_matrix(&mut l.w1, &chunk[2], "w1")?;
            set_row(&mut l.b1, &chunk[3], "b1")?;
            set_matrix(&mut l.w2, &chunk[4], "w2")?;
            set_row(&mut l.b2, &chunk[5], "b2")?;
            set_row(&mut l.ln2_scale, &chunk[6], "ln2_scale")?;
            set_row(&mut l.ln2_shift, &chunk[7], "ln2_shift")?;
        }
        let tail = &ts[expected - 4..];
        set_row(&mut self.out_scale, &tail[0], "out_scale")?;
        set_row(&mut self.out_shift, &tail[1], "out_shift")?;
        set_matrix(&mut self.w_head, &tail[2], "w_head")?;
        set_row(&mut self.b_head, &tail[3], "b_head")
    }
}

fn feature_map_tensors(p: &FeatureMapParams) -> [Matrix; FEATURE_MAP_TENSORS] {
    [
        p.linear.clone(),
        p.inner.clone(),
        row(&p.inner_bias),
        row(&p.norm_scale),
        row(&p.norm_shift),
        p.outer.clone(),
        row(&p.outer_bias),
    ]
}

fn set_feature_map(p: &mut FeatureMapParams, ts: &[Matrix]) -> Result<()> {
    set_matrix(&mut p.linear, &ts[0], "linear")?;
    set_matrix(&mut p.inner, &ts[1], "inner")?;
    set_row(&mut p.inner_bias, &ts[2], "inner_bias")?;
    set_row(&mut p.norm_scale, &ts[3], "norm_scale")?;
    set_row(&mut p.norm_shift, &ts[4], "norm_shift")?;
    set_matrix(&mut p.outer, &ts[5], "outer")?;
    set_row(&mut p.outer_bias, &ts[6], "outer_bias")
}

fn projection_tensors(p: &GateProjection) -> [Matrix; 4] {
    [
        Matrix::col_vector(&p.w_a),
        row(&[p.bias_a]),
        p.w_b.clone(),
        p.w_c.clone(),
    ]
}

fn set_projection(p: &mut GateProjection, ts: &[Matrix]) -> Result<()> {
    if ts[0].shape() != (p.w_a.len(), 1) || ts[1].shape() != (1, 1) {
        return Err(Error::shape("GateProjection", "forget-gate tensor shapes"));
    }
    p.w_a.copy_from_slice(ts[0].as_slice());
    p.bias_a = ts[1][(0, 0)];
    set_matrix(&mut p.w_b, &ts[2], "w_b")?;
    set_matrix(&mut p.w_c, &ts[3], "w_c")
}

impl Mixer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Mixer::Softmax(_) => "softmax",
            Mixer::LinFusion(_) => "linfusion",
            Mixer::Ssm(_) => "ssm",
        }
    }

    /// Canonical flat order of the trainable tensors.
    pub fn tensors(&self) -> Vec<Matrix> {
        match self {
            Mixer::Softmax(m) => vec![m.wq.clone(), m.wk.clone(), m.wv.clone(), m.wo.clone()],
            Mixer::LinFusion(p) => {
                let mut out = Vec::new();
                for m in p.query_maps.iter().chain(&p.key_maps) {
                    out.extend(feature_map_tensors(m));
                }
                out.extend([p.w_v.clone(), p.w_out.clone(), p.w_gate.clone(), row(&p.rms_scale)]);
                out
            }
            Mixer::Ssm(p) => {
                let mut out = Vec::new();
                out.extend(projection_tensors(&p.fwd));
                out.extend(projection_tensors(&p.bwd));
                out.extend([p.w_v.clone(), p.w_out.clone(), p.w_gate.clone(), row(&p.rms_scale)]);
                out
            }
        }
    }

    /// Names and parameter groups, parallel to [`Mixer::tensors`].
    pub fn tensor_labels(&self) -> Vec<(String, &'static str)> {
        let tail = |out: &mut Vec<(String, &'static str)>| {
            out.push(("w_v".into(), "value/output projection"));
            out.push(("w_out".into(), "value/output projection"));
            out.push(("w_gate".into(), "output gate"));
            out.push(("rms_scale".into(), "rms scale"));
        };
        match self {
            Mixer::Softmax(_) => ["wq", "wk", "wv", "wo"]
                .iter()
                .map(|n| (n.to_string(), "softmax attention"))
                .collect(),
            Mixer::LinFusion(p) => {
                let mut out = Vec::new();
                let names = ["linear", "inner", "inner_bias", "norm_scale", "norm_shift", "outer", "outer_bias"];
                for (side, count) in [("q", p.query_maps.len()), ("k", p.key_maps.len())] {
                    for h in 0..count {
                        for (i, n) in names.iter().enumerate() {
                            let group = if i == 0 { "linear branch" } else { "nonlinear branch" };
                            out.push((format!("{side}{h}.{n}"), group));
                        }
                    }
                }
                tail(&mut out);
                out
            }
            Mixer::Ssm(_) => {
                let mut out = Vec::new();
                for dir in ["fwd", "bwd"] {
                    for n in ["w_a", "bias_a", "w_b", "w_c"] {
                        out.push((format!("{dir}.{n}"), "gate projection"));
                    }
                }
                tail(&mut out);
                out
            }
        }
    }

    pub fn set_tensors(&mut self, ts: &[Matrix]) -> Result<()> {
        let expected = self.tensors().len();
        if ts.len() != expected {
            return Err(Error::shape("Mixer::set_tensors", format!("{} tensors, expected {expected}", ts.len())));
        }
        match self {
            Mixer::Softmax(m) => {
                set_matrix(&mut m.wq, &ts[0], "wq")?;
                set_matrix(&mut m.wk, &ts[1], "wk")?;
                set_matrix(&mut m.wv, &ts[2], "wv")?;
                set_matrix(&mut m.wo, &ts[3], "wo")
            }
            Mixer::LinFusion(p) => {
                let maps = p.query_maps.iter_mut().chain(p.key_maps.iter_mut());
                for (m, chunk) in maps.zip(ts.chunks(FEATURE_MAP_TENSORS)) {
                    set_feature_map(m, chunk)?;
                }
                let tail = &ts[expected - 4..];
                set_matrix(&mut p.w_v, &tail[0], "w_v")?;
                set_matrix(&mut p.w_out, &tail[1], "w_out")?;
                set_matrix(&mut p.w_gate, &tail[2], "w_gate")?;
                set_row(&mut p.rms_scale, &tail[3], "rms_scale")
            }
            Mixer::Ssm(p) => {
                set_projection(&mut p.fwd, &ts[0..4])?;
                set_projection(&mut p.bwd, &ts[4..8])?;
                set_matrix(&mut p.w_v, &ts[8], "w_v")?;
                set_matrix(&mut p.w_out, &ts[9], "w_out")?;
                set_matrix(&mut p.w_gate, &ts[10], "w_gate")?;
                set_row(&mut p.rms_scale, &ts[11], "rms_scale")
            }
        }
    }

    /// Mixer output for an `n×d` input, outside any tape.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Mixer::LinFusion(p) => linfusion_block(x, p),
            Mixer::Ssm(p) => ssm_block(x, p),
            Mixer::Softmax(_) => {
                let mut tape = Tape::new();
                let vars = bind(&mut tape, &self.tensors(), false);
                let xv = tape.constant(x.clone());
                let y = mixer_on_tape(&mut tape, self, &vars, xv)?;
                Ok(tape.value(y).clone())
            }
        }
    }

    pub fn flags(&self) -> Option<BlockFlags> {
        match self {
            Mixer::Softmax(_) => None,
            Mixer::LinFusion(p) => Some(p.flags),
            Mixer::Ssm(p) => Some(p.flags),
        }
    }

    pub fn set_flags(&mut self, flags: BlockFlags) {
        match self {
            Mixer::Softmax(_) => {}
            Mixer::LinFusion(p) => p.flags = flags,
            Mixer::Ssm(p) => p.flags = flags,
        }
    }
}

/// Binds tensors as trainable leaves or constants.
pub fn bind(tape: &mut Tape, tensors: &[Matrix], trainable: bool) -> Vec<Var> {
    tensors
        .iter()
        .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
        .collect()
}

fn ln_affine(tape: &mut Tape, x: Var, scale: Var, shift: Var, eps: f64) -> Var {
    let n = tape.layer_norm(x, eps);
    let n = tape.mul_row(n, scale);
    tape.add_row(n, shift)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn feature_map_on_tape(tape: &mut Tape, x: Var, v: &[Var], slope: f64) -> Var {
    let lin = tape.matmul(x, v[0]);
    let h = linear(tape, x, v[1], v[2]);
    let h = ln_affine(tape, h, v[3], v[4], LAYER_NORM_EPS);
    let h = tape.leaky_relu(h, slope);
    let nl = linear(tape, h, v[5], v[6]);
    let pre = tape.add(lin, nl);
    tape.softplus(pre)
}

fn post_mix_on_tape(tape: &mut Tape, y: Var, x: Var, flags: BlockFlags, w_gate: Var, rms_scale: Var) -> Var {
    let mut y = y;
    if flags.gated {
        let g = tape.matmul(x, w_gate);
        let g = tape.silu(g);
        y = tape.mul(y, g);
    }
    if flags.rms_normed {
        y = tape.rms_norm(y, RMS_EPS);
        y = tape.mul_row(y, rms_scale);
    }
    y
}

/// `y / den` after checking every denominator is safely positive.
fn checked_div(tape: &mut Tape, num: Var, den: Var, feature: bool) -> Result<Var> {
    for (token, &value) in tape.value(den).as_slice().iter().enumerate() {
        if !(value > MIN_DENOMINATOR) {
            return Err(if feature {
                Error::DegenerateFeature { token, value }
            } else {
                Error::DegenerateGate { token, value }
            });
        }
    }
    Ok(tape.div_col(num, den))
}

/// `(log a, B, C)` for one scan direction.
fn gates_on_tape(tape: &mut Tape, x: Var, v: &[Var]) -> (Var, Var, Var) {
    let pre = linear(tape, x, v[0], v[1]);
    // log logistic(u) = -softplus(-u)
    let neg = tape.scale(pre, -1.0);
    let sp = tape.softplus(neg);
    let log_a = tape.scale(sp, -1.0);
    let b = tape.matmul(x, v[2]);
    let b = tape.softplus(b);
    let c = tape.matmul(x, v[3]);
    let c = tape.softplus(c);
    (log_a, b, c)
}

/// One mixer applied to a bound input; shares its math with the
/// corresponding stand-alone block.
pub fn mixer_on_tape(tape: &mut Tape, mixer: &Mixer, v: &[Var], x: Var) -> Result<Var> {
    match mixer {
        Mixer::Softmax(m) => {
            let q = tape.matmul(x, v[0]);
            let k = tape.matmul(x, v[1]);
            let val = tape.matmul(x, v[2]);
            let hd = m.wq.cols() / m.heads;
            let vd = m.wv.cols() / m.heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut outs = Vec::with_capacity(m.heads);
            for h in 0..m.heads {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(k, h * hd, hd);
                let vh = tape.slice_cols(val, h * vd, vd);
                let s = tape.matmul_nt(qh, kh);
                let s = tape.scale(s, scale);
                let a = tape.row_softmax(s);
                outs.push(tape.matmul(a, vh));
            }
            let y = tape.concat_cols(&outs);
            Ok(tape.matmul(y, v[3]))
        }
        Mixer::LinFusion(p) => {
            let heads = p.heads();
            let hd = p.head_dim();
            let tail = &v[2 * heads * FEATURE_MAP_TENSORS..];
            let val = tape.matmul(x, tail[0]);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qv = &v[h * FEATURE_MAP_TENSORS..(h + 1) * FEATURE_MAP_TENSORS];
                let kv = &v[(heads + h) * FEATURE_MAP_TENSORS..(heads + h + 1) * FEATURE_MAP_TENSORS];
                let phi_q = feature_map_on_tape(tape, x, qv, p.query_maps[h].leaky_slope);
                let phi_k = feature_map_on_tape(tape, x, kv, p.key_maps[h].leaky_slope);
                let vh = tape.slice_cols(val, h * hd, hd);
                let s = tape.matmul_tn(phi_k, vh);
                let num = tape.matmul(phi_q, s);
                outs.push(if p.flags.normalized {
                    let z = tape.col_sum(phi_k);
                    let den = tape.matmul_nt(phi_q, z);
                    checked_div(tape, num, den, true)?
                } else {
                    num
                });
            }
            let y = tape.concat_cols(&outs);
            let y = post_mix_on_tape(tape, y, x, p.flags, tail[2], tail[3]);
            Ok(tape.matmul(y, tail[1]))
        }
        Mixer::Ssm(p) => {
            let (la_f, b_f, c_f) = gates_on_tape(tape, x, &v[0..4]);
            let (la_b, b_b, c_b) = if p.shared_bc {
                let pre = linear(tape, x, v[4], v[5]);
                let neg = tape.scale(pre, -1.0);
                let sp = tape.softplus(neg);
                (tape.scale(sp, -1.0), b_f, c_f)
            } else {
                gates_on_tape(tape, x, &v[4..8])
            };
            let val = tape.matmul(x, v[8]);
            let m_f = tape.decay_mask(la_f, Decay::Forward);
            let m_b = tape.decay_mask(la_b, Decay::BackwardStrict);
            let cb_f = tape.matmul_nt(c_f, b_f);
            let cb_b = tape.matmul_nt(c_b, b_b);
            let a_f = tape.mul(cb_f, m_f);
            let a_b = tape.mul(cb_b, m_b);
            let a = tape.add(a_f, a_b);
            let num = tape.matmul(a, val);
            let y = if p.flags.normalized {
                let den = tape.row_sum(a);
                checked_div(tape, num, den, false)?
            } else {
                num
            };
            let y = post_mix_on_tape(tape, y, x, p.flags, v[10], v[11]);
            Ok(tape.matmul(y, v[9]))
        }
    }
}

impl DenoiserNet {
    /// A randomly initialized softmax-attention network.
    pub fn teacher(shape: NetShape, seed: Seed) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let std = 1.0 / (d as f64).sqrt();
        let mixers = (0..shape.depth)
            .map(|l| {
                let s = seed.derive(1000 + l as u64);
                Mixer::Softmax(SoftmaxMixer {
                    wq: scaled_gaussian(s.derive(0), d, d, std),
                    wk: scaled_gaussian(s.derive(1), d, d, std),
                    wv: scaled_gaussian(s.derive(2), d, d, std),
                    wo: scaled_gaussian(s.derive(3), d, d, std),
                    heads: shape.heads,
                })
            })
            .collect();
        Ok(DenoiserNet {
            shape,
            backbone: Backbone::random(&shape, seed.derive(0)),
            mixers,
        })
    }

    /// Copies the teacher's backbone and replaces every softmax mixer.
    pub fn student_from(teacher: &DenoiserNet, kind: StudentKind, seed: Seed) -> Result<Self> {
        let d = teacher.shape.dim;
        let mut mixers = Vec::with_capacity(teacher.mixers.len());
        for (l, m) in teacher.mixers.iter().enumerate() {
            let Mixer::Softmax(t) = m else {
                return Err(Error::Config(format!("teacher layer {l} is not softmax attention")));
            };
            let s = seed.derive(l as u64);
            mixers.push(match kind {
                StudentKind::LinFusion { rank, flags } => {
                    let mut p = LinFusionBlockParams::from_teacher(&t.wq, &t.wk, &t.wv, &t.wo, t.heads, rank, s)?;
                    p.flags = flags;
                    Mixer::LinFusion(p)
                }
                StudentKind::Ssm { flags } => {
                    let bias_a = (SSM_INIT_GATE / (1.0 - SSM_INIT_GATE)).ln();
                    let proj = GateProjection {
                        w_a: vec![0.0; d],
                        bias_a,
                        w_b: t.wk.clone(),
                        w_c: t.wq.clone(),
                    };
                    Mixer::Ssm(SsmBlockParams {
                        fwd: proj.clone(),
                        bwd: proj,
                        shared_bc: true,
                        w_v: t.wv.clone(),
                        w_out: t.wo.clone(),
                        w_gate: scaled_gaussian(s, d, d, 1.0 / (d as f64).sqrt()),
                        rms_scale: vec![1.0; d],
                        flags,
                    })
                }
            });
        }
        Ok(DenoiserNet {
            shape: teacher.shape,
            backbone: teacher.backbone.clone(),
            mixers,
        })
    }

    pub fn depth(&self) -> usize {
        self.mixers.len()
    }

    pub fn mixer_tensors(&self) -> Vec<Vec<Matrix>> {
        self.mixers.iter().map(Mixer::tensors).collect()
    }

    pub fn set_mixer_tensors(&mut self, ts: &[Vec<Matrix>]) -> Result<()> {
        if ts.len() != self.mixers.len() {
            return Err(Error::Tap {
                student: ts.len(),
                teacher: self.mixers.len(),
            });
        }
        for (m, t) in self.mixers.iter_mut().zip(ts) {
            m.set_tensors(t)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, backbone_trainable: bool, mixers_trainable: bool) -> BoundNet {
        BoundNet {
            backbone: bind(tape, &self.backbone.tensors(), backbone_trainable),
            mixers: self
                .mixers
                .iter()
                .map(|m| bind(tape, &m.tensors(), mixers_trainable))
                .collect(),
        }
    }

    /// Predicted noise for `z` at step `t`, built on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundNet, z: Var, t: usize) -> Result<TapeOutput> {
        let d = self.shape.dim;
        if tape.value(z).cols() != d {
            return Err(Error::shape("DenoiserNet::forward", format!("input width {} != {d}", tape.value(z).cols())));
        }
        let temb = tape.constant(row(&time_embedding(t, d)));
        let mut h = tape.add_row(z, temb);
        let mut taps = Vec::with_capacity(self.depth());
        for (l, mixer) in self.mixers.iter().enumerate() {
            let p = &bound.backbone[l * BACKBONE_TENSORS_PER_LAYER..(l + 1) * BACKBONE_TENSORS_PER_LAYER];
            let u = ln_affine(tape, h, p[0], p[1], NET_NORM_EPS);
            let m = mixer_on_tape(tape, mixer, &bound.mixers[l], u)?;
            taps.push(m);
            h = tape.add(h, m);
            let u = ln_affine(tape, h, p[6], p[7], NET_NORM_EPS);
            let a = linear(tape, u, p[2], p[3]);
            let a = tape.silu(a);
            let a = linear(tape, a, p[4], p[5]);
            h = tape.add(h, a);
        }
        let tail = &bound.backbone[self.depth() * BACKBONE_TENSORS_PER_LAYER..];
        let o = ln_affine(tape, h, tail[0], tail[1], NET_NORM_EPS);
        let eps = linear(tape, o, tail[2], tail[3]);
        Ok(TapeOutput { eps, taps })
    }

    /// `ε(z_t, t, y)` with the condition `y` always null: generation here is
    /// unconditional, the slot only keeps the usual three-argument shape.
    pub fn forward_conditioned(&self, z: &Matrix, t: usize, _y: NullCondition) -> Result<NetOutput> {
        self.forward(z, t)
    }

    /// Inference: predicted noise and mixer taps.
    pub fn forward(&self, z: &Matrix, t: usize) -> Result<NetOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let zv = tape.constant(z.clone());
        let out = self.forward_on_tape(&mut tape, &bound, zv, t)?;
        Ok(NetOutput {
            eps: tape.value(out.eps).clone(),
            taps: out.taps.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let s = self.shape;
        ck.put_vec(
            "shape",
            &[s.height, s.width, s.dim, s.depth, s.heads].map(|v| v as f64),
        );
        for (i, t) in self.backbone.tensors().into_iter().enumerate() {
            ck.put(format!("backbone.{i}"), t);
        }
        for (l, m) in self.mixers.iter().enumerate() {
            let prefix = format!("mixer{l}");
            match m {
                Mixer::Softmax(sm) => {
                    ck.put_scalar(format!("{prefix}.softmax_heads"), sm.heads as f64);
                    for (name, t) in ["wq", "wk", "wv", "wo"].iter().zip(m.tensors()) {
                        ck.put(format!("{prefix}.{name}"), t);
                    }
                }
                Mixer::LinFusion(p) => {
                    ck.put_scalar(format!("{prefix}.kind"), 1.0);
                    checkpoint::write_linfusion_block(&mut ck, &prefix, p);
                }
                Mixer::Ssm(p) => {
                    ck.put_scalar(format!("{prefix}.kind"), 2.0);
                    checkpoint::write_ssm_block(&mut ck, &prefix, p);
                }
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dims = ck.get_vec("shape")?;
        if dims.len() != 5 || dims.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Format("bad network shape record".into()));
        }
        let shape = NetShape {
            height: dims[0] as usize,
            width: dims[1] as usize,
            dim: dims[2] as usize,
            depth: dims[3] as usize,
            heads: dims[4] as usize,
        };
        shape.validate()?;
        let mut backbone = Backbone::random(&shape, Seed(0));
        let count = shape.depth * BACKBONE_TENSORS_PER_LAYER + 4;
        let ts = (0..count)
            .map(|i| ck.get(&format!("backbone.{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        backbone.set_tensors(&ts)?;
        let mut mixers = Vec::with_capacity(shape.depth);
        for l in 0..shape.depth {
            let prefix = format!("mixer{l}");
            if let Ok(heads) = ck.get_scalar(&format!("{prefix}.softmax_heads")) {
                let get = |n: &str| ck.get(&format!("{prefix}.{n}")).cloned();
                mixers.push(Mixer::Softmax(SoftmaxMixer {
                    wq: get("wq")?,
                    wk: get("wk")?,
                    wv: get("wv")?,
                    wo: get("wo")?,
                    heads: heads as usize,
                }));
                continue;
            }
            mixers.push(match ck.get_scalar(&format!("{prefix}.kind"))? as u32 {
                1 => Mixer::LinFusion(checkpoint::read_linfusion_block(ck, &prefix)?),
                2 => Mixer::Ssm(checkpoint::read_ssm_block(ck, &prefix)?),
                k => return Err(Error::Format(format!("unknown mixer kind {k}"))),
            });
        }
        Ok(DenoiserNet { shape, backbone, mixers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_gaussian;
    use crate::oracle::softmax_attention;

    fn small_shape() -> NetShape {
        NetShape {
            height: 3,
            width: 4,
            dim: 8,
            depth: 2,
            heads: 2,
        }
    }

    fn perturb_outer(net: &mut DenoiserNet, seed: Seed) {
        for (l, m) in net.mixers.iter_mut().enumerate() {
            if let Mixer::LinFusion(p) = m {
                for (h, f) in p.query_maps.iter_mut().chain(p.key_maps.iter_mut()).enumerate() {
                    let (r, c) = f.outer.shape();
                    f.outer = seeded_gaussian(r, c, seed.derive((l * 100 + h) as u64)).scale(0.3);
                }
            }
        }
    }

    #[test]
    fn null_condition_is_the_unconditional_forward() {
        let t = DenoiserNet::teacher(small_shape(), Seed(1)).unwrap();
        let z = seeded_gaussian(small_shape().tokens(), 8, Seed(3));
        assert_eq!(t.forward_conditioned(&z, 10, NullCondition).unwrap(), t.forward(&z, 10).unwrap());
    }

    #[test]
    fn softmax_mixer_matches_per_head_oracle() {
        let t = DenoiserNet::teacher(small_shape(), Seed(1)).unwrap();
        let Mixer::Softmax(m) = &t.mixers[0] else { unreachable!() };
        let x = seeded_gaussian(12, 8, Seed(2));
        let y = t.mixers[0].forward(&x).unwrap();
        let heads: Vec<Matrix> = (0..2)
            .map(|h| softmax_attention(&x, &m.wq.slice_cols(4 * h, 4), &m.wk.slice_cols(4 * h, 4), &m.wv.slice_cols(4 * h, 4)).unwrap())
            .collect();
        let expect = crate::numerics::dense_matmul(&Matrix::hconcat(&heads).unwrap(), &m.wo).unwrap();
        assert!(y.rel_err(&expect) < 1e-12);
    }

    #[test]
    fn tape_mixers_match_stand_alone_blocks() {
        let teacher = DenoiserNet::teacher(small_shape(), Seed(3)).unwrap();
        let x = seeded_gaussian(12, 8, Seed(4));
        for bits in 0..8u8 {
            let flags = BlockFlags::from_bits(bits).unwrap();
            for kind in [StudentKind::LinFusion { rank: 2, flags }, StudentKind::Ssm { flags }] {
                let mut s = DenoiserNet::student_from(&teacher, kind, Seed(5)).unwrap();
                perturb_outer(&mut s, Seed(6));
                let mixer = &s.mixers[1];
                let mut tape = Tape::new();
                let vars = bind(&mut tape, &mixer.tensors(), true);
                let xv = tape.constant(x.clone());
                let y = mixer_on_tape(&mut tape, mixer, &vars, xv).unwrap();
                let plain = mixer.forward(&x).unwrap();
                let err = tape.value(y).rel_err(&plain);
                assert!(err < 1e-12, "{} flags {bits}: {err}", mixer.kind_name());
            }
        }
    }

    #[test]
    fn unshared_scan_gates_match() {
        let teacher = DenoiserNet::teacher(small_shape(), Seed(7)).unwrap();
        let mut s = DenoiserNet::student_from(&teacher, StudentKind::Ssm { flags: BlockFlags::default() }, Seed(8)).unwrap();
        let Mixer::Ssm(p) = &mut s.mixers[0] else { unreachable!() };
        p.shared_bc = false;
        p.bwd.w_b = seeded_gaussian(8, 8, Seed(9));
        p.bwd.w_a = seeded_gaussian(1, 8, Seed(10)).into_vec();
        let x = seeded_gaussian(12, 8, Seed(11));
        let mixer = &s.mixers[0];
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &mixer.tensors(), false);
        let xv = tape.constant(x.clone());
        let y = mixer_on_tape(&mut tape, mixer, &vars, xv).unwrap();
        assert!(tape.value(y).rel_err(&mixer.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn tensors_round_trip() {
        let teacher = DenoiserNet::teacher(small_shape(), Seed(12)).unwrap();
        let mut s = DenoiserNet::student_from(&teacher, StudentKind::LinFusion { rank: 2, flags: BlockFlags::default() }, Seed(13)).unwrap();
        let mut ts = s.mixer_tensors();
        assert_eq!(ts[0].len(), s.mixers[0].tensor_labels().len());
        ts[0][0] = ts[0][0].scale(2.0);
        s.set_mixer_tensors(&ts).unwrap();
        assert_eq!(s.mixer_tensors(), ts);
        let mut bb = s.backbone.clone();
        let bts = bb.tensors();
        bb.set_tensors(&bts).unwrap();
        assert_eq!(bb, s.backbone);
        assert!(s.set_mixer_tensors(&ts[..1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let teacher = DenoiserNet::teacher(small_shape(), Seed(14)).unwrap();
        let back = DenoiserNet::from_checkpoint(&Checkpoint::decode(&teacher.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back, teacher);
        for kind in [
            StudentKind::LinFusion { rank: 2, flags: BlockFlags::default() },
            StudentKind::Ssm { flags: BlockFlags { normalized: true, gated: true, rms_normed: true } },
        ] {
            let s = DenoiserNet::student_from(&teacher, kind, Seed(15)).unwrap();
            let back = DenoiserNet::from_checkpoint(&s.to_checkpoint()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn student_keeps_backbone_and_shapes() {
        let teacher = DenoiserNet::teacher(small_shape(), Seed(16)).unwrap();
        let s = DenoiserNet::student_from(&teacher, StudentKind::LinFusion { rank: 2, flags: BlockFlags::default() }, Seed(17)).unwrap();
        assert_eq!(s.backbone, teacher.backbone);
        let z = seeded_gaussian(12, 8, Seed(18));
        let out = s.forward(&z, 10).unwrap();
        assert_eq!(out.eps.shape(), (12, 8));
        assert_eq!(out.taps.len(), 2);
        assert!(DenoiserNet::student_from(&s, StudentKind::Ssm { flags: BlockFlags::default() }, Seed(0)).is_err());
    }
}
