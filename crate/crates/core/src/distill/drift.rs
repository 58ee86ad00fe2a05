//! Mixer output magnitude when the token count changes.

use crate::block::BlockFlags;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_from, Matrix, Seed};

use super::net::{DenoiserNet, Mixer};

/// Inputs fed straight into each mixer.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftProbe {
    /// Every token equals this vector.
    Constant(Vec<f64>),
    /// Per-channel means drawn once from `N(0, mean_scale²)` and shared by
    /// both shapes, plus independent `N(0, std²)` noise per token.
    Gaussian { mean_scale: f64, std: f64 },
}

impl Default for DriftProbe {
    fn default() -> Self {
        DriftProbe::Gaussian {
            mean_scale: 1.0,
            std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDrift {
    pub layer: usize,
    /// Per channel: mean |y| at the test shape over mean |y| at the train shape.
    pub per_channel: Vec<f64>,
    /// The same ratio over all channels together.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub train_tokens: usize,
    pub test_tokens: usize,
    pub layers: Vec<LayerDrift>,
}

impl DriftReport {
    /// Geometric mean of the per-layer ratios.
    pub fn mean_ratio(&self) -> f64 {
        let k = self.layers.len().max(1) as f64;
        (self.layers.iter().map(|l| l.ratio.ln()).sum::<f64>() / k).exp()
    }

    pub fn min_ratio(&self) -> f64 {
        self.layers.iter().map(|l| l.ratio).fold(f64::INFINITY, f64::min)
    }

    pub fn max_ratio(&self) -> f64 {
        self.layers.iter().map(|l| l.ratio).fold(0.0, f64::max)
    }
}

fn probe_input(probe: &DriftProbe, n: usize, d: usize, means: &[f64], seed: Seed) -> Matrix {
    match probe {
        DriftProbe::Constant(mu) => Matrix::from_fn(n, d, |_, j| mu[j]),
        DriftProbe::Gaussian { std, .. } => {
            let noise = gaussian_from(&mut seed.rng(), n, d);
            Matrix::from_fn(n, d, |i, j| means[j] + std * noise[(i, j)])
        }
    }
}

/// Mean |entry| per column and overall.
fn magnitudes(y: &Matrix) -> (Vec<f64>, f64) {
    let n = y.rows() as f64;
    let per: Vec<f64> = (0..y.cols())
        .map(|j| (0..y.rows()).map(|i| y[(i, j)].abs()).sum::<f64>() / n)
        .collect();
    let all = per.iter().sum::<f64>() / per.len() as f64;
    (per, all)
}

/// Ratio of mixer output magnitude at `test_tokens` to `train_tokens`,
/// for every layer of `net`.
pub fn cross_resolution_drift(
    net: &DenoiserNet,
    train_tokens: usize,
    test_tokens: usize,
    probe: &DriftProbe,
    seed: Seed,
) -> Result<DriftReport> {
    let d = net.shape.dim;
    if let DriftProbe::Constant(mu) = probe {
        if mu.len() != d {
            return Err(Error::shape("cross_resolution_drift", "constant probe width"));
        }
    }
    if train_tokens == 0 || test_tokens == 0 {
        return Err(Error::Config("token counts must be positive".into()));
    }
    let means = match probe {
        DriftProbe::Gaussian { mean_scale, .. } => gaussian_from(&mut seed.derive(0).rng(), 1, d)
            .scale(*mean_scale)
            .into_vec(),
        DriftProbe::Constant(_) => vec![0.0; d],
    };
    let x_train = probe_input(probe, train_tokens, d, &means, seed.derive(1));
    let x_test = probe_input(probe, test_tokens, d, &means, seed.derive(2));
    let layers = net
        .mixers
        .iter()
        .enumerate()
        .map(|(layer, m)| {
            let (pa, a) = magnitudes(&m.forward(&x_train)?);
            let (pb, b) = magnitudes(&m.forward(&x_test)?);
            Ok(LayerDrift {
                layer,
                per_channel: pb.iter().zip(&pa).map(|(b, a)| b / a).collect(),
                ratio: b / a,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DriftReport {
        train_tokens,
        test_tokens,
        layers,
    })
}

/// A copy of `net` with every mixer's normalization switched on or off.
pub fn with_normalization(net: &DenoiserNet, normalized: bool) -> DenoiserNet {
    let mut out = net.clone();
    for m in &mut out.mixers {
        if let Some(f) = m.flags() {
            m.set_flags(BlockFlags { normalized, ..f });
        }
    }
    out
}

/// Output-magnitude ratio of one mixer between two inputs.
pub fn mixer_drift(mixer: &Mixer, train: &Matrix, test: &Matrix) -> Result<f64> {
    Ok(magnitudes(&mixer.forward(test)?).1 / magnitudes(&mixer.forward(train)?).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::net::{NetShape, StudentKind};

    fn student(normalized: bool) -> DenoiserNet {
        let shape = NetShape { height: 4, width: 4, dim: 8, depth: 2, heads: 2 };
        let teacher = DenoiserNet::teacher(shape, Seed(1)).unwrap();
        let flags = BlockFlags { normalized, ..BlockFlags::default() };
        DenoiserNet::student_from(&teacher, StudentKind::LinFusion { rank: 2, flags }, Seed(2)).unwrap()
    }

    #[test]
    fn constant_probe_is_resolution_free_when_normalized() {
        let mu: Vec<f64> = (0..8).map(|j| 0.25 * j as f64 - 1.0).collect();
        let r = cross_resolution_drift(&student(true), 16, 64, &DriftProbe::Constant(mu), Seed(3)).unwrap();
        for l in &r.layers {
            assert!((l.ratio - 1.0).abs() < 1e-12, "{}", l.ratio);
        }
    }

    #[test]
    fn unnormalized_tiled_input_scales_with_copies() {
        let net = student(false);
        let x = gaussian_from(&mut Seed(4).rng(), 16, 8);
        for m in &net.mixers {
            let r = mixer_drift(m, &x, &x.tile_rows(4)).unwrap();
            assert!((r - 4.0).abs() < 1e-12, "{r}");
        }
    }

    #[test]
    fn random_probes_separate_the_variants() {
        let norm = cross_resolution_drift(&student(true), 64, 256, &DriftProbe::default(), Seed(5)).unwrap();
        let raw = cross_resolution_drift(&with_normalization(&student(true), false), 64, 256, &DriftProbe::default(), Seed(5)).unwrap();
        assert!(norm.min_ratio() >= 0.5 && norm.max_ratio() <= 2.0, "{norm:?}");
        assert!(raw.min_ratio() >= 3.0, "{raw:?}");
    }
}
