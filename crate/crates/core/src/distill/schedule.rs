//! Forward noising process and the timestep embedding.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Discrete variance schedule with `steps` levels, indexed `1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta` spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        let beta = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + frac * (beta_end - beta_start)
            })
            .collect();
        Self::from_betas(beta)
    }

    /// The default toy schedule: 100 steps, `1e-4 → 2e-2`.
    pub fn toy() -> Self {
        Self::linear(100, 1e-4, 2e-2).expect("toy schedule is valid")
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step {
                step: t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `ᾱ_t` for `t` in `1..=steps`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

/// `z_t = √ᾱ_t z0 + √(1-ᾱ_t) eps`.
pub fn diffuse(z0: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    let ab = sched.alpha_bar_at(t)?;
    diffuse_with(z0, ab, eps)
}

/// [`diffuse`] with `ᾱ` given directly.
pub fn diffuse_with(z0: &Matrix, alpha_bar: f64, eps: &Matrix) -> Result<Matrix> {
    let (s, r) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| s * z + r * e)
}

/// Sinusoidal embedding of the step index: pairs `(sin, cos)` of `t·ω_k`
/// with `ω_k = 10000^(-2k/d)`. Odd widths leave the last channel at zero.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (t as f64 * omega).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_from, seeded_gaussian, Seed};

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::toy();
        assert_eq!(s.steps(), 100);
        assert!((s.beta()[0] - 1e-4).abs() < 1e-18);
        assert!((s.beta()[99] - 2e-2).abs() < 1e-17);
        let ab = s.alpha_bar();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn bad_schedules_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn step_range_enforced() {
        let s = NoiseSchedule::toy();
        let z = Matrix::zeros(2, 2);
        assert_eq!(
            diffuse(&z, 0, &z, &s).unwrap_err(),
            Error::Step { step: 0, steps: 100 }
        );
        assert!(diffuse(&z, 101, &z, &s).is_err());
        assert!(diffuse(&z, 100, &z, &s).is_ok());
    }

    #[test]
    fn noise_limits() {
        let z0 = seeded_gaussian(5, 3, Seed(1));
        let eps = seeded_gaussian(5, 3, Seed(2));
        let clean = diffuse_with(&z0, 1.0 - 1e-15, &eps).unwrap();
        assert!(clean.max_abs_diff(&z0) < 1e-7);
        let noisy = diffuse_with(&z0, 1e-15, &eps).unwrap();
        assert!(noisy.max_abs_diff(&eps) < 1e-7);
    }

    #[test]
    fn expected_energy_monte_carlo() {
        let s = NoiseSchedule::toy();
        let z0 = seeded_gaussian(8, 4, Seed(3)).scale(0.7);
        let (n, d) = z0.shape();
        let t = 60;
        let ab = s.alpha_bar_at(t).unwrap();
        let mut rng = Seed(4).rng();
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let eps = gaussian_from(&mut rng, n, d);
            let z = diffuse(&z0, t, &eps, &s).unwrap();
            total += z.as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        let z0_sq: f64 = z0.as_slice().iter().map(|v| v * v).sum();
        let expected = ab * z0_sq + (1.0 - ab) * (n * d) as f64;
        let got = total / draws as f64;
        assert!((got / expected - 1.0).abs() < 0.05, "{got} vs {expected}");
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = time_embedding(3, 5);
        assert_eq!(e[4], 0.0);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
    }
}
