//! Adaptive-moment updates with optional decoupled weight decay.

use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `p -= lr·wd·p`, outside the moment estimates.
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Tensors whose gradient is `None` are left untouched,
    /// decay included.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per tensor");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (((pv, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= self.lr * (update + self.weight_decay * *pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = vec![Matrix::row_vector(&[1.0, -1.0])];
        opt.step(&mut p, &[Some(Matrix::row_vector(&[3.0, -0.5]))]);
        let got = p[0].as_slice();
        assert!((got[0] - 0.9).abs() < 1e-7);
        assert!((got[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled_and_skips_missing_gradients() {
        let mut opt = AdamW::new(0.1, 0.5);
        let mut p = vec![Matrix::row_vector(&[2.0]), Matrix::row_vector(&[2.0])];
        opt.step(&mut p, &[Some(Matrix::row_vector(&[0.0])), None]);
        // zero gradient: only the decay term acts
        assert!((p[0][(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(p[1][(0, 0)], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0);
        let mut p = vec![Matrix::row_vector(&[3.0, -2.0])];
        for _ in 0..500 {
            let g = p[0].scale(2.0);
            opt.step(&mut p, &[Some(g)]);
        }
        assert!(p[0].max_abs() < 1e-2);
        assert_eq!(opt.steps_taken(), 500);
    }
}
