//! Procedural toy images and their token lifting.

use std::f64::consts::PI;

use rand::Rng;

use crate::numerics::{Matrix, Seed};

/// Seeded images of gaussian blobs over a striped background, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub height: usize,
    pub width: usize,
    /// Each image is `height×width`.
    pub samples: Vec<Matrix>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Sample `i` as an `n×dim` token sequence.
    pub fn lifted(&self, i: usize, dim: usize) -> Matrix {
        lift(&self.samples[i], dim)
    }
}

pub fn make_toy_dataset(seed: Seed, count: usize, height: usize, width: usize) -> ToyDataset {
    let samples = (0..count)
        .map(|i| toy_image(seed.derive(i as u64), height, width))
        .collect();
    ToyDataset {
        height,
        width,
        samples,
    }
}

fn toy_image(seed: Seed, h: usize, w: usize) -> Matrix {
    let mut rng = seed.rng();
    let blobs = rng.random_range(1..=3);
    let params: Vec<[f64; 4]> = (0..blobs)
        .map(|_| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.25),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let stripe_amp = rng.random_range(0.0..0.5);
    let stripe_freq = rng.random_range(1.0..4.0);
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (st, ct) = theta.sin_cos();
    Matrix::from_fn(h, w, |r, c| {
        let (y, x) = ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
        let mut v = stripe_amp * (2.0 * PI * stripe_freq * (ct * x + st * y) + phase).sin();
        for &[cy, cx, sigma, amp] in &params {
            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
            v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        v.tanh()
    })
}

/// Row-major tokens: channel 0 is the pixel, the remaining channels are
/// fixed sinusoids of the normalized row / column coordinate, alternating
/// axes, with frequencies `1, 1, 2, 2, ...` half-cycles and alternating
/// sine / cosine.
pub fn lift(image: &Matrix, dim: usize) -> Matrix {
    let (h, w) = image.shape();
    Matrix::from_fn(h * w, dim, |i, ch| {
        let (r, c) = (i / w, i % w);
        if ch == 0 {
            return image[(r, c)];
        }
        let idx = ch - 1;
        let coord = if idx % 2 == 0 {
            (r as f64 + 0.5) / h as f64
        } else {
            (c as f64 + 0.5) / w as f64
        };
        let j = idx / 2;
        let freq = (j / 2 + 1) as f64;
        let arg = PI * freq * coord;
        if j % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = make_toy_dataset(Seed(5), 4, 16, 16);
        let b = make_toy_dataset(Seed(5), 4, 16, 16);
        assert_eq!(a, b);
        let c = make_toy_dataset(Seed(6), 4, 16, 16);
        assert_ne!(a, c);
    }

    #[test]
    fn values_stay_in_range() {
        // 400 images of 16×16 is about 10⁵ pixels.
        let ds = make_toy_dataset(Seed(1), 400, 16, 16);
        let mut count = 0;
        for img in &ds.samples {
            assert!(img.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            count += img.len();
        }
        assert!(count >= 100_000);
        let tokens = ds.lifted(0, 32);
        assert!(tokens.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn token_count_and_layout() {
        let ds = make_toy_dataset(Seed(2), 1, 16, 16);
        assert_eq!(ds.tokens(), 256);
        let t = ds.lifted(0, 32);
        assert_eq!(t.shape(), (256, 32));
        // row-major: token 17 is pixel (1, 1)
        assert_eq!(t[(17, 0)], ds.samples[0][(1, 1)]);
        // channel 1 depends on the row only, channel 2 on the column only
        assert_eq!(t[(16, 1)], t[(31, 1)]);
        assert_eq!(t[(1, 2)], t[(17, 2)]);
    }
}
