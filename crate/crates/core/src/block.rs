//! Output-stage options shared by the scan-based and linear-attention mixers.

use crate::error::{Error, Result};
use crate::numerics::{dense_matmul, rms_norm_rows, silu, Matrix};

pub const RMS_EPS: f64 = 1e-6;

/// Which optional stages a mixer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFlags {
    /// Divide each token's mixing weights by their sum.
    pub normalized: bool,
    /// Multiply the mixed tokens by `silu(x W_gate)`.
    pub gated: bool,
    /// RMS-normalize each mixed token and apply a learned per-channel scale.
    pub rms_normed: bool,
}

impl Default for BlockFlags {
    fn default() -> Self {
        BlockFlags {
            normalized: true,
            gated: false,
            rms_normed: false,
        }
    }
}

impl BlockFlags {
    pub fn to_bits(self) -> u8 {
        self.normalized as u8 | (self.gated as u8) << 1 | (self.rms_normed as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & !0b111 != 0 {
            return Err(Error::Format(format!("unknown block flag bits {bits:#b}")));
        }
        Ok(BlockFlags {
            normalized: bits & 1 != 0,
            gated: bits & 2 != 0,
            rms_normed: bits & 4 != 0,
        })
    }
}

/// Gating then RMS normalization, each only if its flag is set.
/// `y` is the mixed sequence, `x` the block input the gate reads.
pub fn post_mix(
    y: Matrix,
    x: &Matrix,
    flags: BlockFlags,
    w_gate: &Matrix,
    rms_scale: &[f64],
) -> Result<Matrix> {
    let mut y = y;
    if flags.gated {
        let z = dense_matmul(x, w_gate)?;
        y = y.zip_map(&z, |a, g| a * silu(g))?;
    }
    if flags.rms_normed {
        y = rms_norm_rows(&y, rms_scale, RMS_EPS)?;
    }
    Ok(y)
}
