//! Linear-complexity token mixers for diffusion backbones.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense `f64` matrices, activations, seeded sampling.
//! - [`oracle`]: quadratic reference forms (softmax attention, masked
//!   gated attention) used as ground truth.
//! - [`ssm`]: linear-time causal and two-directional scans with the
//!   normalizer recurrence.
//! - [`linattn`]: generalized non-causal linear attention, its
//!   Kronecker feature-map constructions and the trainable block.
//! - [`shard`]: sequence-sharded evaluation with a constant-size payload.
//! - [`distill`]: a toy denoising task, a softmax-attention teacher and a
//!   linear-attention student trained by distillation.
//! - [`bench`] and [`verify`]: the scaling harness and property suites the
//!   command-line tool runs.
//!
//! The guide under `book/` walks through the math; its code listings are
//! compiled and run as doctests of this crate.

pub mod autograd;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod linattn;
pub mod numerics;
pub mod oracle;
pub mod shard;
pub mod ssm;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Matrix, Seed};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/scans.md")]
    mod scans {}
    #[doc = include_str!("../../../book/src/normalization.md")]
    mod normalization {}
    #[doc = include_str!("../../../book/src/linear_attention.md")]
    mod linear_attention {}
    #[doc = include_str!("../../../book/src/sharding.md")]
    mod sharding {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
