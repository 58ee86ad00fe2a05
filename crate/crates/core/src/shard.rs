//! Sequence-sharded evaluation of the linear-attention block.
//!
//! Each shard reduces its tokens to `S = g′(X)ᵀ(X W_V)` (`d″×d`) and
//! `z = Σ_j g′(X_j)` (`d″`). Those sums are all a shard needs from the
//! others, so the exchanged payload does not grow with the token count.
//! Shards are logical here; exchange happens in-process.
//!
//! # Wire layout
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `LMS1` |
//! | 4 | 4 | `d″` (u32) |
//! | 8 | 4 | `d` (u32) |
//! | 12 | 4 | shard index (u32) |
//! | 16 | 8 | token count (u64) |
//! | 24 | `8·d″·d` | `S`, row-major f64 |
//! | … | `8·d″` | `z`, f64 |
//!
//! With several heads, one summary is exchanged per head.

use rayon::prelude::*;

use crate::block::post_mix;
use crate::error::{Error, Result};
use crate::linattn::{featuremap_forward, finish_normalized, LinFusionBlockParams};
use crate::numerics::{dense_matmul, Matrix};

pub const SUMMARY_MAGIC: [u8; 4] = *b"LMS1";
pub const SUMMARY_HEADER_BYTES: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ShardSummary {
    /// `g′(X)ᵀ V`, `d″×d_head`.
    pub s: Matrix,
    /// `Σ_j g′(X_j)`.
    pub z: Vec<f64>,
    pub token_count: usize,
    pub shard_index: usize,
}

impl ShardSummary {
    pub fn zeros(feature_dim: usize, value_dim: usize, shard_index: usize) -> Self {
        ShardSummary {
            s: Matrix::zeros(feature_dim, value_dim),
            z: vec![0.0; feature_dim],
            token_count: 0,
            shard_index,
        }
    }

    /// Accumulates the tokens' outer products in token order.
    pub fn from_features(phi_k: &Matrix, v: &Matrix, shard_index: usize) -> Result<Self> {
        if phi_k.rows() != v.rows() {
            return Err(Error::shape("ShardSummary::from_features", "feature/value rows differ"));
        }
        if phi_k.rows() == 0 {
            return Err(Error::EmptyShard);
        }
        let mut out = ShardSummary::zeros(phi_k.cols(), v.cols(), shard_index);
        for j in 0..phi_k.rows() {
            let (f, vj) = (phi_k.row(j), v.row(j));
            for (u, &fu) in f.iter().enumerate() {
                for (sv, &x) in out.s.row_mut(u).iter_mut().zip(vj) {
                    *sv += fu * x;
                }
                out.z[u] += fu;
            }
        }
        out.token_count = phi_k.rows();
        Ok(out)
    }

    pub fn encoded_len(&self) -> usize {
        payload_size(self.s.cols(), self.s.rows())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&SUMMARY_MAGIC);
        buf.extend_from_slice(&(self.s.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.s.cols() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.shard_index as u32).to_le_bytes());
        buf.extend_from_slice(&(self.token_count as u64).to_le_bytes());
        for v in self.s.as_slice().iter().chain(&self.z) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SUMMARY_HEADER_BYTES || bytes[..4] != SUMMARY_MAGIC {
            return Err(Error::Format("not a shard summary".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (dpp, d, shard_index) = (u32_at(4), u32_at(8), u32_at(12));
        let token_count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() != payload_size(d, dpp) {
            return Err(Error::Format(format!(
                "summary of {} bytes, expected {}",
                bytes.len(),
                payload_size(d, dpp)
            )));
        }
        let floats: Vec<f64> = bytes[SUMMARY_HEADER_BYTES..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (s, z) = floats.split_at(dpp * d);
        Ok(ShardSummary {
            s: Matrix::from_vec(dpp, d, s.to_vec())?,
            z: z.to_vec(),
            token_count,
            shard_index,
        })
    }
}

/// Bytes on the wire for one summary: `8·(d″·d + d″) + 24`.
pub fn payload_size(d: usize, feature_dim: usize) -> usize {
    8 * (feature_dim * d + feature_dim) + SUMMARY_HEADER_BYTES
}

/// What quadratic attention would exchange instead: every key and value,
/// `8·n·(d′ + d)` bytes.
pub fn quadratic_baseline_payload(n: usize, d: usize, attn_dim: usize) -> usize {
    8 * n * (attn_dim + d)
}

/// One summary per head for a shard.
pub fn partial_aggregate(
    x_shard: &Matrix,
    p: &LinFusionBlockParams,
    shard_index: usize,
) -> Result<Vec<ShardSummary>> {
    if x_shard.rows() == 0 {
        return Err(Error::EmptyShard);
    }
    p.validate()?;
    let v = dense_matmul(x_shard, &p.w_v)?;
    let hd = p.head_dim();
    (0..p.heads())
        .map(|h| {
            let phi_k = featuremap_forward(x_shard, &p.key_maps[h])?;
            ShardSummary::from_features(&phi_k, &v.slice_cols(h * hd, hd), shard_index)
        })
        .collect()
}

/// Sums summaries in ascending shard-index order, whatever order they
/// arrive in.
pub fn merge_summaries(summaries: &[ShardSummary]) -> Result<ShardSummary> {
    let mut ordered: Vec<&ShardSummary> = summaries.iter().collect();
    ordered.sort_by_key(|s| s.shard_index);
    let first = ordered.first().ok_or(Error::EmptyShard)?;
    let mut out = ShardSummary {
        s: first.s.clone(),
        z: first.z.clone(),
        token_count: first.token_count,
        shard_index: first.shard_index,
    };
    for s in &ordered[1..] {
        if s.s.shape() != out.s.shape() || s.z.len() != out.z.len() {
            return Err(Error::shape(
                "merge_summaries",
                format!("{:?} vs {:?}", s.s.shape(), out.s.shape()),
            ));
        }
        out.s.add_assign(&s.s)?;
        for (a, b) in out.z.iter_mut().zip(&s.z) {
            *a += b;
        }
        out.token_count += s.token_count;
    }
    Ok(out)
}

/// Finishes one shard locally from the merged per-head summaries.
pub fn finish_shard(x_shard: &Matrix, p: &LinFusionBlockParams, merged: &[ShardSummary]) -> Result<Matrix> {
    if merged.len() != p.heads() {
        return Err(Error::shape("finish_shard", "one merged summary per head required"));
    }
    let mut outs = Vec::with_capacity(p.heads());
    for (h, m) in merged.iter().enumerate() {
        let phi_q = featuremap_forward(x_shard, &p.query_maps[h])?;
        outs.push(if p.flags.normalized {
            finish_normalized(&phi_q, &m.s, &m.z)?
        } else {
            dense_matmul(&phi_q, &m.s)?
        });
    }
    let y = Matrix::hconcat(&outs)?;
    let y = post_mix(y, x_shard, p.flags, &p.w_gate, &p.rms_scale)?;
    dense_matmul(&y, &p.w_out)
}

/// Summaries computed concurrently, merged canonically, then each shard
/// finished locally; output rows in shard order.
pub fn sharded_block_forward(shards: &[Matrix], p: &LinFusionBlockParams) -> Result<Matrix> {
    if shards.is_empty() {
        return Err(Error::EmptyShard);
    }
    let partials: Vec<Vec<ShardSummary>> = shards
        .par_iter()
        .enumerate()
        .map(|(i, x)| partial_aggregate(x, p, i))
        .collect::<Result<_>>()?;
    let merged: Vec<ShardSummary> = (0..p.heads())
        .map(|h| {
            let per_head: Vec<ShardSummary> = partials.iter().map(|ps| ps[h].clone()).collect();
            merge_summaries(&per_head)
        })
        .collect::<Result<_>>()?;
    let outs: Vec<Matrix> = shards
        .par_iter()
        .map(|x| finish_shard(x, p, &merged))
        .collect::<Result<_>>()?;
    Matrix::vconcat(&outs)
}

/// Splits `x` into consecutive shards of the given sizes.
pub fn split_rows(x: &Matrix, sizes: &[usize]) -> Result<Vec<Matrix>> {
    if sizes.iter().sum::<usize>() != x.rows() {
        return Err(Error::shape("split_rows", "shard sizes do not cover the sequence"));
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&len| {
            let part = x.slice_rows(start, len);
            start += len;
            part
        })
        .collect())
}
