//! The `LMX1` parameter file format.
//!
//! A checkpoint is an ordered list of named matrices. Layout, little-endian
//! throughout:
//!
//! ```text
//! magic        4 bytes  "LMX1"
//! version      u8       1
//! count        u32      number of records
//! record × count:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows·cols f64, row-major
//! ```
//!
//! Scalars (flags, head counts, slopes) are stored as 1×1 records. Each
//! parameter type writes its fields in a fixed order under a name prefix;
//! see the `write_*`/`read_*` pairs below.

use std::path::Path;

use crate::block::BlockFlags;
use crate::error::{Error, Result};
use crate::linattn::{FeatureMapParams, LinFusionBlockParams};
use crate::numerics::Matrix;
use crate::ssm::{GateProjection, SsmBlockParams};

pub const MAGIC: [u8; 4] = *b"LMX1";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn records(&self) -> &[(String, Matrix)] {
        &self.records
    }

    pub fn put(&mut self, name: impl Into<String>, m: Matrix) {
        self.records.push((name.into(), m));
    }

    pub fn put_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.put(name, Matrix::row_vector(v));
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.put(name, Matrix::row_vector(&[v]));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing record `{name}`")))
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.as_slice().to_vec())
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let m = self.get(name)?;
        if m.len() != 1 {
            return Err(Error::Format(format!("`{name}` is not a scalar")));
        }
        Ok(m[(0, 0)])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, m) in &self.records {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an LMX1 checkpoint".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(
                || Error::Format("record size overflows".into()),
            )?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Field order: `linear`, `inner`, `inner_bias`, `norm_scale`, `norm_shift`,
/// `leaky_slope`, `outer`, `outer_bias`.
pub fn write_feature_map(ck: &mut Checkpoint, prefix: &str, p: &FeatureMapParams) {
    ck.put(format!("{prefix}.linear"), p.linear.clone());
    ck.put(format!("{prefix}.inner"), p.inner.clone());
    ck.put_vec(format!("{prefix}.inner_bias"), &p.inner_bias);
    ck.put_vec(format!("{prefix}.norm_scale"), &p.norm_scale);
    ck.put_vec(format!("{prefix}.norm_shift"), &p.norm_shift);
    ck.put_scalar(format!("{prefix}.leaky_slope"), p.leaky_slope);
    ck.put(format!("{prefix}.outer"), p.outer.clone());
    ck.put_vec(format!("{prefix}.outer_bias"), &p.outer_bias);
}

pub fn read_feature_map(ck: &Checkpoint, prefix: &str) -> Result<FeatureMapParams> {
    let p = FeatureMapParams {
        linear: ck.get(&format!("{prefix}.linear"))?.clone(),
        inner: ck.get(&format!("{prefix}.inner"))?.clone(),
        inner_bias: ck.get_vec(&format!("{prefix}.inner_bias"))?,
        norm_scale: ck.get_vec(&format!("{prefix}.norm_scale"))?,
        norm_shift: ck.get_vec(&format!("{prefix}.norm_shift"))?,
        leaky_slope: ck.get_scalar(&format!("{prefix}.leaky_slope"))?,
        outer: ck.get(&format!("{prefix}.outer"))?.clone(),
        outer_bias: ck.get_vec(&format!("{prefix}.outer_bias"))?,
    };
    p.validate()?;
    Ok(p)
}

fn flags_from(v: f64) -> Result<BlockFlags> {
    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
        return Err(Error::Format(format!("flag record {v} is not a byte")));
    }
    BlockFlags::from_bits(v as u8)
}

/// Field order: `heads`, `flags`, then per head `q{h}.*` and `k{h}.*`,
/// then `w_v`, `w_out`, `w_gate`, `rms_scale`.
pub fn write_linfusion_block(ck: &mut Checkpoint, prefix: &str, p: &LinFusionBlockParams) {
    ck.put_scalar(format!("{prefix}.heads"), p.heads() as f64);
    ck.put_scalar(format!("{prefix}.flags"), p.flags.to_bits() as f64);
    for h in 0..p.heads() {
        write_feature_map(ck, &format!("{prefix}.q{h}"), &p.query_maps[h]);
        write_feature_map(ck, &format!("{prefix}.k{h}"), &p.key_maps[h]);
    }
    ck.put(format!("{prefix}.w_v"), p.w_v.clone());
    ck.put(format!("{prefix}.w_out"), p.w_out.clone());
    ck.put(format!("{prefix}.w_gate"), p.w_gate.clone());
    ck.put_vec(format!("{prefix}.rms_scale"), &p.rms_scale);
}

pub fn read_linfusion_block(ck: &Checkpoint, prefix: &str) -> Result<LinFusionBlockParams> {
    let heads = ck.get_scalar(&format!("{prefix}.heads"))? as usize;
    let flags = flags_from(ck.get_scalar(&format!("{prefix}.flags"))?)?;
    let mut query_maps = Vec::with_capacity(heads);
    let mut key_maps = Vec::with_capacity(heads);
    for h in 0..heads {
        query_maps.push(read_feature_map(ck, &format!("{prefix}.q{h}"))?);
        key_maps.push(read_feature_map(ck, &format!("{prefix}.k{h}"))?);
    }
    let p = LinFusionBlockParams {
        query_maps,
        key_maps,
        w_v: ck.get(&format!("{prefix}.w_v"))?.clone(),
        w_out: ck.get(&format!("{prefix}.w_out"))?.clone(),
        w_gate: ck.get(&format!("{prefix}.w_gate"))?.clone(),
        rms_scale: ck.get_vec(&format!("{prefix}.rms_scale"))?,
        flags,
    };
    p.validate()?;
    Ok(p)
}

fn write_gate_projection(ck: &mut Checkpoint, prefix: &str, p: &GateProjection) {
    ck.put_vec(format!("{prefix}.w_a"), &p.w_a);
    ck.put_scalar(format!("{prefix}.bias_a"), p.bias_a);
    ck.put(format!("{prefix}.w_b"), p.w_b.clone());
    ck.put(format!("{prefix}.w_c"), p.w_c.clone());
}

fn read_gate_projection(ck: &Checkpoint, prefix: &str) -> Result<GateProjection> {
    Ok(GateProjection {
        w_a: ck.get_vec(&format!("{prefix}.w_a"))?,
        bias_a: ck.get_scalar(&format!("{prefix}.bias_a"))?,
        w_b: ck.get(&format!("{prefix}.w_b"))?.clone(),
        w_c: ck.get(&format!("{prefix}.w_c"))?.clone(),
    })
}

/// Field order: `flags`, `shared_bc`, `fwd.*`, `bwd.*`, `w_v`, `w_out`,
/// `w_gate`, `rms_scale`.
pub fn write_ssm_block(ck: &mut Checkpoint, prefix: &str, p: &SsmBlockParams) {
    ck.put_scalar(format!("{prefix}.flags"), p.flags.to_bits() as f64);
    ck.put_scalar(format!("{prefix}.shared_bc"), p.shared_bc as u8 as f64);
    write_gate_projection(ck, &format!("{prefix}.fwd"), &p.fwd);
    write_gate_projection(ck, &format!("{prefix}.bwd"), &p.bwd);
    ck.put(format!("{prefix}.w_v"), p.w_v.clone());
    ck.put(format!("{prefix}.w_out"), p.w_out.clone());
    ck.put(format!("{prefix}.w_gate"), p.w_gate.clone());
    ck.put_vec(format!("{prefix}.rms_scale"), &p.rms_scale);
}

pub fn read_ssm_block(ck: &Checkpoint, prefix: &str) -> Result<SsmBlockParams> {
    Ok(SsmBlockParams {
        flags: flags_from(ck.get_scalar(&format!("{prefix}.flags"))?)?,
        shared_bc: ck.get_scalar(&format!("{prefix}.shared_bc"))? != 0.0,
        fwd: read_gate_projection(ck, &format!("{prefix}.fwd"))?,
        bwd: read_gate_projection(ck, &format!("{prefix}.bwd"))?,
        w_v: ck.get(&format!("{prefix}.w_v"))?.clone(),
        w_out: ck.get(&format!("{prefix}.w_out"))?.clone(),
        w_gate: ck.get(&format!("{prefix}.w_gate"))?.clone(),
        rms_scale: ck.get_vec(&format!("{prefix}.rms_scale"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_gaussian, Seed};

    #[test]
    fn block_round_trips_bit_exactly() {
        let d = 6;
        let mut p = LinFusionBlockParams::from_teacher(
            &seeded_gaussian(d, 4, Seed(1)),
            &seeded_gaussian(d, 4, Seed(2)),
            &seeded_gaussian(d, d, Seed(3)),
            &seeded_gaussian(d, d, Seed(4)),
            2,
            3,
            Seed(5),
        )
        .unwrap();
        p.flags.gated = true;
        let mut ck = Checkpoint::new();
        write_linfusion_block(&mut ck, "layer0", &p);
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"LMX1");
        assert_eq!(bytes[4], 1);
        let back = read_linfusion_block(&Checkpoint::decode(&bytes).unwrap(), "layer0").unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.put("ab", Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap());
        let bytes = ck.encode();
        let mut expected = b"LMX1".to_vec();
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(Checkpoint::decode(b"LMX2\x01\0\0\0\0").is_err());
        assert!(Checkpoint::decode(b"LMX1\x02\0\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.put_scalar("x", 1.0);
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        assert!(ck.get("missing").is_err());
    }
}
