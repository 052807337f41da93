//! Binary model persistence.
//!
//! Layout (all little-endian):
//! magic `CCFG` · version u32 · four length-prefixed sections
//! (schedule params, dims, embedding table, layer weights+biases as f64)
//! · trailing FNV-1a64 checksum of everything before it.
//!
//! Loading rebuilds the schedule from its stored parameters, so the
//! restored model carries the same fingerprint and produces bitwise
//! identical predictions.

use crate::error::{Error, Result};
use crate::model::{EpsModel, TIME_FEATURES};
use crate::net::Mlp;
use crate::schedule::Schedule;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CCFG";
pub const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn push_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn to_bytes(model: &EpsModel, schedule: &Schedule) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let mut sched = Vec::new();
    sched.extend_from_slice(&(schedule.len() as u32).to_le_bytes());
    let (bmin, bmax) = schedule.beta_range();
    sched.extend_from_slice(&bmin.to_le_bytes());
    sched.extend_from_slice(&bmax.to_le_bytes());
    push_section(&mut out, &sched);

    let mut dims = Vec::new();
    dims.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    dims.extend_from_slice(&(model.data_dim() as u32).to_le_bytes());
    dims.extend_from_slice(&(model.embed_dim() as u32).to_le_bytes());
    dims.extend_from_slice(&model.input_scale().to_le_bytes());
    dims.extend_from_slice(&(model.net().dims().len() as u32).to_le_bytes());
    for &d in model.net().dims() {
        dims.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_section(&mut out, &dims);

    let mut embed = Vec::with_capacity(model.embed().len() * 8);
    for &v in model.embed() {
        embed.extend_from_slice(&v.to_le_bytes());
    }
    push_section(&mut out, &embed);

    let mut weights = Vec::new();
    let n_layers = model.net().dims().len() - 1;
    for l in 0..n_layers {
        for &v in model.net().layer_weights(l) {
            weights.extend_from_slice(&v.to_le_bytes());
        }
        for &v in model.net().layer_biases(l) {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_section(&mut out, &weights);

    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EpsModel, Schedule)> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = fnv1a64(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }

    fn section(r: &mut Reader<'_>, expected: Option<usize>) -> Result<usize> {
        let len = r.u32()? as usize;
        if let Some(exp) = expected {
            if len != exp {
                return Err(Error::Checkpoint(format!(
                    "section length {len}, expected {exp}"
                )));
            }
        }
        Ok(len)
    }

    // Schedule.
    section(&mut r, Some(20))?;
    let t_count = r.u32()? as usize;
    let beta_min = r.f64()?;
    let beta_max = r.f64()?;
    let schedule = Schedule::linear(t_count, beta_min, beta_max)
        .map_err(|e| Error::Checkpoint(format!("stored schedule invalid: {e}")))?;

    // Dims.
    let len = section(&mut r, None)?;
    if len < 24 {
        return Err(Error::Checkpoint("dims section too short".into()));
    }
    let num_classes = r.u32()? as usize;
    let data_dim = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let input_scale = r.f64()?;
    let n_dims = r.u32()? as usize;
    if len != 24 + 4 * n_dims {
        return Err(Error::Checkpoint("dims section length mismatch".into()));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(r.u32()? as usize);
    }
    if n_dims < 2 || dims[0] != data_dim + TIME_FEATURES + embed_dim {
        return Err(Error::Checkpoint("stored dims inconsistent".into()));
    }

    // Embeddings.
    section(&mut r, Some(num_classes * embed_dim * 8))?;
    let embed = r.f64_vec(num_classes * embed_dim)?;

    // Weights.
    let mut param_count = 0;
    for l in 0..n_dims - 1 {
        param_count += dims[l] * dims[l + 1] + dims[l + 1];
    }
    section(&mut r, Some(param_count * 8))?;
    let mut weights = Vec::with_capacity(n_dims - 1);
    let mut biases = Vec::with_capacity(n_dims - 1);
    for l in 0..n_dims - 1 {
        weights.push(r.f64_vec(dims[l] * dims[l + 1])?);
        biases.push(r.f64_vec(dims[l + 1])?);
    }
    if r.pos != body_len {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let net = Mlp::from_parts(dims, weights, biases)
        .map_err(|e| Error::Checkpoint(format!("stored network invalid: {e}")))?;
    let model = EpsModel::from_parts(
        net,
        embed,
        embed_dim,
        num_classes,
        data_dim,
        input_scale,
        schedule.len(),
        schedule.fingerprint(),
    )
    .map_err(|e| Error::Checkpoint(format!("stored model invalid: {e}")))?;
    Ok((model, schedule))
}

pub fn save(path: &Path, model: &EpsModel, schedule: &Schedule) -> Result<()> {
    Ok(std::fs::write(path, to_bytes(model, schedule))?)
}

pub fn load(path: &Path) -> Result<(EpsModel, Schedule)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_epsilon, Condition, TrainConfig};
    use crate::rng::GaussStream;

    fn small_trained() -> (EpsModel, Schedule) {
        let schedule = Schedule::linear(20, 1e-3, 0.02).unwrap();
        let mut g = GaussStream::new(6);
        let data: Vec<crate::data::LabeledPoint> = (0..64)
            .map(|i| crate::data::LabeledPoint {
                x: vec![g.gauss(), g.gauss()],
                class: i % 2,
                node: 0,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            hidden: vec![8],
            ..TrainConfig::default()
        };
        let (model, _) = train_epsilon(&data, 2, &schedule, &cfg).unwrap();
        (model, schedule)
    }

    #[test]
    fn roundtrip_preserves_predictions_bitwise() {
        let (model, schedule) = small_trained();
        let bytes = to_bytes(&model, &schedule);
        let (restored, schedule2) = from_bytes(&bytes).unwrap();
        assert_eq!(schedule, schedule2);
        assert_eq!(model, restored);
        let mut g = GaussStream::new(31);
        for _ in 0..50 {
            let x = [g.gauss(), g.gauss()];
            let t = 1 + g.index(20);
            for cond in [Condition::Null, Condition::Class(0), Condition::Class(1)] {
                let a = model.predict_eps(&x, t, cond).unwrap();
                let b = restored.predict_eps(&x, t, cond).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    assert_eq!(u.to_bits(), v.to_bits());
                }
            }
        }
    }

    #[test]
    fn serialization_is_stable() {
        let (model, schedule) = small_trained();
        assert_eq!(to_bytes(&model, &schedule), to_bytes(&model, &schedule));
    }

    #[test]
    fn corrupted_bytes_are_rejected() {
        let (model, schedule) = small_trained();
        let bytes = to_bytes(&model, &schedule);

        // Flipped payload byte breaks the checksum.
        let mut bad = bytes.clone();
        bad[40] ^= 0xff;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));

        // Wrong magic (checksum recomputed so the gate is the magic itself).
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let body = bad.len() - 8;
        let sum = fnv1a64(&bad[..body]);
        bad[body..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));

        // Future version is refused.
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        let sum = fnv1a64(&bad[..body]);
        bad[body..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));

        // Truncation.
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let (model, schedule) = small_trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &schedule).unwrap();
        let (restored, restored_schedule) = load(&path).unwrap();
        assert_eq!(model, restored);
        assert_eq!(schedule, restored_schedule);
    }
}
