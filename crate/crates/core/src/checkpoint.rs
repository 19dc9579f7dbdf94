//! Binary checkpoints (`BAMC`). Layout in `docs/checkpoint-format.md`.

use std::path::Path;

use crate::config::BamConfig;
use crate::error::{BamError, Result};
use crate::model::Bam;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BAMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub value: Tensor,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BamConfig,
    /// Epochs completed.
    pub epoch: u64,
    /// Training stream seed; with `epoch` it fixes the remaining shuffles and crops.
    pub seed: u64,
    pub adam_step: u64,
    pub params: Vec<SavedParam>,
    /// Running mean and variance of every batch norm, in model order.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(model: &Bam, adam: &AdamState, epoch: usize, cfg: &BamConfig) -> Self {
        let mut config = cfg.clone();
        config.model = model.cfg.clone();
        Checkpoint {
            config,
            epoch: epoch as u64,
            seed: cfg.train.seed,
            adam_step: adam.step,
            params: model
                .store
                .iter()
                .map(|(id, p)| SavedParam {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    adam_m: adam.m[id.index()].clone(),
                    adam_v: adam.v[id.index()].clone(),
                })
                .collect(),
            moments: model
                .batchnorms()
                .iter()
                .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model and optimizer exactly as captured.
    pub fn restore(&self) -> Result<(Bam, AdamState)> {
        let mut model = Bam::new(&self.config.model, self.seed)?;
        if model.store.len() != self.params.len() {
            return Err(BamError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let mut adam = AdamState::new(self.config.train.adam.clone(), &model.store);
        adam.step = self.adam_step;
        let ids: Vec<_> = model.store.ids().collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            if model.store.name(id) != saved.name || model.store.get(id).shape() != saved.value.shape() {
                return Err(BamError::Checkpoint(format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    saved.name,
                    saved.value.shape(),
                    model.store.name(id),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = saved.value.clone();
            adam.m[id.index()] = saved.adam_m.clone();
            adam.v[id.index()] = saved.adam_v.clone();
        }
        self.restore_moments(&mut model)?;
        Ok((model, adam))
    }

    fn restore_moments(&self, model: &mut Bam) -> Result<()> {
        let mut bns = model.batchnorms_mut();
        if bns.len() != self.moments.len() {
            return Err(BamError::Checkpoint(format!(
                "checkpoint has {} batch norms, model has {}",
                self.moments.len(),
                bns.len()
            )));
        }
        for (bn, (mean, var)) in bns.iter_mut().zip(&self.moments) {
            if bn.running_mean.len() != mean.len() {
                return Err(BamError::Checkpoint("batch norm width mismatch".into()));
            }
            bn.running_mean = mean.clone();
            bn.running_var = var.clone();
        }
        Ok(())
    }

    /// Copies parameters whose name and shape match into `model`, for
    /// fine-tuning from another configuration. Returns how many were copied.
    pub fn load_matching(&self, model: &mut Bam) -> usize {
        let mut copied = 0;
        for saved in &self.params {
            if let Some(id) = model.store.find(&saved.name) {
                if model.store.get(id).shape() == saved.value.shape() {
                    *model.store.get_mut(id) = saved.value.clone();
                    copied += 1;
                }
            }
        }
        if model.batchnorms().len() == self.moments.len() {
            let _ = self.restore_moments(model);
        }
        copied
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.adam_step);
        put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for values in [p.value.data(), &p.adam_m[..], &p.adam_v[..]] {
                for &v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        put_u32(&mut out, self.moments.len() as u32);
        for (mean, var) in &self.moments {
            put_u32(&mut out, mean.len() as u32);
            for &v in mean.iter().chain(var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(BamError::BadMagic(magic.try_into().expect("4 bytes")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(BamError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let config: BamConfig = serde_json::from_slice(r.take(len, "config")?)?;
        let epoch = r.u64("epoch")?;
        let seed = r.u64("seed")?;
        let adam_step = r.u64("optimizer step")?;
        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| BamError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let value = Tensor::new(shape, r.f64s(numel, "values")?)?;
            let adam_m = r.f64s(numel, "first moments")?;
            let adam_v = r.f64s(numel, "second moments")?;
            params.push(SavedParam { name, value, adam_m, adam_v });
        }
        let nb = r.u32("batch norm count")? as usize;
        let mut moments = Vec::with_capacity(nb);
        for _ in 0..nb {
            let f = r.u32("batch norm width")? as usize;
            moments.push((r.f64s(f, "running mean")?, r.f64s(f, "running variance")?));
        }
        if r.pos != bytes.len() {
            return Err(BamError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, epoch, seed, adam_step, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| BamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BamError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(BamError::Truncated {
            what,
            expected: n,
            found: self.bytes.len() - self.pos,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(BamError::Checkpoint("size overflow".into()))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_gives_identical_predictions() {
        let mut cfg = BamConfig::desk();
        cfg.model.d_model = 6;
        let mut model = Bam::new(&cfg.model, 9).unwrap();
        model.batchnorms_mut()[0].running_mean[1] = 0.25;
        let mut adam = AdamState::new(cfg.train.adam.clone(), &model.store);
        adam.step = 7;
        adam.m[0][0] = 0.5;
        cfg.train.seed = 9;
        let ck = Checkpoint::capture(&model, &adam, 3, &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let (mut restored, adam2) = back.restore().unwrap();
        assert_eq!(adam2, adam);
        let x = Tensor::new(vec![3000], (0..3000).map(|i| (i as f64 * 0.01).sin() * 0.3).collect()).unwrap();
        assert_eq!(restored.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut cfg = BamConfig::desk();
        cfg.model.d_model = 4;
        let model = Bam::new(&cfg.model, 1).unwrap();
        let adam = AdamState::new(cfg.train.adam.clone(), &model.store);
        let bytes = Checkpoint::capture(&model, &adam, 0, &cfg).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(BamError::BadMagic(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(BamError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }
}
