//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"RDCK"
//! version  u32 (= 1)
//! config   u32 byte length, then UTF-8 `key = value` lines
//! arrays   u32 count, then per array:
//!            u16 name length, name bytes, u8 trainable,
//!            u8 rank, rank x u32 dims, f64 values
//! history  u64 count, then f64 training losses
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::network::{DenoiserModel, ModelConfig};
use super::tape::{ParamStore, Tensor};
use super::train::TrainConfig;
use crate::error::{CoreError, Result};
use crate::schedule::{ScheduleKind, ScheduleSpec};

pub const MAGIC: [u8; 4] = *b"RDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub losses: Vec<f64>,
}

fn config_text(c: &Checkpoint) -> String {
    let m = c.model.config();
    let s = &c.schedule;
    let t = &c.train;
    [
        format!("model.width = {}", m.width),
        format!("model.seed = {}", m.seed),
        format!("schedule.kind = {}", s.kind),
        format!("schedule.T = {}", s.steps),
        format!("schedule.beta1 = {}", s.beta_1),
        format!("schedule.betaT = {}", s.beta_t),
        format!("schedule.L = {}", s.l),
        format!("schedule.p = {}", s.p),
        format!("train.lr = {}", t.lr),
        format!("train.batch_size = {}", t.batch_size),
        format!("train.steps = {}", t.steps),
        format!("train.lambda_perceptual = {}", t.lambda_perceptual),
        format!("train.weight_mode = {}", t.weight_mode),
        format!("train.seed = {}", t.seed),
        format!("train.crop = {}", t.crop),
    ]
    .join("\n")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CoreError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CoreError::Checkpoint("array too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = config_text(self);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let entries = self.model.params().entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.trainable as u8);
            out.push(e.tensor.shape.len() as u8);
            for &d in &e.tensor.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.losses.len() as u64).to_le_bytes());
        for v in &self.losses {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CoreError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CoreError::Checkpoint("config text is not UTF-8".into()))?;
        let kv = parse_pairs(text)?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| CoreError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            store.add(name, Tensor::new(shape, data), trainable);
        }
        let n_losses = r.u64()? as usize;
        let losses = r.f64s(n_losses)?;
        if r.pos != bytes.len() {
            return Err(CoreError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| CoreError::Checkpoint(format!("missing config key '{k}'")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| CoreError::Checkpoint(format!("bad value '{v}' for '{k}'")))
        }
        let model_cfg = ModelConfig {
            width: num("model.width", get("model.width")?)?,
            seed: num("model.seed", get("model.seed")?)?,
        };
        let schedule = ScheduleSpec {
            kind: get("schedule.kind")?.parse::<ScheduleKind>()?,
            steps: num("schedule.T", get("schedule.T")?)?,
            beta_1: num("schedule.beta1", get("schedule.beta1")?)?,
            beta_t: num("schedule.betaT", get("schedule.betaT")?)?,
            l: num("schedule.L", get("schedule.L")?)?,
            p: num("schedule.p", get("schedule.p")?)?,
        };
        let train = TrainConfig {
            lr: num("train.lr", get("train.lr")?)?,
            batch_size: num("train.batch_size", get("train.batch_size")?)?,
            steps: num("train.steps", get("train.steps")?)?,
            lambda_perceptual: num("train.lambda_perceptual", get("train.lambda_perceptual")?)?,
            weight_mode: get("train.weight_mode")?.parse()?,
            seed: num("train.seed", get("train.seed")?)?,
            crop: num("train.crop", get("train.crop")?)?,
            ..TrainConfig::default()
        };
        Ok(Self {
            model: DenoiserModel::from_params(model_cfg, store)?,
            schedule,
            train,
            losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Checkpoint(format!("bad config line '{line}'")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut model = DenoiserModel::new(ModelConfig { width: 8, seed: 11 }).unwrap();
        model.params_mut().entries_mut()[3].tensor.data[0] = 0.1 + 0.2;
        Checkpoint {
            model,
            schedule: ScheduleSpec::default(),
            train: TrainConfig {
                lr: 3e-4,
                seed: 9,
                ..Default::default()
            },
            losses: vec![0.5, 0.25, f64::MIN_POSITIVE],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.schedule, c.schedule);
        assert_eq!(back.train, c.train);
        assert_eq!(back.losses, c.losses);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
