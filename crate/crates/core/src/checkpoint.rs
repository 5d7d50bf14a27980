//! Binary checkpoint format.
//!
//! ```text
//! magic    "STSC"
//! version  u32 LE
//! config   u32 LE byte length, then UTF-8 `key=value` lines
//! records  until end of file:
//!            u32 LE name length, name bytes (UTF-8)
//!            u32 LE rank, rank × u64 LE extents
//!            product(extents) × f64 LE values
//! ```
//!
//! Model parameters use their model names; optimiser velocity is stored as
//! records prefixed with [`VELOCITY_PREFIX`]. Values are widened to `f64` on
//! write, so `f64` models round-trip bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, SimtsError};
use crate::model::{EncoderConfig, LossVariant, Padding, SimTs};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Sgd, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"STSC";
pub const FORMAT_VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        Checkpoint {
            encoder: trainer.model.config().clone(),
            train: trainer.config.clone(),
            params: trainer
                .model
                .parameters()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            velocity: trainer.optimizer.velocity().clone(),
            epoch: trainer.epoch,
            loss_history: trainer.loss_history.clone(),
        }
    }

    pub fn model(&self) -> Result<SimTs<T>> {
        SimTs::from_parameters(self.encoder.clone(), self.train.future_len(), self.params.clone())
    }

    /// Restores the full training state so that further epochs continue
    /// exactly as an uninterrupted run would.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let model = self.model()?;
        let mut trainer = Trainer::new(model, self.train)?;
        let mut opt = Sgd::from_config(&trainer.config);
        opt.set_velocity(self.velocity);
        trainer.optimizer = opt;
        trainer.epoch = self.epoch;
        trainer.loss_history = self.loss_history;
        Ok(trainer)
    }

    fn config_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let history: Vec<String> = self.loss_history.iter().map(|v| format!("{v:?}")).collect();
        let lines = [
            format!("encoder.in_channels={}", e.in_channels),
            format!("encoder.projection_dim={}", e.projection_dim),
            format!("encoder.latent_dim={}", e.latent_dim),
            format!("encoder.history_len={}", e.history_len),
            "encoder.padding=causal".to_string(),
            format!("train.learning_rate={:?}", t.learning_rate),
            format!("train.momentum={:?}", t.momentum),
            format!("train.weight_decay={:?}", t.weight_decay),
            format!("train.epochs={}", t.epochs),
            format!("train.batch_size={}", t.batch_size),
            format!("train.variant={}", t.variant),
            format!("train.seed={}", t.seed),
            format!("train.window_len={}", t.window_len),
            format!("train.history_len={}", t.history_len),
            format!("train.stride={}", t.stride),
            format!("epoch={}", self.epoch),
            format!("loss_history={}", history.join(",")),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.config_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let records = self.params.iter().map(|(n, t)| (n.clone(), t)).chain(
            self.velocity
                .iter()
                .map(|(n, t)| (format!("{VELOCITY_PREFIX}{n}"), t)),
        );
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(SimtsError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos;
        let cfg = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| r.corrupt(cfg_at, "config block is not UTF-8"))?;
        let mut ckpt = parse_config(cfg).map_err(|reason| r.corrupt(cfg_at, &reason))?;

        while r.pos < bytes.len() {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.corrupt(at, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(r.corrupt(at, &format!("record `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| r.corrupt(r.pos, &format!("record `{name}` extents {shape:?} exceed file")))?;
            let data = (0..numel)
                .map(|_| r.f64().map(T::of))
                .collect::<Result<Vec<T>>>()?;
            let tensor = Tensor::new(&shape, data).map_err(|e| r.corrupt(at, &e.to_string()))?;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(p) => ckpt.velocity.insert(p.to_string(), tensor),
                None => ckpt.params.insert(name, tensor),
            };
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, reason: &str) -> SimtsError {
        SimtsError::CorruptCheckpoint {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(
                self.pos,
                &format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_config<T: Scalar>(text: &str) -> std::result::Result<Checkpoint<T>, String> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line without `=`: {line:?}"))?;
        kv.insert(k.to_string(), v.to_string());
    }
    fn get<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> std::result::Result<V, String> {
        kv.get(key)
            .ok_or_else(|| format!("missing config key `{key}`"))?
            .parse()
            .map_err(|_| format!("bad value for `{key}`"))
    }
    if kv.get("encoder.padding").map(String::as_str) != Some("causal") {
        return Err("unsupported encoder padding".into());
    }
    let encoder = EncoderConfig {
        in_channels: get(&kv, "encoder.in_channels")?,
        projection_dim: get(&kv, "encoder.projection_dim")?,
        latent_dim: get(&kv, "encoder.latent_dim")?,
        history_len: get(&kv, "encoder.history_len")?,
        padding: Padding::Causal,
    };
    let variant: String = get(&kv, "train.variant")?;
    let train = TrainConfig {
        learning_rate: get(&kv, "train.learning_rate")?,
        momentum: get(&kv, "train.momentum")?,
        weight_decay: get(&kv, "train.weight_decay")?,
        epochs: get(&kv, "train.epochs")?,
        batch_size: get(&kv, "train.batch_size")?,
        variant: variant.parse::<LossVariant>().map_err(|e| e.to_string())?,
        seed: get(&kv, "train.seed")?,
        window_len: get(&kv, "train.window_len")?,
        history_len: get(&kv, "train.history_len")?,
        stride: get(&kv, "train.stride")?,
    };
    let history: String = get(&kv, "loss_history")?;
    let loss_history = if history.is_empty() {
        Vec::new()
    } else {
        history
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| format!("bad loss value {v:?}")))
            .collect::<std::result::Result<_, _>>()?
    };
    Ok(Checkpoint {
        encoder,
        train,
        params: BTreeMap::new(),
        velocity: BTreeMap::new(),
        epoch: get(&kv, "epoch")?,
        loss_history,
    })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| SimtsError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SimtsError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ckpt() -> Checkpoint<f64> {
        let cfg = EncoderConfig {
            in_channels: 2,
            projection_dim: 3,
            latent_dim: 4,
            history_len: 4,
            padding: Padding::Causal,
        };
        let train = TrainConfig {
            window_len: 7,
            history_len: 4,
            epochs: 3,
            ..TrainConfig::default()
        };
        let model = SimTs::<f64>::init(cfg, 3, 9).unwrap();
        let mut trainer = Trainer::new(model, train).unwrap();
        trainer.loss_history = vec![-0.1, -0.30000000000000004, 1e-300];
        trainer.epoch = 3;
        let mut ckpt = Checkpoint::from_trainer(&trainer);
        ckpt.velocity
            .insert("encoder.projection.bias".into(), Tensor::vector(vec![0.1, -0.2, 0.3]));
        ckpt
    }

    #[test]
    fn bytes_round_trip() {
        let ckpt = sample_ckpt();
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..4], b"STSC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model().unwrap(), ckpt.model().unwrap());
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = sample_ckpt().to_bytes();
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::<f64>::from_bytes(&bytes[..cut]) {
                Err(SimtsError::CorruptCheckpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample_ckpt().to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(SimtsError::CheckpointVersion { found: 7, expected: 1 })
        ));
    }
}
