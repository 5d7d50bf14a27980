//! Flat `key = value` run configuration. Command-line flags are applied as
//! overrides through the same keys, so a file and a flag can never disagree
//! about what a setting means.

use std::fs;
use std::path::{Path, PathBuf};

use simts::data::SynthConfig;
use simts::eval::Mode;
use simts::{EncoderConfig, LossVariant, TrainConfig};

use crate::error::CliError;

pub const KEYS: &[&str] = &[
    "dataset",
    "mode",
    "target",
    "datetime_column",
    "horizons",
    "out",
    "plot",
    "learning_rate",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "variant",
    "variants",
    "seed",
    "seeds",
    "window_len",
    "history_len",
    "stride",
    "projection_dim",
    "latent_dim",
    "n_features",
    "length",
    "periods",
    "noise_std",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub mode: Mode,
    pub target: Option<String>,
    /// `None` means detect a `date` column.
    pub datetime_column: Option<String>,
    pub horizons: Option<Vec<usize>>,
    pub out: Option<PathBuf>,
    pub plot: bool,
    pub train: TrainConfig,
    pub projection_dim: usize,
    pub latent_dim: usize,
    pub variants: Vec<LossVariant>,
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::new(1);
        RunConfig {
            dataset: None,
            mode: Mode::Multivariate,
            target: None,
            datetime_column: None,
            horizons: None,
            out: None,
            plot: false,
            train: TrainConfig::default(),
            projection_dim: enc.projection_dim,
            latent_dim: enc.latent_dim,
            variants: Vec::new(),
            seeds: Vec::new(),
            synth: SynthConfig {
                n_features: 2,
                length: 1000,
                periods: vec![vec![24]],
                noise_std: 0.0,
                seed: 0,
            },
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>, CliError> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<V>, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("key `{key}` needs at least one value")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid value `{value}` for key `{key}`"))),
    }
}

impl RunConfig {
    /// Reads a config file. Relative `dataset` and `out` paths are taken
    /// relative to the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(CliError::Usage(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    i + 1
                )));
            }
            seen.push(key);
            cfg.set(key, value)?;
            if key == "dataset" || key == "out" {
                let target = if key == "dataset" { &mut cfg.dataset } else { &mut cfg.out };
                if let Some(p) = target.as_mut() {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "mode" => self.mode = parse(key, value)?,
            "target" => self.target = Some(value.to_string()),
            "datetime_column" => self.datetime_column = Some(value.to_string()),
            "horizons" => self.horizons = Some(parse_list(key, value)?),
            "out" => self.out = Some(PathBuf::from(value)),
            "plot" => self.plot = parse_bool(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "variant" => self.train.variant = parse(key, value)?,
            "variants" => self.variants = parse_list(key, value)?,
            "seed" => {
                self.train.seed = parse(key, value)?;
                self.synth.seed = self.train.seed;
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "window_len" => self.train.window_len = parse(key, value)?,
            "history_len" => self.train.history_len = parse(key, value)?,
            "stride" => self.train.stride = parse(key, value)?,
            "projection_dim" => self.projection_dim = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "n_features" => self.synth.n_features = parse(key, value)?,
            "length" => self.synth.length = parse(key, value)?,
            // `;` separates features, `,` separates periods within a feature
            "periods" => {
                self.synth.periods = value
                    .split(';')
                    .map(|f| parse_list(key, f))
                    .collect::<Result<_, _>>()?
            }
            "noise_std" => self.synth.noise_std = parse(key, value)?,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn encoder(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            projection_dim: self.projection_dim,
            latent_dim: self.latent_dim,
            history_len: self.train.history_len,
            padding: Default::default(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }
}
