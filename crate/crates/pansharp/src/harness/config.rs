//! Flat `section.key = value` configuration files and the training
//! configuration assembled from them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hmcnn::HmcnnConfig;
use crate::losses::{LossWeights, PHI_DEFAULT_SEED};

/// Parse the flat config format: one `section.key = value` per line,
/// `#` comments, blank lines ignored, exactly one dot of nesting.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `section.key = value`", lineno + 1))
        })?;
        let key = key.trim();
        if key.is_empty() || key.matches('.').count() != 1 {
            return Err(Error::Config(format!(
                "line {}: key `{key}` must have exactly one dot",
                lineno + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse `{raw}`"))),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "train.batch_size",
    "train.lr0",
    "train.lr_decay_factor",
    "train.lr_decay_every",
    "train.max_epochs",
    "train.max_steps",
    "train.checkpoint_every",
    "train.seed",
    "train.out_dir",
    "data.index",
    "model.n_res_blocks",
    "model.feat_channels",
    "model.share_hmb",
    "model.progressive",
    "model.s",
    "model.attention_hidden",
    "model.tile",
    "loss.alpha",
    "loss.stage2_only_perceptual",
    "loss.phi_seed",
    "loss.phi_weights_path",
];

/// Full training setup; every field has a production default.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Checkpoint every N epochs; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_index: PathBuf,
    pub model: HmcnnConfig,
    pub loss: LossWeights,
    pub phi_seed: u64,
    pub phi_weights_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            lr0: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 1000,
            max_epochs: 2000,
            max_steps: None,
            checkpoint_every: 500,
            seed: 0,
            out_dir: PathBuf::from("run"),
            data_index: PathBuf::new(),
            model: HmcnnConfig::default(),
            loss: LossWeights::default(),
            phi_seed: PHI_DEFAULT_SEED,
            phi_weights_path: None,
        }
    }
}

impl TrainConfig {
    pub fn from_flat(map: &BTreeMap<String, String>) -> Result<TrainConfig> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: parse_value(map, "train.batch_size", d.batch_size)?,
            lr0: parse_value(map, "train.lr0", d.lr0)?,
            lr_decay_factor: parse_value(map, "train.lr_decay_factor", d.lr_decay_factor)?,
            lr_decay_every: parse_value(map, "train.lr_decay_every", d.lr_decay_every)?,
            max_epochs: parse_value(map, "train.max_epochs", d.max_epochs)?,
            max_steps: match map.get("train.max_steps") {
                None => None,
                Some(raw) => Some(
                    raw.parse()
                        .map_err(|_| Error::Config(format!("train.max_steps: cannot parse `{raw}`")))?,
                ),
            },
            checkpoint_every: parse_value(map, "train.checkpoint_every", d.checkpoint_every)?,
            seed: parse_value(map, "train.seed", d.seed)?,
            out_dir: PathBuf::from(map.get("train.out_dir").cloned().unwrap_or("run".into())),
            data_index: PathBuf::from(map.get("data.index").cloned().unwrap_or_default()),
            model: model_from_flat(map)?,
            loss: LossWeights {
                alpha: parse_value(map, "loss.alpha", d.loss.alpha)?,
                stage2_only_perceptual: parse_value(
                    map,
                    "loss.stage2_only_perceptual",
                    d.loss.stage2_only_perceptual,
                )?,
            },
            phi_seed: parse_value(map, "loss.phi_seed", d.phi_seed)?,
            phi_weights_path: map.get("loss.phi_weights_path").map(PathBuf::from),
        };
        if cfg.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(cfg.lr0 > 0.0) {
            return Err(Error::Config("train.lr0 must be positive".into()));
        }
        if !(cfg.lr_decay_factor >= 1.0) {
            return Err(Error::Config("train.lr_decay_factor must be >= 1".into()));
        }
        if cfg.lr_decay_every < 1 {
            return Err(Error::Config("train.lr_decay_every must be at least 1".into()));
        }
        cfg.model.validate()?;
        cfg.loss.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        TrainConfig::from_flat(&parse_flat(text)?)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = TrainConfig::parse(&text)?;
        // relative paths resolve against the config file location
        if let Some(dir) = path.parent() {
            if !cfg.data_index.as_os_str().is_empty() && cfg.data_index.is_relative() {
                cfg.data_index = dir.join(&cfg.data_index);
            }
            if cfg.out_dir.is_relative() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
            if let Some(p) = &cfg.phi_weights_path {
                if p.is_relative() {
                    cfg.phi_weights_path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    /// Flat snapshot for the run manifest.
    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr0", format!("{:e}", self.lr0));
        put("train.lr_decay_factor", self.lr_decay_factor.to_string());
        put("train.lr_decay_every", self.lr_decay_every.to_string());
        put("train.max_epochs", self.max_epochs.to_string());
        if let Some(steps) = self.max_steps {
            put("train.max_steps", steps.to_string());
        }
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("train.seed", self.seed.to_string());
        put("train.out_dir", self.out_dir.display().to_string());
        put("data.index", self.data_index.display().to_string());
        put("model.n_res_blocks", self.model.n_res_blocks.to_string());
        put("model.feat_channels", self.model.feat_channels.to_string());
        put("model.share_hmb", self.model.share_hmb_across_bands.to_string());
        put("model.progressive", self.model.progressive_chain.to_string());
        put("model.s", self.model.s.to_string());
        put("model.attention_hidden", self.model.attention_hidden.to_string());
        put("model.tile", self.model.tile.to_string());
        put("loss.alpha", format!("{:e}", self.loss.alpha));
        put(
            "loss.stage2_only_perceptual",
            self.loss.stage2_only_perceptual.to_string(),
        );
        put("loss.phi_seed", self.phi_seed.to_string());
        if let Some(p) = &self.phi_weights_path {
            put("loss.phi_weights_path", p.display().to_string());
        }
        map
    }
}

fn model_from_flat(map: &BTreeMap<String, String>) -> Result<HmcnnConfig> {
    let d = HmcnnConfig::default();
    Ok(HmcnnConfig {
        n_res_blocks: parse_value(map, "model.n_res_blocks", d.n_res_blocks)?,
        feat_channels: parse_value(map, "model.feat_channels", d.feat_channels)?,
        share_hmb_across_bands: parse_value(map, "model.share_hmb", d.share_hmb_across_bands)?,
        progressive_chain: parse_value(map, "model.progressive", d.progressive_chain)?,
        s: parse_value(map, "model.s", d.s)?,
        attention_hidden: parse_value(map, "model.attention_hidden", d.attention_hidden)?,
        tile: parse_value(map, "model.tile", d.tile)?,
    })
}

/// Learning-rate schedule: lr0 / factor^floor(epoch / every). Decay
/// applies starting at the boundary epoch inclusive.
pub fn lr_at(epoch: usize, lr0: f64, decay_factor: f64, decay_every: usize) -> f64 {
    lr0 / decay_factor.powi((epoch / decay_every) as i32)
}
