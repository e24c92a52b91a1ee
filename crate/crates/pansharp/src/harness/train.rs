//! Training loop: seeded shuffling, staged learning-rate decay, Adam
//! updates, checkpointing, and the run manifest that makes a run
//! reproducible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::hmcnn::{self, ModelWeights};
use crate::losses::{total_loss, FeatureExtractor};
use crate::raster::{read_raster, BandRole, Raster};
use crate::tensor::{backward, AdamState, Tape};

/// One triple in a dataset index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub hrms: String,
    pub pan: String,
    pub lrms: String,
    pub x0: usize,
    pub y0: usize,
}

/// On-disk dataset description written by the degrade command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub scale: u32,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn load(path: &Path) -> Result<DatasetIndex> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

/// Reproducibility record for one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub final_val_loss: Option<f64>,
    pub wall_seconds: BTreeMap<String, f64>,
    pub weights_path: String,
    pub checkpoint_paths: Vec<String>,
}

struct Triple {
    id: String,
    hrms: Raster,
    pan: Raster,
    lrms: Raster,
}

fn load_triples(index_path: &Path) -> Result<(u32, Vec<Triple>)> {
    let index = DatasetIndex::load(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut triples = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let resolve = |p: &str| {
            let path = PathBuf::from(p);
            if path.is_relative() {
                base.join(path)
            } else {
                path
            }
        };
        triples.push(Triple {
            id: entry.id.clone(),
            hrms: read_raster(resolve(&entry.hrms))?,
            pan: read_raster(resolve(&entry.pan))?,
            lrms: read_raster(resolve(&entry.lrms))?,
        });
    }
    Ok((index.scale, triples))
}

fn split_hash(id: &str, seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in id.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

/// Mean total loss over a set of triples without recording gradients.
fn eval_loss(
    weights: &ModelWeights,
    cfg: &TrainConfig,
    phi: &FeatureExtractor,
    triples: &[&Triple],
    nir_index: usize,
) -> Result<f64> {
    if triples.is_empty() {
        return Ok(f64::NAN);
    }
    let model = weights.bind(&cfg.model, None, false)?;
    let mut sum = 0.0;
    for t in triples {
        let lrms = hmcnn::raster_to_tensor(&t.lrms, true)?;
        let pan = hmcnn::raster_to_tensor(&t.pan, true)?;
        let hrms = hmcnn::raster_to_tensor(&t.hrms, true)?;
        let out = hmcnn::forward(&model, &lrms, &pan)?;
        sum += total_loss(&out.fused_x2, &out.fused_x4, &hrms, phi, &cfg.loss, nir_index)?.item();
    }
    Ok(sum / triples.len() as f64)
}

/// Run training per the configuration. Returns the final weights and the
/// manifest; artifacts (weights, checkpoints) land in `cfg.out_dir`.
pub fn train(cfg: &TrainConfig, quiet: bool) -> Result<(ModelWeights, RunManifest)> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let (scale, triples) = load_triples(&cfg.data_index)?;
    if scale != cfg.model.s {
        return Err(Error::Config(format!(
            "dataset scale {scale} does not match model scale {}",
            cfg.model.s
        )));
    }
    if triples.is_empty() {
        return Err(Error::Config("dataset index lists no entries".into()));
    }
    let nir_index = triples[0]
        .hrms
        .band_with_role(BandRole::Nir)
        .ok_or_else(|| Error::Config("training data carries no NIR band".into()))?;

    // 90/10 split, stable under the seed
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, t) in triples.iter().enumerate() {
        if split_hash(&t.id, cfg.seed) % 10 == 0 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        train_idx = val_idx.clone();
        val_idx.clear();
    }

    let phi = match &cfg.phi_weights_path {
        Some(path) => FeatureExtractor::from_weights_file(path)?,
        None => FeatureExtractor::from_seed(cfg.phi_seed)?,
    };
    let mut weights = ModelWeights::init(&cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr0);
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);

    let load_time = started.elapsed().as_secs_f64();
    let train_started = Instant::now();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut steps = 0usize;
    let weights_path = cfg.out_dir.join("weights.hmw");

    'epochs: for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg.lr0, cfg.lr_decay_factor, cfg.lr_decay_every);
        adam.lr = lr;
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lrms: Vec<&Raster> = chunk.iter().map(|&i| &triples[i].lrms).collect();
            let pan: Vec<&Raster> = chunk.iter().map(|&i| &triples[i].pan).collect();
            let hrms: Vec<&Raster> = chunk.iter().map(|&i| &triples[i].hrms).collect();

            let tape = Tape::new();
            let model = weights.bind(&cfg.model, Some(&tape), true)?;
            let step_result = (|| -> Result<f64> {
                let lrms_t = hmcnn::rasters_to_batch(&lrms, true)?;
                let pan_t = hmcnn::rasters_to_batch(&pan, true)?;
                let hrms_t = hmcnn::rasters_to_batch(&hrms, true)?;
                let out = hmcnn::forward(&model, &lrms_t, &pan_t)?;
                let loss =
                    total_loss(&out.fused_x2, &out.fused_x4, &hrms_t, &phi, &cfg.loss, nir_index)?;
                backward(&loss)?;
                Ok(loss.item())
            })();
            let loss_value = match step_result {
                Ok(v) => v,
                Err(err @ Error::NonFinite { .. }) => {
                    // the update never ran, so the current weights are the
                    // last good state; keep them on disk and bail out
                    weights.save(&weights_path)?;
                    return Err(err);
                }
                Err(other) => return Err(other),
            };

            let grads = model.grads()?;
            adam.step(
                weights
                    .iter_mut()
                    .map(|(name, param)| (param.data.as_mut_slice(), grads[name].as_slice())),
            )?;
            epoch_loss += loss_value;
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|cap| steps >= cap) {
                epochs.push(EpochRecord { epoch, lr, train_loss: epoch_loss / batches as f64 });
                break 'epochs;
            }
        }
        if batches > 0 {
            let record = EpochRecord { epoch, lr, train_loss: epoch_loss / batches as f64 };
            if !quiet && (epoch % 50 == 0 || epoch + 1 == cfg.max_epochs) {
                eprintln!("epoch {epoch}: lr {lr:.2e} loss {:.6}", record.train_loss);
            }
            epochs.push(record);
        }
        if cfg.checkpoint_every > 0 && epoch > 0 && epoch % cfg.checkpoint_every == 0 {
            let path = cfg.out_dir.join(format!("checkpoint_{epoch}.hmw"));
            weights.save(&path)?;
            checkpoints.push(path.display().to_string());
        }
    }
    let train_time = train_started.elapsed().as_secs_f64();

    weights.save(&weights_path)?;
    let val: Vec<&Triple> = val_idx.iter().map(|&i| &triples[i]).collect();
    let final_val_loss = if val.is_empty() {
        None
    } else {
        Some(eval_loss(&weights, cfg, &phi, &val, nir_index)?)
    };

    let mut wall = BTreeMap::new();
    wall.insert("load".to_string(), load_time);
    wall.insert("train".to_string(), train_time);
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.to_flat(),
        epochs,
        steps,
        train_ids: train_idx.iter().map(|&i| triples[i].id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| triples[i].id.clone()).collect(),
        final_val_loss,
        wall_seconds: wall,
        weights_path: weights_path.display().to_string(),
        checkpoint_paths: checkpoints,
    };
    let manifest_path = cfg.out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok((weights, manifest))
}
