//! Training loop: seeded 9:1 split, shuffled mini-batches, Adam, best
//! validation checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nar_core::neural::{AdamConfig, AdamState, Loss, LossConfig, LossTerms, ParamSet, UNet, UNetConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, ModelMeta, ModelState};
use crate::dataset::{load_samples, DatasetManifest, Sample};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Fraction of views held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub base_channels: usize,
    pub max_channels: usize,
    pub levels: usize,
    pub descriptor_head: bool,
    /// Write `epoch_NNNN.narck` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 30,
            val_fraction: 0.1,
            seed: 0,
            loss: LossConfig::default(),
            base_channels: 16,
            max_channels: 128,
            levels: 5,
            descriptor_head: true,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument("val_fraction must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    pub fn unet(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            levels: self.levels,
            out_channels: 3,
            descriptor_head: self.descriptor_head,
            seed: self.seed,
        }
    }
}

/// Deterministic `(train, validation)` split of `ids`.
pub fn split_views(ids: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids = ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ids.len() as f64 * val_fraction).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let train = ids.split_off(n_val);
    (train, ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lperc: f64,
    pub lreco: f64,
    pub ltv: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Final model (best validation loss).
    pub checkpoint: PathBuf,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// One optimisation step and validation passes over in-memory samples.
pub struct Trainer {
    net: UNet,
    loss: Loss<f32>,
    adam: AdamConfig,
}

impl Trainer {
    pub fn new(unet: &UNetConfig, loss: LossConfig, adam: AdamConfig) -> Result<Self> {
        Ok(Self { net: UNet::new(unet.clone())?, loss: Loss::new(loss, 3), adam })
    }

    fn sample_grad(&self, params: &ParamSet<f32>, s: &Sample) -> Result<(LossTerms, ParamSet<f32>)> {
        let tape = self.net.forward_train(params, &s.features)?;
        let (terms, dy) = self.loss.evaluate(tape.output(), &s.target)?;
        let (grads, _) = self.net.backward(params, &tape, &dy);
        Ok((terms, grads))
    }

    /// Mean-gradient Adam step over `batch`. Per-sample gradients are
    /// computed in parallel and summed in batch order.
    pub fn step(&self, state: &mut ModelState, batch: &[&Sample]) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let results: Vec<(LossTerms, ParamSet<f32>)> =
            batch.par_iter().map(|s| self.sample_grad(&state.params, s)).collect::<Result<_>>()?;
        let n = batch.len() as f32;
        let mut it = results.into_iter();
        let (first_terms, mut grads) = it.next().expect("non-empty");
        let mut terms = first_terms;
        for (t, g) in it {
            grads.add_assign(&g);
            terms = add_terms(terms, t);
        }
        grads.scale(1.0 / n);
        let terms = scale_terms(terms, 1.0 / batch.len() as f64);
        if !terms.total.is_finite() {
            return Err(nar_core::Error::NonFinite("loss".into()).into());
        }
        let adam = state.adam.get_or_insert_with(|| AdamState::new(&state.params));
        adam.step(&self.adam, &mut state.params, &grads)?;
        state.step = adam.step;
        Ok(terms)
    }

    /// Mean loss terms over `samples` without updating anything.
    pub fn validate(&self, params: &ParamSet<f32>, samples: &[Sample]) -> Result<LossTerms> {
        let terms: Vec<LossTerms> = samples
            .par_iter()
            .map(|s| {
                let y = self.net.forward(params, &s.features)?;
                Ok(self.loss.evaluate(&y, &s.target)?.0)
            })
            .collect::<Result<_>>()?;
        let sum = terms.into_iter().fold(LossTerms::default(), add_terms);
        Ok(scale_terms(sum, 1.0 / samples.len().max(1) as f64))
    }
}

fn add_terms(a: LossTerms, b: LossTerms) -> LossTerms {
    LossTerms {
        total: a.total + b.total,
        perceptual: a.perceptual + b.perceptual,
        reco: a.reco + b.reco,
        tv: a.tv + b.tv,
    }
}

fn scale_terms(a: LossTerms, s: f64) -> LossTerms {
    LossTerms { total: a.total * s, perceptual: a.perceptual * s, reco: a.reco * s, tv: a.tv * s }
}

pub fn write_curve_csv(curve: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lperc,lreco,ltv\n");
    for r in curve {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lperc, r.lreco, r.ltv));
    }
    fs::write(path, out).at(path)
}

/// Trains on the dataset in `dataset_dir`, writing checkpoints and the loss
/// curve into `out_dir`. `progress` receives every finished epoch.
pub fn train(
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    if manifest.views.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 views".into()));
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let (train_ids, val_ids) = split_views(&manifest.ids(), cfg.val_fraction, cfg.seed);
    let train_set = load_samples(dataset_dir, &manifest, &train_ids)?;
    let val_set = load_samples(dataset_dir, &manifest, &val_ids)?;

    let meta = ModelMeta {
        unet: cfg.unet(manifest.channel_names.len()),
        selection: manifest.settings.selection.clone(),
        channel_names: manifest.channel_names.clone(),
        loss: cfg.loss.clone(),
        validation_views: val_ids.clone(),
    };
    let mut state = ModelState::init(meta)?;
    let trainer = Trainer::new(&state.meta.unet, cfg.loss.clone(), cfg.adam())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let best_path = out_dir.join("best.narck");
    let last_good = out_dir.join("last_good.narck");
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::INFINITY);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let before = state.clone();
            match trainer.step(&mut state, &batch) {
                Ok(t) => sum += t.total * batch.len() as f64,
                Err(Error::Core(nar_core::Error::NonFinite(what))) => {
                    save_checkpoint(&before, &last_good)?;
                    return Err(Error::TrainingAborted { epoch, reason: format!("non-finite {what}"), last_good });
                }
                Err(e) => return Err(e),
            }
        }
        let val = trainer.validate(&state.params, &val_set)?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum / train_set.len().max(1) as f64,
            val_loss: val.total,
            lperc: val.perceptual,
            lreco: val.reco,
            ltv: val.tv,
        };
        progress(&rec);
        curve.push(rec);
        if val.total < best.1 {
            best = (epoch, val.total);
            save_checkpoint(&state, &best_path)?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(&state, &out_dir.join(format!("epoch_{epoch:04}.narck")))?;
        }
    }
    if curve.is_empty() {
        save_checkpoint(&state, &best_path)?;
    }
    let checkpoint = out_dir.join("model.narck");
    fs::copy(&best_path, &checkpoint).at(&checkpoint)?;
    write_curve_csv(&curve, &out_dir.join("loss_curve.csv"))?;
    let mut f = fs::File::create(out_dir.join("train_config.json")).at(out_dir)?;
    f.write_all(&serde_json::to_vec_pretty(cfg)?)?;
    Ok(TrainReport { curve, best_epoch: best.0, best_val: best.1, checkpoint, train_ids, val_ids })
}

/// Moving average over `window` epochs (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}
