//! The training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{training_samples, DatasetManifest, Sample};
use super::optim::Sgd;
use super::schedule::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{FaceParser, ModelConfig};
use crate::tensor::{Tensor, IGNORE_INDEX};

/// Stream offset that keeps batch shuffling independent of weight init.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FaceParser,
    pub checkpoint: PathBuf,
    pub loss_curve_path: PathBuf,
    pub losses: Vec<LossRecord>,
}

/// Stacks samples into a `[B×3×S×S]` batch and its flattened labels.
pub fn make_batch(samples: &[&Sample], size: usize) -> Result<(Tensor, Vec<u8>)> {
    let mut image = Vec::with_capacity(samples.len() * 3 * size * size);
    let mut labels = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        image.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(&[samples.len(), 3, size, size], image)?, labels))
}

/// Optimises `model` in place on prepared samples. Each epoch visits every
/// sample once in a seeded random order.
pub fn fit(model: &mut FaceParser, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let size = cfg.crop_size;
    model.config.backbone.check_input(size, size)?;
    let k = model.config.num_classes();
    if let Some(&bad) = samples
        .iter()
        .flat_map(|s| &s.labels)
        .find(|&&l| l != IGNORE_INDEX && l as usize >= k)
    {
        return Err(Error::Data(format!("training label {bad} but the model predicts {k} classes")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = losses.len();
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, y) = make_batch(&batch, size)?;
            let diverged = |loss: f64| Error::Diverged { step, lr, loss };
            let loss = match model.forward(&x).and_then(|o| o.logits.cross_entropy(&y, IGNORE_INDEX)) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(diverged(value));
            }
            model.params.zero_grad();
            loss.backward()?;
            opt.step(&mut model.params, lr)?;
            if model.params.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(value));
            }
            losses.push(LossRecord { step, epoch, lr, loss: value });
        }
    }
    Ok(losses)
}

/// Trains a fresh model on the whole manifest and writes `model.ckpt` and
/// `loss_curve.json` into `out_dir`.
pub fn train(ds: &DatasetManifest, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = training_samples(ds, cfg.crop_size)?;
    let mut model = FaceParser::init(model_cfg.clone(), cfg.seed)?;
    let losses = fit(&mut model, &samples, cfg)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join("model.ckpt");
    model.save(&checkpoint)?;
    let loss_curve_path = out_dir.join("loss_curve.json");
    let text = serde_json::to_string_pretty(&losses).map_err(|e| Error::json(&loss_curve_path, e))?;
    std::fs::write(&loss_curve_path, text).map_err(|e| Error::io(&loss_curve_path, e))?;
    Ok(TrainOutcome { model, checkpoint, loss_curve_path, losses })
}
