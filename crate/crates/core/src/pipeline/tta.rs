//! Test-time augmentation: multi-scale, horizontal flip and checkpoint
//! ensembles, averaged in probability space.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMap;
use crate::model::FaceParser;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TTAConfig {
    pub scales: Vec<f64>,
    pub hflip: bool,
    /// Class pairs exchanged when a prediction is mirrored back, such as
    /// left and right eye.
    pub flip_label_swaps: Vec<(u8, u8)>,
    pub checkpoints: Vec<PathBuf>,
}

impl Default for TTAConfig {
    fn default() -> Self {
        TTAConfig { scales: vec![0.75, 1.0, 1.25], hflip: false, flip_label_swaps: Vec::new(), checkpoints: Vec::new() }
    }
}

impl TTAConfig {
    /// One scale, no flip.
    pub fn plain() -> Self {
        TTAConfig { scales: vec![1.0], ..Default::default() }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("TTA scales {:?} must be positive", self.scales)));
        }
        let mut used = vec![false; num_classes];
        for &(a, b) in &self.flip_label_swaps {
            for c in [a, b] {
                let slot = used
                    .get_mut(c as usize)
                    .ok_or_else(|| Error::Config(format!("swap class {c} ≥ {num_classes}")))?;
                if *slot {
                    return Err(Error::Config(format!("class {c} appears in more than one swap pair")));
                }
                *slot = true;
            }
            if a == b {
                return Err(Error::Config(format!("swap pair ({a}, {b}) is degenerate")));
            }
        }
        Ok(())
    }

    /// Channel permutation applied to mirrored predictions.
    fn channel_map(&self, k: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..k).collect();
        for &(a, b) in &self.flip_label_swaps {
            map.swap(a as usize, b as usize);
        }
        map
    }
}

/// Class probabilities `[1×K×H×W]` (after softmax) of one pass, resized to
/// `out_h×out_w`. The input is zero-padded on the bottom and right to a
/// valid extent, large enough for the coarsest pooling bin, and the logits
/// cropped back.
fn pass(model: &FaceParser, params: &ParamStore, image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[1, c, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("TTA expects one image, got {:?}", image.shape())));
    };
    let bb = &model.config.backbone;
    let floor = 32 * model.config.decoder.ppm_bins.iter().copied().max().unwrap_or(1);
    let (ph, pw) = (bb.next_valid_extent(h.max(floor)), bb.next_valid_extent(w.max(floor)));
    let padded = if (ph, pw) == (h, w) { image.clone() } else { pad(image, c, h, w, ph, pw)? };
    let frozen = FaceParser { config: model.config.clone(), params: params.clone() };
    let logits = frozen.forward(&padded)?.logits;
    let k = logits.shape()[1];
    let logits = if (ph, pw) == (h, w) { logits } else { crop(&logits, k, ph, pw, h, w)? };
    let probs = logits.softmax(1)?;
    if (h, w) == (out_h, out_w) {
        Ok(probs)
    } else {
        probs.bilinear_resize(out_h, out_w)
    }
}

fn pad(x: &Tensor, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Result<Tensor> {
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[(ch * h + y) * w..][..w];
            out[(ch * ph + y) * pw..][..w].copy_from_slice(src);
        }
    }
    Tensor::new(&[1, c, ph, pw], out)
}

fn crop(x: &Tensor, c: usize, ph: usize, pw: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            out.extend_from_slice(&x.data()[(ch * ph + y) * pw..][..w]);
        }
    }
    Tensor::new(&[1, c, h, w], out)
}

/// Segments one normalised `[1×3×H×W]` image with every model × scale ×
/// flip combination; returns the argmax map and the averaged `[1×K×H×W]`
/// probabilities.
pub fn predict_tta(image: &Tensor, models: &[FaceParser], cfg: &TTAConfig) -> Result<(SegmentationMap, Tensor)> {
    let Some(first) = models.first() else {
        return Err(Error::Argument("TTA needs at least one model".into()));
    };
    let k = first.config.num_classes();
    if models.iter().any(|m| m.config.num_classes() != k) {
        return Err(Error::Argument("ensemble members disagree on the number of classes".into()));
    }
    cfg.validate(k)?;
    let &[1, _, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("TTA expects one image, got {:?}", image.shape())));
    };

    let flips: &[bool] = if cfg.hflip { &[false, true] } else { &[false] };
    let channel_map = cfg.channel_map(k);
    let plane = h * w;
    let mut total = vec![0.0; k * plane];
    let mut passes = 0usize;
    for model in models {
        let params = model.params.detached();
        for &s in &cfg.scales {
            let sh = ((h as f64 * s).round() as usize).max(1);
            let sw = ((w as f64 * s).round() as usize).max(1);
            for &flip in flips {
                let mut x = if (sh, sw) == (h, w) { image.clone() } else { image.bilinear_resize(sh, sw)? };
                if flip {
                    x = x.flip_last()?;
                }
                let mut probs = pass(model, &params, &x, h, w)?;
                if flip {
                    probs = probs.flip_last()?;
                }
                let p = probs.data();
                for (dst, &src) in channel_map.iter().enumerate() {
                    let src = if flip { src } else { dst };
                    for (t, v) in total[dst * plane..][..plane].iter_mut().zip(&p[src * plane..][..plane]) {
                        *t += v;
                    }
                }
                passes += 1;
            }
        }
    }
    if passes > 1 {
        let inv = 1.0 / passes as f64;
        total.iter_mut().for_each(|v| *v *= inv);
    }
    let probs = Tensor::new(&[1, k, h, w], total)?;
    let labels = probs.argmax(1)?.into_iter().map(|c| c as u8).collect();
    Ok((SegmentationMap::new(h, w, labels)?, probs))
}
