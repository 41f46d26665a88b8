//! Feature Alignment Aggregation decoder.
//!
//! The stride-4 feature F1 is projected to `D` channels and acts as the
//! reference grid. Each coarser source (F2, F3, and the pyramid-pooled F4)
//! is projected to `D`, bilinearly upsampled to F1's grid, and then warped
//! by a learned two-channel offset field Δ predicted from the pair
//! (reference, upsampled source). The aligned maps are summed with the
//! reference and a small convolutional head produces per-class logits at
//! input resolution.
//!
//! The last layer of every offset predictor starts at zero, so a fresh
//! decoder warps by exactly nothing and reduces to plain
//! upsample-and-sum aggregation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamBuilder, Scope};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub common_dim: usize,
    pub ppm_bins: Vec<usize>,
    pub num_classes: usize,
    pub head_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            common_dim: 16,
            ppm_bins: vec![1, 2, 3, 6],
            num_classes: 19,
            head_channels: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} must be ≥ 2", self.num_classes)));
        }
        if self.common_dim == 0 || self.head_channels == 0 {
            return Err(Error::Config("common_dim and head_channels must be positive".into()));
        }
        if self.ppm_bins.is_empty()
            || self.ppm_bins[0] == 0
            || self.ppm_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "ppm_bins {:?} must be positive and strictly increasing",
                self.ppm_bins
            )));
        }
        if !self.common_dim.is_multiple_of(self.ppm_bins.len()) {
            return Err(Error::Config(format!(
                "common_dim {} not divisible across {} pooling branches",
                self.common_dim,
                self.ppm_bins.len()
            )));
        }
        Ok(())
    }

    fn branch_dim(&self) -> usize {
        self.common_dim / self.ppm_bins.len()
    }
}

/// Decoder outputs. `offsets[i]` is the Δ used to align level `i + 2`
/// (F2, F3, pooled F4), each `[N×2×h1×w1]`.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Tensor,
    pub offsets: Vec<Tensor>,
}

fn conv_init<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
    // He-normal, truncated at two standard deviations
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let data = trunc_normal(b.rng, cout * cin * k * k, std);
    b.put(&format!("{name}.weight"), &[cout, cin, k, k], data)?;
    b.zeros(&format!("{name}.bias"), &[cout])
}

fn conv(x: &Tensor, p: &Scope<'_>, name: &str, k: usize) -> Result<Tensor> {
    x.conv2d(
        p.get(&format!("{name}.weight"))?,
        Some(p.get(&format!("{name}.bias"))?),
        Conv2dSpec::same(k),
    )
}

fn init_faa<R: Rng>(b: &mut ParamBuilder<'_, R>, in_channels: usize, dim: usize) -> Result<()> {
    conv_init(b, "proj", dim, in_channels, 1)?;
    conv_init(b, "offset.conv1", dim, 2 * dim, 3)?;
    b.zeros("offset.conv2.weight", &[2, dim, 3, 3])?;
    b.zeros("offset.conv2.bias", &[2])
}

/// Registers decoder parameters for a backbone with the given stage widths.
pub fn init_decoder<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &DecoderConfig, stage_channels: [usize; 4]) -> Result<()> {
    cfg.validate()?;
    let d = cfg.common_dim;
    conv_init(b, "proj1", d, stage_channels[0], 1)?;
    b.scoped("ppm", |b| {
        for (i, _) in cfg.ppm_bins.iter().enumerate() {
            conv_init(b, &format!("branch{i}"), cfg.branch_dim(), stage_channels[3], 1)?;
        }
        conv_init(b, "fuse", d, stage_channels[3] + d, 3)
    })?;
    b.scoped("faa2", |b| init_faa(b, stage_channels[1], d))?;
    b.scoped("faa3", |b| init_faa(b, stage_channels[2], d))?;
    b.scoped("faa4", |b| init_faa(b, d, d))?;
    b.scoped("head", |b| {
        conv_init(b, "conv1", cfg.head_channels, d, 3)?;
        conv_init(b, "conv2", cfg.num_classes, cfg.head_channels, 1)
    })
}

/// Pyramid pooling on the coarsest feature: per bin `b`, pool to `b×b`,
/// project to `D/len(bins)`, upsample back; concatenate with the input and
/// fuse with a 3×3 convolution to `D` channels.
pub fn ppm_forward(f4: &Tensor, cfg: &DecoderConfig, p: &Scope<'_>) -> Result<Tensor> {
    let &[_, _, h, w] = f4.shape() else {
        return Err(Error::Dimension(format!("ppm: expected 4-d input, got {:?}", f4.shape())));
    };
    let largest = *cfg.ppm_bins.last().unwrap_or(&0);
    if largest > h || largest > w {
        return Err(Error::Config(format!(
            "ppm: bin {largest} larger than the {h}×{w} feature"
        )));
    }
    let mut parts = vec![f4.clone()];
    for (i, &bins) in cfg.ppm_bins.iter().enumerate() {
        let pooled = f4.adaptive_avg_pool(bins, bins)?;
        let projected = conv(&pooled, p, &format!("branch{i}"), 1)?;
        parts.push(projected.bilinear_resize(h, w)?);
    }
    conv(&Tensor::concat(&parts, 1)?, p, "fuse", 3)
}

/// Aligns a low-resolution feature to the reference grid of `high`.
///
/// `U = resize(proj(low))`, `Δ = conv3×3(GELU(conv3×3([high, U])))`,
/// `aligned = warp(U, Δ)`. Returns `(aligned, Δ)`.
pub fn faa_align(high: &Tensor, low: &Tensor, p: &Scope<'_>) -> Result<(Tensor, Tensor)> {
    let (&[n, _, h, w], &[ln, _, lh, lw]) = (high.shape(), low.shape()) else {
        return Err(Error::Dimension(format!(
            "faa_align: expected 4-d inputs, got {:?} and {:?}",
            high.shape(),
            low.shape()
        )));
    };
    if n != ln || lh > h || lw > w {
        return Err(Error::Dimension(format!(
            "faa_align: low {:?} must share the batch of and be no larger than high {:?}",
            low.shape(),
            high.shape()
        )));
    }
    let upsampled = conv(low, p, "proj", 1)?.bilinear_resize(h, w)?;
    let pair = Tensor::concat(&[high.clone(), upsampled.clone()], 1)?;
    let hidden = conv(&pair, p, "offset.conv1", 3)?.gelu()?;
    let delta = conv(&hidden, p, "offset.conv2", 3)?;
    let aligned = upsampled.bilinear_sample(&delta)?;
    Ok((aligned, delta))
}

/// Conv 3×3 → GELU → conv 1×1 → bilinear upsample to `out_h×out_w`.
pub fn head_forward(fused: &Tensor, p: &Scope<'_>, out_h: usize, out_w: usize) -> Result<Tensor> {
    let hidden = conv(fused, p, "conv1", 3)?.gelu()?;
    conv(&hidden, p, "conv2", 1)?.bilinear_resize(out_h, out_w)
}

/// Full decoder: logits at 4× the resolution of F1.
pub fn decode(pyr: &FeaturePyramid, cfg: &DecoderConfig, p: &Scope<'_>) -> Result<DecodeOutput> {
    cfg.validate()?;
    let f1 = pyr.level(0);
    let &[_, _, h1, w1] = f1.shape() else {
        return Err(Error::Dimension(format!("decode: F1 shape {:?}", f1.shape())));
    };
    let reference = conv(f1, p, "proj1", 1)?;
    let pooled = ppm_forward(pyr.level(3), cfg, &p.sub("ppm"))?;
    let (a4, d4) = faa_align(&reference, &pooled, &p.sub("faa4"))?;
    let (a3, d3) = faa_align(&reference, pyr.level(2), &p.sub("faa3"))?;
    let (a2, d2) = faa_align(&reference, pyr.level(1), &p.sub("faa2"))?;
    let fused = reference.add(&a2)?.add(&a3)?.add(&a4)?;
    let logits = head_forward(&fused, &p.sub("head"), 4 * h1, 4 * w1)?;
    Ok(DecodeOutput { logits, offsets: vec![d2, d3, d4] })
}

/// Writes one image's offset field as a raw raster: `u32` height, `u32`
/// width, then the x plane and the y plane, row-major little-endian `f64`.
pub fn write_offset_field(path: &Path, delta: &Tensor, batch_index: usize) -> Result<()> {
    let &[n, 2, h, w] = delta.shape() else {
        return Err(Error::Dimension(format!("offset field shape {:?}", delta.shape())));
    };
    if batch_index >= n {
        return Err(Error::Argument(format!("batch index {batch_index} ≥ {n}")));
    }
    let plane = &delta.data()[batch_index * 2 * h * w..(batch_index + 1) * 2 * h * w];
    let mut buf = Vec::with_capacity(8 + plane.len() * 8);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in plane {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Reads a raster written by [`write_offset_field`] as `[1×2×h×w]`.
pub fn read_offset_field(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Data(format!("{}: malformed offset raster", path.display()));
    let header = bytes.get(..8).ok_or_else(bad)?;
    let h = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 2 * h * w * 8 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[1, 2, h, w], data)
}
