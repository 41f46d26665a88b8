//! Video segmentation metrics: region similarity J (IoU), boundary F
//! measure, temporal decay, and corpus mIoU.
//!
//! Conventions:
//! * J and F of a class absent from both prediction and ground truth are 1;
//!   absent from exactly one side they are 0.
//! * Boundaries are foreground pixels with a 4-neighbour inside the image
//!   that is background. Boundary pixels match when a counterpart lies within
//!   Euclidean distance `tolerance` (computed by dilating the other boundary
//!   with a disc).
//! * Decay is the mean of the first quartile of frames minus the mean of the
//!   last quartile (`ceil(n/4)` frames each). With fewer than four frames the
//!   halves `floor(n/2)` are used; a single frame has zero decay.
//! * Per video, J/F are evaluated for every non-background class appearing in
//!   either the ground truth or the prediction of any of its frames, averaged
//!   over frames, then over those classes; aggregates average over videos.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::dataset::{prediction_path, DatasetManifest};

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Data(format!(
                "segmentation map {height}×{width} with {} labels",
                labels.len()
            )));
        }
        Ok(SegmentationMap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Reads a single-channel 8-bit PNG whose pixel values are class indices.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        if img.color() != image::ColorType::L8 {
            return Err(Error::Data(format!(
                "{}: mask must be a single-channel 8-bit raster, found {:?}",
                path.display(),
                img.color()
            )));
        }
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Self::new(h as usize, w as usize, gray.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer matches extents");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

fn check_extents(pred: &SegmentationMap, gt: &SegmentationMap) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Data(format!(
            "prediction is {}×{} but ground truth is {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// IoU of the class-`class` masks.
pub fn region_j(pred: &SegmentationMap, gt: &SegmentationMap, class: u8) -> Result<f64> {
    check_extents(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p == class, g == class);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Boundary pixels of a binary mask.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let bg = |yy: usize, xx: usize| !mask[yy * width + xx];
            out[i] = (y > 0 && bg(y - 1, x))
                || (y + 1 < height && bg(y + 1, x))
                || (x > 0 && bg(y, x - 1))
                || (x + 1 < width && bg(y, x + 1));
        }
    }
    out
}

/// Default matching tolerance: `ceil(0.008 · diagonal)` pixels.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

fn dilate(b: &[bool], height: usize, width: usize, radius: f64) -> Vec<bool> {
    let r = radius.floor() as isize;
    let disc: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let mut out = vec![false; b.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !b[y as usize * width + x as usize] {
                continue;
            }
            for &(dy, dx) in &disc {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < width {
                    out[yy as usize * width + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure of the class-`class` masks.
pub fn boundary_f(pred: &SegmentationMap, gt: &SegmentationMap, class: u8, tolerance: f64) -> Result<f64> {
    check_extents(pred, gt)?;
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Argument(format!("boundary tolerance {tolerance} must be ≥ 0")));
    }
    let (h, w) = (gt.height, gt.width);
    let pb = boundary(&pred.mask(class), h, w);
    let gb = boundary(&gt.mask(class), h, w);
    let (np, ng) = (count(&pb), count(&gb));
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let gd = dilate(&gb, h, w, tolerance);
    let pd = dilate(&pb, h, w, tolerance);
    let matched_pred = pb.iter().zip(&gd).filter(|(a, b)| **a && **b).count();
    let matched_gt = gb.iter().zip(&pd).filter(|(a, b)| **a && **b).count();
    let precision = matched_pred as f64 / np as f64;
    let recall = matched_gt as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

fn count(b: &[bool]) -> usize {
    b.iter().filter(|&&v| v).count()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Temporal decay of an ordered per-frame score series.
pub fn decay(scores: &[f64]) -> Result<f64> {
    let n = scores.len();
    let q = match n {
        0 => return Err(Error::Data("decay of an empty score series".into())),
        1 => return Ok(0.0),
        2 | 3 => n / 2,
        _ => n.div_ceil(4),
    };
    Ok(mean(&scores[..q]) - mean(&scores[n - q..]))
}

/// Per-class intersection and union counts accumulated over a corpus.
fn iou_counts(preds: &[&SegmentationMap], gts: &[&SegmentationMap], k: usize) -> Result<(Vec<u64>, Vec<u64>, Vec<bool>)> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    let mut present = vec![false; k];
    for (p, g) in preds.iter().zip(gts) {
        check_extents(p, g)?;
        for (&a, &b) in p.labels.iter().zip(&g.labels) {
            let (a, b) = (a as usize, b as usize);
            if b >= k || a >= k {
                return Err(Error::Data(format!("label {} outside [0, {k})", a.max(b))));
            }
            present[b] = true;
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    Ok((inter, union, present))
}

/// Corpus mIoU over classes present in the ground truth.
pub fn miou(preds: &[&SegmentationMap], gts: &[&SegmentationMap], k: usize) -> Result<f64> {
    let (inter, union, present) = iou_counts(preds, gts, k)?;
    let ious: Vec<f64> = (0..k)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::Data("mIoU over an empty corpus".into()));
    }
    Ok(mean(&ious))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_classes: usize,
    /// Also score class 0 with J/F.
    pub include_background: bool,
    /// Boundary tolerance in pixels; `None` uses [`default_tolerance`].
    pub boundary_tolerance: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { num_classes: 19, include_background: false, boundary_tolerance: None }
    }
}

/// One video's frames in capture order.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub id: String,
    pub preds: Vec<SegmentationMap>,
    pub gts: Vec<SegmentationMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub j_mean: Option<f64>,
    pub f_mean: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub id: String,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub j_decay: f64,
    pub f_decay: f64,
    /// class → (per-frame J, per-frame F)
    pub per_class: BTreeMap<u8, (Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub jf_mean: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub j_decay: f64,
    pub f_decay: f64,
    pub per_class: BTreeMap<u8, ClassScores>,
    pub per_video: Vec<VideoScores>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn score_video(video: &VideoFrames, cfg: &EvalConfig) -> Result<VideoScores> {
    if video.preds.len() != video.gts.len() || video.gts.is_empty() {
        return Err(Error::Data(format!(
            "video {}: {} predictions for {} frames",
            video.id,
            video.preds.len(),
            video.gts.len()
        )));
    }
    let first = if cfg.include_background { 0 } else { 1 };
    let classes: BTreeSet<u8> = video
        .preds
        .iter()
        .chain(&video.gts)
        .flat_map(|m| m.labels.iter().copied())
        .filter(|&c| c >= first)
        .collect();

    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let mut js = Vec::with_capacity(video.gts.len());
        let mut fs = Vec::with_capacity(video.gts.len());
        for (p, g) in video.preds.iter().zip(&video.gts) {
            let tol = cfg.boundary_tolerance.unwrap_or_else(|| default_tolerance(g.height, g.width));
            js.push(region_j(p, g, c)?);
            fs.push(boundary_f(p, g, c, tol)?);
        }
        per_class.insert(c, (js, fs));
    }

    let (j_mean, f_mean, j_decay, f_decay) = if per_class.is_empty() {
        (1.0, 1.0, 0.0, 0.0)
    } else {
        let jm: Vec<f64> = per_class.values().map(|(j, _)| mean(j)).collect();
        let fm: Vec<f64> = per_class.values().map(|(_, f)| mean(f)).collect();
        let jd = per_class.values().map(|(j, _)| decay(j)).collect::<Result<Vec<_>>>()?;
        let fd = per_class.values().map(|(_, f)| decay(f)).collect::<Result<Vec<_>>>()?;
        (mean(&jm), mean(&fm), mean(&jd), mean(&fd))
    };
    Ok(VideoScores {
        id: video.id.clone(),
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
        j_decay,
        f_decay,
        per_class,
    })
}

/// Scores a set of videos. Aggregates do not depend on video order.
pub fn evaluate_videos(videos: &[VideoFrames], cfg: &EvalConfig) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::Data("no videos to evaluate".into()));
    }
    let k = cfg.num_classes;
    let mut per_video: Vec<VideoScores> = videos.iter().map(|v| score_video(v, cfg)).collect::<Result<_>>()?;
    per_video.sort_by(|a, b| a.id.cmp(&b.id));

    let preds: Vec<&SegmentationMap> = videos.iter().flat_map(|v| &v.preds).collect();
    let gts: Vec<&SegmentationMap> = videos.iter().flat_map(|v| &v.gts).collect();
    let (inter, union, present) = iou_counts(&preds, &gts, k)?;
    let miou = miou(&preds, &gts, k)?;

    let mut per_class = BTreeMap::new();
    for c in 0..k {
        let c8 = c as u8;
        let scored: Vec<&(Vec<f64>, Vec<f64>)> = per_video.iter().filter_map(|v| v.per_class.get(&c8)).collect();
        let iou = present[c].then(|| inter[c] as f64 / union[c] as f64);
        if scored.is_empty() && iou.is_none() {
            continue;
        }
        let (j_mean, f_mean) = if scored.is_empty() {
            (None, None)
        } else {
            let jm: Vec<f64> = scored.iter().map(|(j, _)| mean(j)).collect();
            let fm: Vec<f64> = scored.iter().map(|(_, f)| mean(f)).collect();
            (Some(mean(&jm)), Some(mean(&fm)))
        };
        per_class.insert(c8, ClassScores { j_mean, f_mean, iou });
    }

    let collect = |f: fn(&VideoScores) -> f64| mean(&per_video.iter().map(f).collect::<Vec<_>>());
    let j_mean = collect(|v| v.j_mean);
    let f_mean = collect(|v| v.f_mean);
    Ok(EvalReport {
        miou,
        jf_mean: collect(|v| v.jf_mean),
        j_mean,
        f_mean,
        j_decay: collect(|v| v.j_decay),
        f_decay: collect(|v| v.f_decay),
        per_class,
        per_video,
    })
}

/// Loads `<pred_dir>/<video>/<frame>.png` for every manifest frame and
/// scores it against the manifest's ground truth.
pub fn evaluate_dataset(pred_dir: &Path, manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for video in &manifest.videos {
        let mut preds = Vec::with_capacity(video.frames.len());
        let mut gts = Vec::with_capacity(video.frames.len());
        for frame in &video.frames {
            let path = prediction_path(pred_dir, &video.id, &frame.image_path);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "missing prediction for video {} frame {}: expected {}",
                    video.id,
                    frame.image_path.display(),
                    path.display()
                )));
            }
            preds.push(SegmentationMap::read_png(&path)?);
            gts.push(frame.mask.clone());
        }
        videos.push(VideoFrames { id: video.id.clone(), preds, gts });
    }
    evaluate_videos(&videos, cfg)
}
