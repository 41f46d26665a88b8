//! Manifest loading, raster decoding and training-sample preparation.
//!
//! Manifest format (paths relative to the manifest file):
//!
//! ```json
//! {
//!   "videos": [
//!     {"id": "v0", "frames": [
//!       {"image": "v0/000.png", "mask": "v0/000_mask.png", "crop": {"x": 4, "y": 0, "w": 64, "h": 64}}
//!     ]}
//!   ],
//!   "palette": {"0": "background", "1": "skin"}
//! }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMap;
use crate::tensor::Tensor;

/// Per-channel normalisation applied to RGB values scaled to [0, 1].
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    videos: Vec<VideoEntry>,
    palette: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoEntry {
    id: String,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    image: PathBuf,
    mask: PathBuf,
    #[serde(default)]
    crop: Option<CropBox>,
}

/// A decoded frame. `image` and `mask` are already cropped.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub crop: Option<CropBox>,
    pub image: RgbImage,
    pub mask: SegmentationMap,
}

#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub videos: Vec<Video>,
    pub palette: BTreeMap<u8, String>,
}

impl DatasetManifest {
    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }

    /// One more than the largest palette index.
    pub fn num_classes(&self) -> usize {
        self.palette.keys().next_back().map_or(0, |&k| k as usize + 1)
    }

    pub fn frames(&self) -> impl Iterator<Item = (&Video, &Frame)> {
        self.videos.iter().flat_map(|v| v.frames.iter().map(move |f| (v, f)))
    }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

/// Reads and validates a manifest, decoding every referenced raster.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    let mut palette = BTreeMap::new();
    for (key, name) in file.palette {
        let value: u8 = key
            .parse()
            .map_err(|_| data_err(manifest_path, format!("palette key `{key}` is not a value in 0..=255")))?;
        palette.insert(value, name);
    }
    if palette.is_empty() {
        return Err(data_err(manifest_path, "empty palette"));
    }

    let mut seen = HashSet::new();
    let mut videos = Vec::with_capacity(file.videos.len());
    for entry in file.videos {
        let id_ok = !entry.id.is_empty()
            && entry.id != "."
            && entry.id != ".."
            && !entry.id.contains(['/', '\\']);
        if !id_ok {
            return Err(data_err(manifest_path, format!("video id `{}` is not a plain name", entry.id)));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(data_err(manifest_path, format!("duplicate video id `{}`", entry.id)));
        }
        if entry.frames.is_empty() {
            return Err(data_err(manifest_path, format!("video `{}` has no frames", entry.id)));
        }
        let mut stems = HashSet::new();
        let mut frames = Vec::with_capacity(entry.frames.len());
        for f in entry.frames {
            let frame = load_frame(root, f, &palette)?;
            if !stems.insert(frame.image_path.file_stem().map(|s| s.to_os_string())) {
                return Err(data_err(
                    &frame.image_path,
                    format!("file stem repeats within video `{}`", entry.id),
                ));
            }
            frames.push(frame);
        }
        videos.push(Video { id: entry.id, frames });
    }
    if videos.is_empty() {
        return Err(data_err(manifest_path, "manifest lists no videos"));
    }
    Ok(DatasetManifest { videos, palette })
}

fn load_frame(root: &Path, f: FrameEntry, palette: &BTreeMap<u8, String>) -> Result<Frame> {
    let image_path = root.join(&f.image);
    let mask_path = root.join(&f.mask);
    let image = image::open(&image_path).map_err(|e| Error::image(&image_path, e))?.into_rgb8();
    let mask = SegmentationMap::read_png(&mask_path)?;
    if (image.height() as usize, image.width() as usize) != (mask.height(), mask.width()) {
        return Err(data_err(
            &mask_path,
            format!(
                "mask is {}×{} but image {} is {}×{}",
                mask.height(),
                mask.width(),
                image_path.display(),
                image.height(),
                image.width()
            ),
        ));
    }
    if let Some(v) = mask.labels().iter().find(|v| !palette.contains_key(v)) {
        return Err(data_err(&mask_path, format!("mask value {v} is not in the palette")));
    }

    let (image, mask) = match f.crop {
        None => (image, mask),
        Some(c) => {
            let fits = c.w > 0
                && c.h > 0
                && c.x.checked_add(c.w).is_some_and(|r| r <= image.width())
                && c.y.checked_add(c.h).is_some_and(|b| b <= image.height());
            if !fits {
                return Err(data_err(
                    &image_path,
                    format!("crop box {c:?} outside the {}×{} image", image.width(), image.height()),
                ));
            }
            let cropped = imageops::crop_imm(&image, c.x, c.y, c.w, c.h).to_image();
            let (x, y, w, h) = (c.x as usize, c.y as usize, c.w as usize, c.h as usize);
            let labels = (y..y + h)
                .flat_map(|r| (x..x + w).map(move |col| (r, col)))
                .map(|(r, col)| mask.get(r, col))
                .collect();
            (cropped, SegmentationMap::new(h, w, labels)?)
        }
    };
    Ok(Frame { image_path, mask_path, crop: f.crop, image, mask })
}

/// Where the prediction for a frame lives: `<dir>/<video>/<image stem>.png`.
pub fn prediction_path(dir: &Path, video_id: &str, image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().unwrap_or(image_path.as_os_str());
    dir.join(video_id).join(stem).with_extension("png")
}

/// Normalised `[1×3×H×W]` tensor of an RGB raster.
pub fn image_tensor(image: &RgbImage) -> Result<Tensor> {
    Tensor::new(&[1, 3, image.height() as usize, image.width() as usize], normalize(image))
}

fn normalize(image: &RgbImage) -> Vec<f64> {
    let plane = (image.width() * image.height()) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] as f64 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    out
}

/// One training example at the network's input resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Normalised `3×S×S` values.
    pub image: Vec<f64>,
    /// `S×S` class indices.
    pub labels: Vec<u8>,
}

/// Resizes every frame to `size×size`: bilinear for images, nearest for masks.
pub fn training_samples(ds: &DatasetManifest, size: usize) -> Result<Vec<Sample>> {
    if size == 0 {
        return Err(Error::Argument("crop size must be positive".into()));
    }
    let s = size as u32;
    ds.frames()
        .map(|(_, f)| {
            let same = f.image.width() == s && f.image.height() == s;
            let image = if same { f.image.clone() } else { imageops::resize(&f.image, s, s, FilterType::Triangle) };
            let labels = if same {
                f.mask.labels().to_vec()
            } else {
                let gray = image::GrayImage::from_raw(f.mask.width() as u32, f.mask.height() as u32, f.mask.labels().to_vec())
                    .expect("buffer matches extents");
                imageops::resize(&gray, s, s, FilterType::Nearest).into_raw()
            };
            Ok(Sample { image: normalize(&image), labels })
        })
        .collect()
}
