#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use faceparse::backbone::BackboneConfig;
use faceparse::decoder::DecoderConfig;
use faceparse::metrics::SegmentationMap;
use faceparse::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASS_COLOURS: [[u8; 3]; 4] = [[20, 20, 20], [230, 60, 40], [40, 200, 70], [50, 80, 235]];

pub fn toy_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::default(),
        decoder: DecoderConfig { common_dim: 16, ppm_bins: vec![1, 2], num_classes, head_channels: 16 },
    }
}

/// Background with up to three axis-aligned rectangles snapped to a 4-px grid.
pub fn rect_mask(rng: &mut impl Rng, size: usize, k: usize) -> Vec<u8> {
    let cells = size / 4;
    let mut labels = vec![0u8; size * size];
    for class in 1..k as u8 {
        let (h, w) = (rng.random_range(2..=cells / 2), rng.random_range(2..=cells / 2));
        let (y0, x0) = (rng.random_range(0..=cells - h), rng.random_range(0..=cells - w));
        for y in 4 * y0..4 * (y0 + h) {
            for x in 4 * x0..4 * (x0 + w) {
                labels[y * size + x] = class;
            }
        }
    }
    labels
}

pub fn paint(labels: &[u8], size: usize, rng: &mut impl Rng, noise: i32) -> image::RgbImage {
    image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let c = CLASS_COLOURS[labels[y as usize * size + x as usize] as usize];
        image::Rgb(c.map(|v| (v as i32 + rng.random_range(-noise..=noise)).clamp(0, 255) as u8))
    })
}

/// Writes `videos × frames` synthetic frames and a manifest; returns its path.
pub fn write_rect_dataset(dir: &Path, videos: usize, frames: usize, size: usize, k: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for v in 0..videos {
        let id = format!("video{v}");
        std::fs::create_dir_all(dir.join(&id)).unwrap();
        let mut list = Vec::new();
        for f in 0..frames {
            let labels = rect_mask(&mut rng, size, k);
            let image = format!("{id}/frame{f:02}.png");
            let mask = format!("{id}/frame{f:02}_mask.png");
            paint(&labels, size, &mut rng, 12).save(dir.join(&image)).unwrap();
            SegmentationMap::new(size, size, labels).unwrap().write_png(&dir.join(&mask)).unwrap();
            list.push(serde_json::json!({"image": image, "mask": mask}));
        }
        entries.push(serde_json::json!({"id": id, "frames": list}));
    }
    let palette: serde_json::Map<String, serde_json::Value> =
        (0..k).map(|c| (c.to_string(), serde_json::Value::from(format!("class{c}")))).collect();
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::json!({"videos": entries, "palette": palette}).to_string()).unwrap();
    path
}

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize, k: u8) -> SegmentationMap {
    // blobs rather than salt-and-pepper noise so boundaries are meaningful
    let mut labels = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..4) {
        let class = rng.random_range(0..k);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                labels[y * w + x] = class;
            }
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let i = rng.random_range(0..h * w);
        labels[i] = rng.random_range(0..k);
    }
    SegmentationMap::new(h, w, labels).unwrap()
}

// Brute-force metric oracles: scalar loops over coordinates, no shared code
// with the library beyond the map type.

pub fn oracle_j(p: &SegmentationMap, g: &SegmentationMap, class: u8) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..g.height() {
        for x in 0..g.width() {
            let a = p.get(y, x) == class;
            let b = g.get(y, x) == class;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn oracle_boundary(m: &SegmentationMap, class: u8) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m.get(y as usize, x as usize) != class {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dy, dx)| inside(y + dy, x + dx) && m.get((y + dy) as usize, (x + dx) as usize) != class);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn oracle_f(p: &SegmentationMap, g: &SegmentationMap, class: u8, tol: f64) -> f64 {
    let pb = oracle_boundary(p, class);
    let gb = oracle_boundary(g, class);
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let near = |a: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64) <= tol * tol)
    };
    let mp = pb.iter().filter(|a| near(a, &gb)).count();
    let mg = gb.iter().filter(|a| near(a, &pb)).count();
    let precision = mp as f64 / pb.len() as f64;
    let recall = mg as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn oracle_mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

pub fn oracle_decay(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 1 {
        return 0.0;
    }
    let q = if n < 4 { n / 2 } else { n.div_ceil(4) };
    oracle_mean(&v[..q]) - oracle_mean(&v[n - q..])
}

pub fn oracle_miou(preds: &[SegmentationMap], gts: &[SegmentationMap], k: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let (mut inter, mut union, mut present) = (0u64, 0u64, false);
        for (p, g) in preds.iter().zip(gts) {
            for y in 0..g.height() {
                for x in 0..g.width() {
                    let (a, b) = (p.get(y, x) == c, g.get(y, x) == c);
                    present |= b;
                    inter += (a && b) as u64;
                    union += (a || b) as u64;
                }
            }
        }
        if present {
            ious.push(inter as f64 / union as f64);
        }
    }
    oracle_mean(&ious)
}

/// (jf_mean, j_decay, f_decay) over videos `(id, preds, gts)`.
pub fn oracle_video_scores(videos: &[(String, Vec<SegmentationMap>, Vec<SegmentationMap>)]) -> (f64, f64, f64) {
    let mut sorted: Vec<_> = videos.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let (mut jf, mut jd, mut fd) = (Vec::new(), Vec::new(), Vec::new());
    for (_, preds, gts) in sorted {
        let classes: BTreeSet<u8> =
            preds.iter().chain(gts).flat_map(|m| m.labels().iter().copied()).filter(|&c| c != 0).collect();
        if classes.is_empty() {
            jf.push(1.0);
            jd.push(0.0);
            fd.push(0.0);
            continue;
        }
        let (mut jm, mut fm, mut jdc, mut fdc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &c in &classes {
            let mut js = Vec::new();
            let mut fs = Vec::new();
            for (p, g) in preds.iter().zip(gts) {
                let diag = ((g.height() * g.height() + g.width() * g.width()) as f64).sqrt();
                js.push(oracle_j(p, g, c));
                fs.push(oracle_f(p, g, c, (0.008 * diag).ceil()));
            }
            jm.push(oracle_mean(&js));
            fm.push(oracle_mean(&fs));
            jdc.push(oracle_decay(&js));
            fdc.push(oracle_decay(&fs));
        }
        jf.push((oracle_mean(&jm) + oracle_mean(&fm)) / 2.0);
        jd.push(oracle_mean(&jdc));
        fd.push(oracle_mean(&fdc));
    }
    (oracle_mean(&jf), oracle_mean(&jd), oracle_mean(&fd))
}
