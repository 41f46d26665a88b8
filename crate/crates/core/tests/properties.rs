mod common;

use faceparse::backbone::{
    backbone_forward, init_backbone, spatial_shuffle, spatial_unshuffle, window_attention_with_weights, BackboneConfig,
};
use faceparse::decoder::faa_align;
use faceparse::metrics::{
    boundary_f, decay, evaluate_videos, miou, region_j, EvalConfig, SegmentationMap, VideoFrames,
};
use faceparse::params::{ParamBuilder, ParamStore, Scope};
use faceparse::pipeline::dataset::training_samples;
use faceparse::pipeline::optim::Sgd;
use faceparse::pipeline::{fit, load_dataset, lr_at, predict_tta, TTAConfig, TrainConfig};
use faceparse::tensor::Tensor;
use faceparse::FaceParser;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn values(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = SegmentationMap> {
    any::<u64>().prop_map(move |seed| common::random_map(&mut ChaCha8Rng::seed_from_u64(seed), h, w, 4))
}

fn pair_strategy() -> impl Strategy<Value = (SegmentationMap, SegmentationMap)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| (map_strategy(h, w), map_strategy(h, w)))
}

// tensor core --------------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed: u64) {
        let x = Tensor::new(&[rows, cols], values(rows * cols, seed, 20.0)).unwrap();
        let s = x.softmax(1).unwrap();
        for r in 0..rows {
            let total: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
        let shifted = Tensor::new(&[rows, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        for (a, b) in s.data().iter().zip(shifted.softmax(1).unwrap().data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_offsets_sample_exactly(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed: u64) {
        let x = Tensor::new(&[1, c, h, w], values(c * h * w, seed, 5.0)).unwrap();
        let y = x.bilinear_sample(&Tensor::zeros(&[1, 2, h, w]).unwrap()).unwrap();
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resize_and_pool_preserve_constants(
        h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, v in -100.0f64..100.0,
    ) {
        let x = Tensor::full(&[1, 2, h, w], v).unwrap();
        prop_assert!(x.bilinear_resize(oh, ow).unwrap().data().iter().all(|r| (r - v).abs() <= 1e-12));
        let (bh, bw) = (oh.min(h), ow.min(w));
        prop_assert!(x.adaptive_avg_pool(bh, bw).unwrap().data().iter().all(|r| (r - v).abs() <= 1e-12));
    }

    #[test]
    fn shared_node_accumulates_both_paths(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // L = Σ (x·y + x), dL/dx = y + 1, dL/dy = x
        let x = Tensor::param(&[1], vec![a]).unwrap();
        let y = Tensor::param(&[1], vec![b]).unwrap();
        x.mul(&y).unwrap().add(&x).unwrap().sum().unwrap().backward().unwrap();
        prop_assert_eq!(x.grad().unwrap(), vec![b + 1.0]);
        prop_assert_eq!(y.grad().unwrap(), vec![a]);
    }
}

// backbone -----------------------------------------------------------------

fn divisible_grid() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=16, 1usize..=16, 1usize..=4, 1usize..=4).prop_map(|(wh, ww, gy, gx)| (wh * gy, ww * gx, wh, ww))
}

proptest! {
    #[test]
    fn shuffle_is_a_bijection((h, w, wh, ww) in divisible_grid(), seed: u64) {
        let x = Tensor::new(&[2, 3, h, w], values(6 * h * w, seed, 1.0)).unwrap();
        let s = spatial_shuffle(&x, wh, ww).unwrap();
        let back = spatial_unshuffle(&s, wh, ww).unwrap();
        prop_assert_eq!(back.data(), x.data());
        let mut a: Vec<u64> = s.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_sum_to_one(heads in 1usize..3, win in 1usize..4, gy in 1usize..3, gx in 1usize..3, seed: u64) {
        let c = 2 * heads;
        let (h, w) = (win * gy, win * gx);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        faceparse::backbone::init_attention(&mut b, c, heads, win).unwrap();
        let table = (2 * win - 1).pow(2) * heads;
        store.set("rel_bias", values(table, seed ^ 1, 3.0)).unwrap();
        let x = Tensor::new(&[1, c, h, w], values(c * h * w, seed ^ 2, 3.0)).unwrap();
        let (out, attn) = window_attention_with_weights(&x, win, win, win, heads, &Scope::new(&store, "")).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        let len = win * win;
        prop_assert_eq!(attn.shape(), &[gy * gx * heads, len, len][..]);
        for row in attn.data().chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

fn small_backbone() -> impl Strategy<Value = (BackboneConfig, usize, usize)> {
    (prop::sample::select(vec![4usize, 8]), 1usize..=4, 1usize..=2, any::<u64>()).prop_filter_map(
        "no small valid extent",
        |(base, window, depth, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = BackboneConfig {
                base_channels: base,
                channel_multipliers: vec![1, 2, 3, 4],
                depths: vec![depth; 4],
                window_size: window,
                heads: vec![1, 2, 1, 2],
                mlp_ratio: 1.0,
            };
            let valid: Vec<usize> = [32, 64, 96].into_iter().filter(|&e| cfg.extent_ok(e)).collect();
            if valid.is_empty() {
                return None;
            }
            let h = valid[rng.random_range(0..valid.len())];
            let w = valid[rng.random_range(0..valid.len())];
            Some((cfg, h, w))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_and_alignment_extents((cfg, h, w) in small_backbone(), seed: u64) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_backbone(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let image = Tensor::new(&[1, 3, h, w], values(3 * h * w, seed, 1.0)).unwrap();
        let pyr = backbone_forward(&image, &cfg, &Scope::new(&store, "")).unwrap();
        for s in 0..4 {
            prop_assert_eq!(pyr.level(s).shape(), &[1, cfg.stage_channels(s), h >> (s + 2), w >> (s + 2)][..]);
        }

        // every coarser level aligns onto F1's grid
        let mut faa = ParamStore::new();
        let mut b = ParamBuilder::new(&mut faa, &mut rng);
        let d = 4;
        for l in 1..4 {
            b.scoped(&format!("l{l}"), |b| {
                b.trunc_normal("proj.weight", &[d, cfg.stage_channels(l), 1, 1], 0.5)?;
                b.zeros("proj.bias", &[d])?;
                b.trunc_normal("offset.conv1.weight", &[d, 2 * d, 3, 3], 0.5)?;
                b.zeros("offset.conv1.bias", &[d])?;
                b.trunc_normal("offset.conv2.weight", &[2, d, 3, 3], 0.5)?;
                b.zeros("offset.conv2.bias", &[2])
            }).unwrap();
        }
        let reference = Tensor::new(&[1, d, h / 4, w / 4], values(d * h * w / 16, seed ^ 3, 1.0)).unwrap();
        for l in 1..4 {
            let (aligned, delta) = faa_align(&reference, pyr.level(l), &Scope::new(&faa, &format!("l{l}"))).unwrap();
            prop_assert_eq!(aligned.shape(), reference.shape());
            prop_assert_eq!(delta.shape(), &[1, 2, h / 4, w / 4][..]);
        }
    }
}

fn grads_missing(store: &ParamStore, prefix: &str) -> Vec<String> {
    store
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .filter(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
        .map(|(name, _)| name.clone())
        .collect()
}

#[test]
fn every_backbone_parameter_gets_a_gradient() {
    let model = FaceParser::init(common::toy_model_config(4), 1).unwrap();
    let image = Tensor::new(&[1, 3, 64, 64], values(3 * 64 * 64, 1, 1.0)).unwrap();
    let pyr = backbone_forward(&image, &model.config.backbone, &Scope::new(&model.params, "backbone")).unwrap();
    let mut loss = Tensor::scalar(0.0).unwrap();
    for (i, level) in pyr.levels.iter().enumerate() {
        let weights = Tensor::new(level.shape(), values(level.numel(), 10 + i as u64, 1.0)).unwrap();
        loss = loss.add(&level.mul(&weights).unwrap().sum().unwrap()).unwrap();
    }
    loss.backward().unwrap();
    let dead = grads_missing(&model.params, "backbone.");
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}

/// One segmentation-loss step. The zero-initialised last offset layer blocks
/// gradient to the layer before it, so the check runs after one update.
#[test]
fn every_decoder_parameter_gets_a_gradient() {
    let mut model = FaceParser::init(common::toy_model_config(4), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<u8> = common::rect_mask(&mut rng, 64, 4);
    let image = Tensor::new(&[1, 3, 64, 64], values(3 * 64 * 64, 3, 1.0)).unwrap();
    let mut opt = Sgd::new(0.9, 5e-4);
    for step in 0..2 {
        let loss = model.forward(&image).unwrap().logits.cross_entropy(&labels, 255).unwrap();
        loss.backward().unwrap();
        let dead = grads_missing(&model.params, "decoder.");
        if step == 0 {
            assert!(dead.iter().all(|n| n.contains("offset.conv1")), "dead at init: {dead:?}");
        } else {
            assert!(dead.is_empty(), "no gradient reaches {dead:?}");
        }
        opt.step(&mut model.params, 0.01).unwrap();
    }
}

#[test]
fn offsets_move_when_overfitting() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_rect_dataset(dir.path(), 1, 4, 64, 4, 21);
    let samples = training_samples(&load_dataset(&manifest).unwrap(), 64).unwrap();
    let mut model = FaceParser::init(common::toy_model_config(4), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        warmup_epochs: 2,
        cycle_start_epoch: 15,
        peak_lr: 0.02,
        batch_size: 4,
        crop_size: 64,
        ..Default::default()
    };
    let losses = fit(&mut model, &samples, &cfg).unwrap();
    assert_eq!(losses.len(), 20);
    let x = Tensor::new(&[1, 3, 64, 64], samples[0].image.clone()).unwrap();
    for (i, d) in model.forward(&x).unwrap().offsets.iter().enumerate() {
        let mean_abs = d.data().iter().map(|v| v.abs()).sum::<f64>() / d.numel() as f64;
        assert!(mean_abs > 0.0, "offsets of level {} still zero", i + 2);
    }
}

// metrics ------------------------------------------------------------------

proptest! {
    #[test]
    fn j_and_f_are_symmetric_and_bounded((p, g) in pair_strategy(), class in 0u8..5, tol in 0.0f64..3.0) {
        let j = region_j(&p, &g, class).unwrap();
        let f = boundary_f(&p, &g, class, tol).unwrap();
        prop_assert_eq!(j, region_j(&g, &p, class).unwrap());
        prop_assert_eq!(f, boundary_f(&g, &p, class, tol).unwrap());
        prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
        let m = miou(&[&p], &[&g], 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn decay_is_bounded(scores in prop::collection::vec(0.0f64..=1.0, 1..30)) {
        let d = decay(&scores).unwrap();
        prop_assert!((-1.0..=1.0).contains(&d));
    }

    #[test]
    fn mask_png_round_trips(m in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| map_strategy(h, w))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        m.write_png(&path).unwrap();
        prop_assert_eq!(SegmentationMap::read_png(&path).unwrap(), m);
    }
}

fn random_videos(seed: u64) -> Vec<VideoFrames> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rng.random_range(1..5))
        .map(|v| {
            let frames = rng.random_range(1..7);
            let (h, w) = (rng.random_range(2..10), rng.random_range(2..10));
            VideoFrames {
                id: format!("v{v}"),
                preds: (0..frames).map(|_| common::random_map(&mut rng, h, w, 4)).collect(),
                gts: (0..frames).map(|_| common::random_map(&mut rng, h, w, 4)).collect(),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn report_is_bounded_and_order_invariant(seed: u64, rotate in 0usize..4) {
        let mut videos = random_videos(seed);
        let cfg = EvalConfig { num_classes: 4, ..Default::default() };
        let r = evaluate_videos(&videos, &cfg).unwrap();
        for v in [r.miou, r.jf_mean, r.j_mean, r.f_mean] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for v in [r.j_decay, r.f_decay] {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
        let n = videos.len();
        videos.rotate_left(rotate % n);
        videos.reverse();
        prop_assert_eq!(evaluate_videos(&videos, &cfg).unwrap(), r);
    }
}

// pipeline -----------------------------------------------------------------

proptest! {
    #[test]
    fn schedule_shape(peak in 1e-4f64..1.0, warm in 1usize..20, plateau in 1usize..50, tail in 2usize..60) {
        let cfg = TrainConfig {
            peak_lr: peak,
            warmup_epochs: warm,
            cycle_start_epoch: warm + plateau,
            epochs: warm + plateau + tail,
            ..Default::default()
        };
        let start = cfg.cycle_start_epoch;
        prop_assert!((lr_at(start, &cfg).unwrap() - lr_at(start - 1, &cfg).unwrap()).abs() <= 1e-15);
        for e in 0..cfg.epochs {
            prop_assert!(lr_at(e, &cfg).unwrap() > 0.0);
            prop_assert!(lr_at(e, &cfg).unwrap() <= peak * (1.0 + 1e-15));
        }
        for e in start + 1..cfg.epochs {
            prop_assert!(lr_at(e, &cfg).unwrap() <= lr_at(e - 1, &cfg).unwrap());
        }
        prop_assert!(lr_at(cfg.epochs, &cfg).is_err());
    }
}

#[test]
fn tta_ensemble_flip_and_scale_invariants() {
    let model = FaceParser::init(common::toy_model_config(4), 11).unwrap();
    // mirror-symmetric input
    let (h, w) = (48, 40);
    let half = values(3 * h * w, 12, 2.0);
    let sym: Vec<f64> = (0..3 * h * w)
        .map(|i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            half[(c * h + y) * w + x.min(w - 1 - x)]
        })
        .collect();
    let image = Tensor::new(&[1, 3, h, w], sym).unwrap();

    let cfg = TTAConfig { scales: vec![0.75, 1.0], hflip: true, flip_label_swaps: vec![(1, 2)], checkpoints: vec![] };
    let (map, probs) = predict_tta(&image, std::slice::from_ref(&model), &cfg).unwrap();
    assert_eq!((map.height(), map.width()), (h, w));
    let p = probs.data();
    let plane = h * w;
    let swapped = [0, 2, 1, 3];
    for c in 0..4 {
        for y in 0..h {
            for x in 0..w {
                let a = p[c * plane + y * w + x];
                let b = p[swapped[c] * plane + y * w + (w - 1 - x)];
                assert!((a - b).abs() <= 1e-10, "asymmetric at c{c} ({y},{x}): {a} vs {b}");
            }
        }
    }
    for px in 0..plane {
        let total: f64 = (0..4).map(|c| p[c * plane + px]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    let (twice, twice_probs) = predict_tta(&image, &[model.clone(), model.clone()], &cfg).unwrap();
    assert_eq!(twice, map);
    assert!(twice_probs.data().iter().zip(p).all(|(a, b)| (a - b).abs() <= 1e-12));

    let scaled = probs.scale(3.7).unwrap().argmax(1).unwrap();
    assert!(scaled.iter().zip(map.labels()).all(|(&a, &b)| a == b as usize));

    assert!(predict_tta(&image, &[], &cfg).is_err());
}
