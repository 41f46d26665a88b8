//! Shuffle Transformer backbone.
//!
//! Four stages of window-attention blocks over a `[N×C×h×w]` token grid.
//! Blocks alternate between plain window attention and attention over a
//! spatially shuffled grid, where each window gathers tokens spaced
//! `h / window` apart, so information crosses window borders. Each block
//! also carries a depthwise 3×3 convolution that links neighbouring windows.
//!
//! Stage outputs form the [`FeaturePyramid`]: strides 4, 8, 16 and 32 with
//! `C·m[i]` channels for channel multipliers `m`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, Scope};
use crate::tensor::{Conv2dSpec, Tensor};

pub const IN_CHANNELS: usize = 3;
const PATCH: usize = 4;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub depths: Vec<usize>,
    pub window_size: usize,
    pub heads: Vec<usize>,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2, 3, 4],
            depths: vec![2, 2, 2, 2],
            window_size: 4,
            heads: vec![1, 2, 3, 4],
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let four = |name: &str, v: &[usize]| {
            if v.len() != 4 {
                return Err(Error::Config(format!("{name} needs 4 entries, got {v:?}")));
            }
            Ok(())
        };
        four("channel_multipliers", &self.channel_multipliers)?;
        four("depths", &self.depths)?;
        four("heads", &self.heads)?;
        if self.base_channels == 0 || self.window_size == 0 {
            return Err(Error::Config("base_channels and window_size must be positive".into()));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.hidden_channels(1) == 0 {
            return Err(Error::Config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        for s in 0..4 {
            let c = self.stage_channels(s);
            let h = self.heads[s];
            if c == 0 || h == 0 || !c.is_multiple_of(h) {
                return Err(Error::Config(format!(
                    "stage {s}: {c} channels not divisible into {h} heads"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_multipliers[stage]
    }

    fn hidden_channels(&self, channels: usize) -> usize {
        (self.mlp_ratio * channels as f64).round() as usize
    }

    /// Window extent used along an axis whose token grid is `grid` long: the
    /// configured window, shrunk to the grid when the grid is smaller.
    pub fn window_for(&self, grid: usize) -> usize {
        self.window_size.min(grid)
    }

    /// Whether an input extent lets every stage tile its grid into windows.
    pub fn extent_ok(&self, extent: usize) -> bool {
        if extent == 0 || !extent.is_multiple_of(PATCH * 8) {
            return false;
        }
        (0..4).all(|s| {
            let grid = extent / (PATCH << s);
            grid.is_multiple_of(self.window_for(grid))
        })
    }

    /// Smallest valid extent ≥ `extent`.
    pub fn next_valid_extent(&self, extent: usize) -> usize {
        let mut e = extent.max(1).next_multiple_of(PATCH * 8);
        while !self.extent_ok(e) {
            e += PATCH * 8;
        }
        e
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if !self.extent_ok(h) || !self.extent_ok(w) {
            return Err(Error::Config(format!(
                "input {h}×{w} does not tile into {w0}×{w0} windows at every stage \
                 (extents must be multiples of 32 and stage grids divisible by the window)",
                w0 = self.window_size
            )));
        }
        Ok(())
    }
}

/// The four stage outputs, strides 4/8/16/32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }
}

/// Position of row `i` after the shuffle of a `len`-long axis tiled by
/// `window`: `i = a·(len/window) + b` moves to `b·window + a`.
pub fn shuffle_position(i: usize, len: usize, window: usize) -> usize {
    let groups = len / window;
    let (a, b) = (i / groups, i % groups);
    b * window + a
}

fn check_tiling(h: usize, w: usize, wh: usize, ww: usize, op: &str) -> Result<()> {
    if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
        return Err(Error::Config(format!(
            "{op}: {h}×{w} grid does not tile into {wh}×{ww} windows"
        )));
    }
    Ok(())
}

fn dims(x: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!("{op}: expected [N, C, h, w], got {:?}", x.shape()))),
    }
}

fn permute_grid(x: &Tensor, wh: usize, ww: usize, inverse: bool, op: &str) -> Result<Tensor> {
    let (n, c, h, w) = dims(x, op)?;
    check_tiling(h, w, wh, ww, op)?;
    let rows: Vec<usize> = (0..h).map(|i| shuffle_position(i, h, wh)).collect();
    let cols: Vec<usize> = (0..w).map(|j| shuffle_position(j, w, ww)).collect();
    // out[pos(i)] = in[i] for the shuffle; the inverse reads the other way
    let mut src_row = vec![0; h];
    let mut src_col = vec![0; w];
    for (i, &r) in rows.iter().enumerate() {
        if inverse { src_row[i] = r } else { src_row[r] = i }
    }
    for (j, &col) in cols.iter().enumerate() {
        if inverse { src_col[j] = col } else { src_col[col] = j }
    }
    let mut index = Vec::with_capacity(x.numel());
    for plane in 0..n * c {
        for &sr in &src_row {
            for &sc in &src_col {
                index.push((plane * h + sr) * w + sc);
            }
        }
    }
    x.gather(index, x.shape())
}

/// Spatial shuffle of a `[N×C×h×w]` grid with `wh×ww` windows.
pub fn spatial_shuffle(x: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    permute_grid(x, wh, ww, false, "spatial_shuffle")
}

/// Inverse of [`spatial_shuffle`].
pub fn spatial_unshuffle(x: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    permute_grid(x, wh, ww, true, "spatial_unshuffle")
}

/// `[N×C×h×w]` → `[windows·wh·ww, C]`, windows in raster order.
fn window_partition_index(n: usize, c: usize, h: usize, w: usize, wh: usize, ww: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..h / wh {
            for wx in 0..w / ww {
                for ty in 0..wh {
                    for tx in 0..ww {
                        let (y, x) = (wy * wh + ty, wx * ww + tx);
                        for ch in 0..c {
                            index.push(((b * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Relative position of every query/key pair in a `wh×ww` window, as an
/// index into the `(2w−1)²` bias table of a `w`-sized window.
fn relative_index(wh: usize, ww: usize, w: usize) -> Vec<usize> {
    let side = 2 * w - 1;
    let mut out = Vec::with_capacity((wh * ww).pow(2));
    for q in 0..wh * ww {
        for k in 0..wh * ww {
            let dy = (q / ww) as isize - (k / ww) as isize + w as isize - 1;
            let dx = (q % ww) as isize - (k % ww) as isize + w as isize - 1;
            out.push(dy as usize * side + dx as usize);
        }
    }
    out
}

pub fn init_attention<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, heads: usize, window: usize) -> Result<()> {
    b.trunc_normal("qkv.weight", &[channels, 3 * channels], INIT_STD)?;
    b.zeros("qkv.bias", &[3 * channels])?;
    b.trunc_normal("proj.weight", &[channels, channels], INIT_STD)?;
    b.zeros("proj.bias", &[channels])?;
    b.zeros("rel_bias", &[(2 * window - 1).pow(2), heads])
}

/// Multi-head self-attention inside non-overlapping `wh×ww` windows, with a
/// learnable relative-position bias per head. Returns the output and the
/// attention weights `[windows·heads, L, L]` (L = wh·ww).
///
/// Parameters under `p`: `qkv.weight [C, 3C]`, `qkv.bias`, `proj.weight
/// [C, C]`, `proj.bias`, `rel_bias [(2w−1)², heads]` where `w` is the
/// configured window size (`window`).
pub fn window_attention_with_weights(
    x: &Tensor,
    wh: usize,
    ww: usize,
    window: usize,
    heads: usize,
    p: &Scope<'_>,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dims(x, "window_attention")?;
    check_tiling(h, w, wh, ww, "window_attention")?;
    if wh > window || ww > window {
        return Err(Error::Config(format!(
            "window_attention: {wh}×{ww} window exceeds configured size {window}"
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "window_attention: {c} channels not divisible into {heads} heads"
        )));
    }
    let d = c / heads;
    let len = wh * ww;
    let windows = n * (h / wh) * (w / ww);
    let tokens_n = windows * len;

    let part = window_partition_index(n, c, h, w, wh, ww);
    let unpart = invert(&part);
    let tokens = x.gather(part, &[tokens_n, c])?;
    let qkv = tokens
        .matmul(p.get("qkv.weight")?)?
        .add_bias(p.get("qkv.bias")?, 1)?;

    // split heads: [windows·heads, L, d] (k laid out transposed as [.., d, L])
    let bh = windows * heads;
    let mut qi = Vec::with_capacity(bh * len * d);
    let mut ki = Vec::with_capacity(bh * len * d);
    let mut vi = Vec::with_capacity(bh * len * d);
    for win in 0..windows {
        for hd in 0..heads {
            for t in 0..len {
                for j in 0..d {
                    let row = (win * len + t) * 3 * c;
                    qi.push(row + hd * d + j);
                    vi.push(row + 2 * c + hd * d + j);
                }
            }
            for j in 0..d {
                for t in 0..len {
                    ki.push((win * len + t) * 3 * c + c + hd * d + j);
                }
            }
        }
    }
    let q = qkv.gather(qi, &[bh, len, d])?;
    let kt = qkv.gather(ki, &[bh, d, len])?;
    let v = qkv.gather(vi, &[bh, len, d])?;

    let rel = relative_index(wh, ww, window);
    let table = p.get("rel_bias")?;
    let bias_index = (0..windows)
        .flat_map(|_| (0..heads).flat_map(|hd| rel.iter().map(move |&r| r * heads + hd)))
        .collect();
    let bias = table.gather(bias_index, &[bh, len, len])?;

    let scores = q.bmm(&kt)?.scale(1.0 / (d as f64).sqrt())?.add(&bias)?;
    let attn = scores.softmax(2)?;
    let ctx = attn.bmm(&v)?;

    // merge heads back to [tokens, C]
    let mut mi = Vec::with_capacity(tokens_n * c);
    for win in 0..windows {
        for t in 0..len {
            for hd in 0..heads {
                for j in 0..d {
                    mi.push(((win * heads + hd) * len + t) * d + j);
                }
            }
        }
    }
    let merged = ctx.gather(mi, &[tokens_n, c])?;
    let out = merged
        .matmul(p.get("proj.weight")?)?
        .add_bias(p.get("proj.bias")?, 1)?;
    Ok((out.gather(unpart, &[n, c, h, w])?, attn))
}

pub fn window_attention(
    x: &Tensor,
    wh: usize,
    ww: usize,
    window: usize,
    heads: usize,
    p: &Scope<'_>,
) -> Result<Tensor> {
    Ok(window_attention_with_weights(x, wh, ww, window, heads, p)?.0)
}

pub fn init_block<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &BackboneConfig, channels: usize, heads: usize) -> Result<()> {
    let hidden = cfg.hidden_channels(channels);
    b.ones("norm1.gamma", &[channels])?;
    b.zeros("norm1.beta", &[channels])?;
    b.scoped("attn", |b| init_attention(b, channels, heads, cfg.window_size))?;
    b.trunc_normal("local.weight", &[channels, 1, 3, 3], INIT_STD)?;
    b.zeros("local.bias", &[channels])?;
    b.ones("norm2.gamma", &[channels])?;
    b.zeros("norm2.beta", &[channels])?;
    b.trunc_normal("mlp.fc1.weight", &[hidden, channels, 1, 1], INIT_STD)?;
    b.zeros("mlp.fc1.bias", &[hidden])?;
    b.trunc_normal("mlp.fc2.weight", &[channels, hidden, 1, 1], INIT_STD)?;
    b.zeros("mlp.fc2.bias", &[channels])
}

/// One pre-norm block:
/// `x += WMSA(LN(x))` (through the shuffle when `shuffled`),
/// `x += DWConv3×3(x)`, `x += MLP(LN(x))`.
pub fn shuffle_block(x: &Tensor, cfg: &BackboneConfig, heads: usize, p: &Scope<'_>, shuffled: bool) -> Result<Tensor> {
    let (_, c, h, w) = dims(x, "shuffle_block")?;
    let (wh, ww) = (cfg.window_for(h), cfg.window_for(w));

    let normed = x.layer_norm(1, p.get("norm1.gamma")?, p.get("norm1.beta")?, LN_EPS)?;
    let attn_scope = p.sub("attn");
    let attended = if shuffled {
        let s = spatial_shuffle(&normed, wh, ww)?;
        let a = window_attention(&s, wh, ww, cfg.window_size, heads, &attn_scope)?;
        spatial_unshuffle(&a, wh, ww)?
    } else {
        window_attention(&normed, wh, ww, cfg.window_size, heads, &attn_scope)?
    };
    let x = x.add(&attended)?;

    let local = x.conv2d(
        p.get("local.weight")?,
        Some(p.get("local.bias")?),
        Conv2dSpec::same(3).with_groups(c),
    )?;
    let x = x.add(&local)?;

    let normed = x.layer_norm(1, p.get("norm2.gamma")?, p.get("norm2.beta")?, LN_EPS)?;
    let hidden = normed
        .conv2d(p.get("mlp.fc1.weight")?, Some(p.get("mlp.fc1.bias")?), Conv2dSpec::default())?
        .gelu()?;
    let mlp = hidden.conv2d(p.get("mlp.fc2.weight")?, Some(p.get("mlp.fc2.bias")?), Conv2dSpec::default())?;
    x.add(&mlp)
}

/// 2×2 neighbourhood concatenation (`4·C` channels, ordered top-left,
/// top-right, bottom-left, bottom-right) followed by a bias-free linear map
/// to `C_out`. `weight` is `[C_out, 4·C, 1, 1]`.
pub fn patch_merge(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims(x, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("patch_merge: odd grid {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(x.numel());
    for b in 0..n {
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        index.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx);
                    }
                }
            }
        }
    }
    x.gather(index, &[n, 4 * c, oh, ow])?
        .conv2d(weight, None, Conv2dSpec::default())
}

/// 4×4 stride-4 convolution from RGB to `C` channels.
pub fn patch_embed(image: &Tensor, cfg: &BackboneConfig, p: &Scope<'_>) -> Result<Tensor> {
    let (_, ch, h, w) = dims(image, "patch_embed")?;
    if ch != IN_CHANNELS {
        return Err(Error::Dimension(format!(
            "patch_embed: expected {IN_CHANNELS} input channels, got {ch}"
        )));
    }
    cfg.check_input(h, w)?;
    image.conv2d(
        p.get("weight")?,
        Some(p.get("bias")?),
        Conv2dSpec { stride: PATCH, padding: 0, groups: 1 },
    )
}

/// Registers all backbone parameters under the builder's current prefix.
pub fn init_backbone<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let c0 = cfg.stage_channels(0);
    b.scoped("patch_embed", |b| {
        b.trunc_normal("weight", &[c0, IN_CHANNELS, PATCH, PATCH], INIT_STD)?;
        b.zeros("bias", &[c0])
    })?;
    for s in 0..4 {
        let c = cfg.stage_channels(s);
        b.scoped(&format!("stage{s}"), |b| {
            for blk in 0..cfg.depths[s] {
                b.scoped(&format!("block{blk}"), |b| init_block(b, cfg, c, cfg.heads[s]))?;
            }
            if s < 3 {
                b.trunc_normal("merge.weight", &[cfg.stage_channels(s + 1), 4 * c, 1, 1], INIT_STD)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

pub fn backbone_forward(image: &Tensor, cfg: &BackboneConfig, p: &Scope<'_>) -> Result<FeaturePyramid> {
    cfg.validate()?;
    let mut x = patch_embed(image, cfg, &p.sub("patch_embed"))?;
    let mut levels = Vec::with_capacity(4);
    for s in 0..4 {
        let stage = p.sub(&format!("stage{s}"));
        for blk in 0..cfg.depths[s] {
            x = shuffle_block(&x, cfg, cfg.heads[s], &stage.sub(&format!("block{blk}")), blk % 2 == 1)?;
        }
        levels.push(x.clone());
        if s < 3 {
            x = patch_merge(&x, stage.get("merge.weight")?)?;
        }
    }
    let levels: [Tensor; 4] = levels.try_into().expect("four stages");
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shuffle_rows_h4_w2() {
        let pos: Vec<usize> = (0..4).map(|i| shuffle_position(i, 4, 2)).collect();
        assert_eq!(pos, vec![0, 2, 1, 3]);
    }

    #[test]
    fn shuffle_moves_rows_as_stated() {
        // 1×1×4×1 column holding its row index
        let x = Tensor::new(&[1, 1, 4, 1], vec![0., 1., 2., 3.]).unwrap();
        let s = spatial_shuffle(&x, 2, 1).unwrap();
        assert_eq!(s.data(), &[0., 2., 1., 3.]);
        assert_eq!(spatial_unshuffle(&s, 2, 1).unwrap().data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn shuffle_rejects_untileable_grid() {
        let x = Tensor::zeros(&[1, 1, 6, 4]).unwrap();
        assert!(matches!(spatial_shuffle(&x, 4, 4), Err(Error::Config(_))));
    }

    #[test]
    fn shuffled_windows_collect_strided_rows() {
        // h = 8, window 2: window 0 should hold rows 0 and 4
        let pos: Vec<usize> = (0..8).map(|i| shuffle_position(i, 8, 2)).collect();
        assert_eq!(pos[0], 0);
        assert_eq!(pos[4], 1);
    }

    #[test]
    fn toy_extents() {
        let cfg = BackboneConfig::default();
        assert!(cfg.extent_ok(64));
        assert!(cfg.extent_ok(128));
        assert!(!cfg.extent_ok(48));
        assert!(!cfg.extent_ok(96)); // stage-2 grid of 6 does not tile into 4×4 windows
        assert_eq!(cfg.next_valid_extent(65), 128);
        let full = BackboneConfig { window_size: 7, base_channels: 96, heads: vec![3, 6, 9, 12], ..Default::default() };
        assert!(full.extent_ok(672));
    }

    #[test]
    fn head_divisibility_checked() {
        let cfg = BackboneConfig { heads: vec![3, 2, 3, 4], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_window_returns_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        b.scoped("attn", |b| init_attention(b, 2, 1, 1)).unwrap();
        // v columns of qkv: identity; proj: identity
        let mut qkv = store.get("attn.qkv.weight").unwrap().data().to_vec();
        for r in 0..2 {
            for cidx in 4..6 {
                qkv[r * 6 + cidx] = if cidx - 4 == r { 1.0 } else { 0.0 };
            }
        }
        store.set("attn.qkv.weight", qkv).unwrap();
        store.set("attn.proj.weight", vec![1., 0., 0., 1.]).unwrap();
        let x = Tensor::new(&[1, 2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = window_attention(&x, 1, 1, 1, 1, &Scope::new(&store, "attn")).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
