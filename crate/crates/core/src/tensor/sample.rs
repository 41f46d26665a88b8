//! Resampling: bilinear resize, adaptive average pooling and
//! offset-driven bilinear warping.

use super::{dims4, Tensor};
use crate::error::{Error, Result};

/// Two-tap linear interpolation stencil for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centre source coordinates (`align_corners = false`), clamped
/// to the valid range the way common deep-learning frameworks do.
fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|t| {
            let src = ((t as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - l, w1: l }
        })
        .collect()
}

/// Bounds of adaptive pooling cell `i`: `[floor(i·n/b), ceil((i+1)·n/b))`.
fn pool_range(i: usize, n: usize, bins: usize) -> (usize, usize) {
    (i * n / bins, ((i + 1) * n).div_ceil(bins))
}

impl Tensor {
    /// Bilinear resize of the two trailing axes of `[N×C×H×W]`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument("bilinear_resize: output extents must be ≥ 1".into()));
        }
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let x = self.data();
        let planes = n * c;
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for a in &ty {
                for b in &tx {
                    let top = b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1];
                    let bot = b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1];
                    out.push(a.w0 * top + a.w1 * bot);
                }
            }
        }
        Tensor::from_op("bilinear_resize", vec![n, c, out_h, out_w], out, vec![self.clone()], move |ctx| {
            let mut gx = vec![0.0; planes * h * w];
            let mut k = 0;
            for p in 0..planes {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for a in &ty {
                    for b in &tx {
                        let g = ctx.grad[k];
                        k += 1;
                        dst[a.i0 * w + b.i0] += g * a.w0 * b.w0;
                        dst[a.i0 * w + b.i1] += g * a.w0 * b.w1;
                        dst[a.i1 * w + b.i0] += g * a.w1 * b.w0;
                        dst[a.i1 * w + b.i1] += g * a.w1 * b.w1;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Averages `[N×C×H×W]` into a `bins_h × bins_w` grid of possibly
    /// overlapping cells.
    pub fn adaptive_avg_pool(&self, bins_h: usize, bins_w: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "adaptive_avg_pool")?;
        if bins_h == 0 || bins_w == 0 {
            return Err(Error::Argument("adaptive_avg_pool: bins must be ≥ 1".into()));
        }
        if bins_h > h || bins_w > w {
            return Err(Error::Argument(format!(
                "adaptive_avg_pool: {bins_h}×{bins_w} bins exceed input {h}×{w}"
            )));
        }
        let rows: Vec<_> = (0..bins_h).map(|i| pool_range(i, h, bins_h)).collect();
        let cols: Vec<_> = (0..bins_w).map(|j| pool_range(j, w, bins_w)).collect();
        let x = self.data();
        let planes = n * c;
        let mut out = Vec::with_capacity(planes * bins_h * bins_w);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut s = 0.0;
                    for y in r0..r1 {
                        s += src[y * w + c0..y * w + c1].iter().sum::<f64>();
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        Tensor::from_op("adaptive_avg_pool", vec![n, c, bins_h, bins_w], out, vec![self.clone()], move |ctx| {
            let mut gx = vec![0.0; planes * h * w];
            let mut k = 0;
            for p in 0..planes {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for &(r0, r1) in &rows {
                    for &(c0, c1) in &cols {
                        let g = ctx.grad[k] / ((r1 - r0) * (c1 - c0)) as f64;
                        k += 1;
                        for y in r0..r1 {
                            dst[y * w + c0..y * w + c1].iter_mut().for_each(|v| *v += g);
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Warps `[N×C×H×W]` by a per-pixel displacement field `[N×2×H×W]`
    /// (channel 0 = x / column shift, channel 1 = y / row shift, in pixels).
    ///
    /// `out(p) = bilinear read of self at p + Δ(p)`; taps outside the image
    /// read zero. Differentiable in both the features and the offsets. A zero
    /// field reproduces the input bit for bit.
    pub fn bilinear_sample(&self, offsets: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "bilinear_sample input")?;
        let (on, oc, oh, ow) = dims4(offsets, "bilinear_sample offsets")?;
        if on != n || oc != 2 || oh != h || ow != w {
            return Err(Error::Dimension(format!(
                "bilinear_sample: offsets {:?} must be [{n}, 2, {h}, {w}] for input {:?}",
                offsets.shape(),
                self.shape()
            )));
        }
        let stencils = warp_stencils(offsets.data(), n, h, w);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let plane = (b * c + ch) * h * w;
                for p in 0..h * w {
                    out[plane + p] = stencils[b * h * w + p].read(&x[plane..plane + h * w]);
                }
            }
        }

        Tensor::from_op("bilinear_sample", self.shape().to_vec(), out, vec![self.clone(), offsets.clone()], move |ctx| {
            let x = ctx.parents[0].data();
            let g = ctx.grad;
            let mut gx = ctx.needs[0].then(|| vec![0.0; x.len()]);
            let mut goff = ctx.needs[1].then(|| vec![0.0; n * 2 * h * w]);
            for b in 0..n {
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    let src = &x[plane..plane + h * w];
                    for p in 0..h * w {
                        let s = &stencils[b * h * w + p];
                        let go = g[plane + p];
                        if let Some(gx) = gx.as_mut() {
                            s.scatter(&mut gx[plane..plane + h * w], go);
                        }
                        if let Some(goff) = goff.as_mut() {
                            let (ddx, ddy) = s.slopes(src);
                            goff[(b * 2) * h * w + p] += go * ddx;
                            goff[(b * 2 + 1) * h * w + p] += go * ddy;
                        }
                    }
                }
            }
            vec![gx, goff]
        })
    }
}

/// Four-corner stencil of one warped read. Corner indices are `None` when
/// they fall outside the image.
struct WarpStencil {
    corners: [Option<usize>; 4], // (y0,x0) (y0,x1) (y1,x0) (y1,x1)
    fx: f64,
    fy: f64,
}

fn warp_stencils(off: &[f64], n: usize, h: usize, w: usize) -> Vec<WarpStencil> {
    let mut out = Vec::with_capacity(n * h * w);
    let inside = |y: f64, x: f64| -> Option<usize> {
        (y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64).then(|| y as usize * w + x as usize)
    };
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let sx = j as f64 + off[(b * 2) * h * w + p];
                let sy = i as f64 + off[(b * 2 + 1) * h * w + p];
                let (x0, y0) = (sx.floor(), sy.floor());
                out.push(WarpStencil {
                    corners: [
                        inside(y0, x0),
                        inside(y0, x0 + 1.0),
                        inside(y0 + 1.0, x0),
                        inside(y0 + 1.0, x0 + 1.0),
                    ],
                    fx: sx - x0,
                    fy: sy - y0,
                });
            }
        }
    }
    out
}

impl WarpStencil {
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx]
    }

    fn value(&self, src: &[f64], k: usize) -> f64 {
        self.corners[k].map_or(0.0, |i| src[i])
    }

    fn read(&self, src: &[f64]) -> f64 {
        if self.fx == 0.0 && self.fy == 0.0 {
            return self.value(src, 0);
        }
        self.weights().iter().enumerate().map(|(k, wk)| wk * self.value(src, k)).sum()
    }

    fn scatter(&self, dst: &mut [f64], g: f64) {
        for (corner, wk) in self.corners.iter().zip(self.weights()) {
            if let Some(i) = corner {
                dst[*i] += g * wk;
            }
        }
    }

    /// Partial derivatives of the read w.r.t. the x and y displacement.
    fn slopes(&self, src: &[f64]) -> (f64, f64) {
        let [v00, v01, v10, v11] = [0, 1, 2, 3].map(|k| self.value(src, k));
        let ddx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        let ddy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        (ddx, ddy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = Tensor::new(&[1, 1, 3, 4], vals).unwrap();
        assert_eq!(x.bilinear_resize(3, 4).unwrap().data(), x.data());
    }

    #[test]
    fn constant_survives_resize() {
        let x = Tensor::full(&[1, 2, 3, 5], 1.7).unwrap();
        for (oh, ow) in [(1, 1), (7, 2), (12, 20)] {
            let y = x.bilinear_resize(oh, ow).unwrap();
            assert!(y.data().iter().all(|v| (v - 1.7).abs() < 1e-12));
        }
    }

    #[test]
    fn pool_quadrant_means() {
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = x.adaptive_avg_pool(2, 2).unwrap();
        // quadrants {0,1,4,5} {2,3,6,7} {8,9,12,13} {10,11,14,15}
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(x.adaptive_avg_pool(1, 1).unwrap().data(), &[7.5]);
        assert_eq!(x.adaptive_avg_pool(4, 4).unwrap().data(), x.data());
    }

    #[test]
    fn pool_rejects_bad_bins() {
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(matches!(x.adaptive_avg_pool(0, 1), Err(Error::Argument(_))));
        assert!(x.adaptive_avg_pool(3, 1).is_err());
    }

    #[test]
    fn overlapping_pool_cells() {
        // 3 rows into 2 bins: [0,2) and [1,3)
        assert_eq!(pool_range(0, 3, 2), (0, 2));
        assert_eq!(pool_range(1, 3, 2), (1, 3));
    }

    #[test]
    fn zero_offsets_are_bitwise_identity() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let x = Tensor::new(&[2, 3, 4, 5], vals).unwrap();
        let off = Tensor::zeros(&[2, 2, 4, 5]).unwrap();
        let y = x.bilinear_sample(&off).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn half_pixel_shift_of_ramp() {
        let (h, w) = (3, 6);
        let x = Tensor::new(&[1, 1, h, w], (0..h * w).map(|i| (i % w) as f64).collect()).unwrap();
        let mut off = vec![0.0; 2 * h * w];
        off[..h * w].iter_mut().for_each(|v| *v = 0.5);
        let y = x.bilinear_sample(&Tensor::new(&[1, 2, h, w], off).unwrap()).unwrap();
        for i in 0..h {
            for j in 0..w - 1 {
                assert_eq!(y.data()[i * w + j], j as f64 + 0.5);
            }
            // last column reads half of a zero-padded neighbour
            assert_eq!(y.data()[i * w + w - 1], 0.5 * (w - 1) as f64);
        }
    }

    #[test]
    fn offsets_shape_checked() {
        let x = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        let off = Tensor::zeros(&[1, 2, 4, 3]).unwrap();
        assert!(matches!(x.bilinear_sample(&off), Err(Error::Dimension(_))));
    }
}
