use super::ops::split_axis;
use super::Tensor;
use crate::error::{Error, Result};

/// Visits every 1-d lane along an axis: `f(start, stride)` where the lane's
/// elements sit at `start + j * stride`.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

impl Tensor {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for_each_lane(outer, len, inner, |s, st| {
            let max = (0..len).map(|j| x[s + j * st]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[s + j * st] - max).exp();
                out[s + j * st] = e;
                total += e;
            }
            for j in 0..len {
                out[s + j * st] /= total;
            }
        });
        Tensor::from_op("softmax", self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let mut gx = vec![0.0; y.len()];
            for_each_lane(outer, len, inner, |s, st| {
                let dot: f64 = (0..len).map(|j| g[s + j * st] * y[s + j * st]).sum();
                for j in 0..len {
                    let k = s + j * st;
                    gx[k] = y[k] * (g[k] - dot);
                }
            });
            vec![Some(gx)]
        })
    }

    /// Normalises each lane along `axis` to zero mean and unit variance
    /// (biased variance plus `eps`), then applies `gamma`, `beta`.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "layer_norm")?;
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{len}] for axis {axis} of {:?}",
                gamma.shape(),
                beta.shape(),
                self.shape()
            )));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Argument(format!("layer_norm: eps {eps} must be non-negative")));
        }
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let lanes = outer * inner;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(lanes);
        let mut out = vec![0.0; x.len()];
        for_each_lane(outer, len, inner, |s, st| {
            let mean = (0..len).map(|j| x[s + j * st]).sum::<f64>() / len as f64;
            let var = (0..len).map(|j| (x[s + j * st] - mean).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for j in 0..len {
                let k = s + j * st;
                xhat[k] = (x[k] - mean) * r;
                out[k] = gm[j] * xhat[k] + bt[j];
            }
        });
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        Tensor::from_op("layer_norm", self.shape().to_vec(), out, parents, move |ctx| {
            let g = ctx.grad;
            let gm = ctx.parents[1].data();
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; len];
            let mut gbeta = vec![0.0; len];
            let mut lane = 0;
            for_each_lane(outer, len, inner, |s, st| {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..len {
                    let k = s + j * st;
                    let d = g[k] * gm[j];
                    mean_d += d;
                    mean_dx += d * xhat[k];
                    ggamma[j] += g[k] * xhat[k];
                    gbeta[j] += g[k];
                }
                mean_d /= len as f64;
                mean_dx /= len as f64;
                let r = inv_std[lane];
                for j in 0..len {
                    let k = s + j * st;
                    gx[k] = r * (g[k] * gm[j] - mean_d - xhat[k] * mean_dx);
                }
                lane += 1;
            });
            vec![
                ctx.needs[0].then_some(gx),
                ctx.needs[1].then_some(ggamma),
                ctx.needs[2].then_some(gbeta),
            ]
        })
    }
}
