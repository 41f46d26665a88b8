use super::{dims4, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Input column for output column `ox` and tap `kx`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < extent).then_some(p)
    }

    /// Calls `f(x_index, w_index, out_index)` for every multiply-add of the
    /// forward pass.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        for n in 0..self.n {
            for oc in 0..self.cout {
                let g = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let x_base = (n * self.cin + ic) * self.h * self.w;
                    let o_base = (n * self.cout + oc) * self.oh * self.ow;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wi = ((oc * cin_g + icg) * self.kh + ky) * self.kw + kx;
                            for oy in 0..self.oh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for ox in 0..self.ow {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    f(x_base + iy * self.w + ix, wi, o_base + oy * self.ow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Zero-padded cross-correlation of `[N×C_in×H×W]` with
    /// `[C_out×C_in/groups×kh×kw]`, plus an optional per-output-channel bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (n, cin, h, w) = dims4(self, "conv2d input")?;
        let (cout, cin_g, kh, kw) = dims4(weight, "conv2d weight")?;
        let Conv2dSpec { stride, padding, groups } = spec;
        if stride == 0 || groups == 0 {
            return Err(Error::Argument("conv2d: stride and groups must be positive".into()));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?}, weight {:?} and groups {groups} disagree",
                self.shape(),
                weight.shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {:?}",
                self.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    b.shape()
                )));
            }
        }
        let geom = Geom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
            stride,
            pad: padding,
            groups,
        };

        let (x, wt) = (self.data(), weight.data());
        let mut out = vec![0.0; n * cout * geom.oh * geom.ow];
        geom.for_each_tap(|xi, wi, oi| out[oi] += x[xi] * wt[wi]);
        let shape = vec![n, cout, geom.oh, geom.ow];

        let mut parents = vec![self.clone(), weight.clone()];
        let plane = geom.oh * geom.ow;
        if let Some(b) = bias {
            let bd = b.data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += bd[(i / plane) % cout];
            }
            parents.push(b.clone());
        }

        Tensor::from_op("conv2d", shape, out, parents, move |ctx| {
            let (x, wt) = (ctx.parents[0].data(), ctx.parents[1].data());
            let g = ctx.grad;
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![0.0; x.len()];
                geom.for_each_tap(|xi, wi, oi| gx[xi] += wt[wi] * g[oi]);
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![0.0; wt.len()];
                geom.for_each_tap(|xi, wi, oi| gw[wi] += x[xi] * g[oi]);
                gw
            });
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut gb = vec![0.0; geom.cout];
                    for (i, v) in g.iter().enumerate() {
                        gb[(i / plane) % geom.cout] += v;
                    }
                    gb
                }));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_with_padding_counts_neighbours() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let k = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = x.conv2d(&k, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let vals: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::new(&[1, 2, 5, 4], vals).unwrap();
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // out 0 <- in 0 centre
        k[27 + 4] = 1.0; // out 1 <- in 1 centre
        let k = Tensor::new(&[2, 2, 3, 3], k).unwrap();
        let y = x.conv2d(&k, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_scales_channels() {
        let x = Tensor::new(&[1, 3, 1, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let k = Tensor::new(&[3, 1, 1, 1], vec![2., -1., 0.5]).unwrap();
        let y = x.conv2d(&k, None, Conv2dSpec::default().with_groups(3)).unwrap();
        assert_eq!(y.data(), &[2., 4., -3., -4., 2.5, 3.]);
    }

    #[test]
    fn strided_output_extent_and_bias() {
        let x = Tensor::zeros(&[2, 3, 8, 8]).unwrap();
        let k = Tensor::zeros(&[5, 3, 4, 4]).unwrap();
        let b = Tensor::new(&[5], vec![1., 2., 3., 4., 5.]).unwrap();
        let spec = Conv2dSpec { stride: 4, padding: 0, groups: 1 };
        let y = x.conv2d(&k, Some(&b), spec).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);
        assert_eq!(y.data()[4 * 3], 4.0);
    }

    #[test]
    fn group_mismatch_rejected() {
        let x = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        let k = Tensor::zeros(&[2, 1, 1, 1]).unwrap();
        let err = x.conv2d(&k, None, Conv2dSpec::default().with_groups(2));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
