use super::{expect_ndim, Tensor};
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            row.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` with b stored as k×n.
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += gi.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += aᵀ · g` with a stored as m×k.
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(gi).for_each(|(o, gv)| *o += av * gv);
        }
    }
}

impl Tensor {
    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        expect_ndim(self, 2, "matmul")?;
        expect_ndim(other, 2, "matmul")?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ, {:?} · {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(), other.data(), &mut out, m, k, n);
        Tensor::from_op("matmul", vec![m, n], out, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            let ga = ctx.needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm_nt_acc(ctx.grad, b, &mut g, m, k, n);
                g
            });
            let gb = ctx.needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm_tn_acc(a, ctx.grad, &mut g, m, k, n);
                g
            });
            vec![ga, gb]
        })
    }

    /// Batched matrix product of `[B×m×k]` and `[B×k×n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        expect_ndim(self, 3, "bmm")?;
        expect_ndim(other, 3, "bmm")?;
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if bs != bs2 || k != k2 {
            return Err(Error::Dimension(format!(
                "bmm: incompatible shapes {:?} · {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; bs * m * n];
        for b in 0..bs {
            gemm_acc(
                &self.data()[b * m * k..(b + 1) * m * k],
                &other.data()[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor::from_op("bmm", vec![bs, m, n], out, vec![self.clone(), other.clone()], move |ctx| {
            let (a, bm) = (ctx.parents[0].data(), ctx.parents[1].data());
            let ga = ctx.needs[0].then(|| {
                let mut g = vec![0.0; bs * m * k];
                for b in 0..bs {
                    gemm_nt_acc(
                        &ctx.grad[b * m * n..(b + 1) * m * n],
                        &bm[b * k * n..(b + 1) * k * n],
                        &mut g[b * m * k..(b + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                g
            });
            let gb = ctx.needs[1].then(|| {
                let mut g = vec![0.0; bs * k * n];
                for b in 0..bs {
                    gemm_tn_acc(
                        &a[b * m * k..(b + 1) * m * k],
                        &ctx.grad[b * m * n..(b + 1) * m * n],
                        &mut g[b * k * n..(b + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                g
            });
            vec![ga, gb]
        })
    }
}
