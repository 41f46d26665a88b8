//! Elementwise maps, reductions and index shuffling.

use super::{numel, ParentGrads, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize, op: &str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Argument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op("add", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |ctx| {
            ctx.needs.iter().map(|&n| n.then(|| ctx.grad.to_vec())).collect()
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op("sub", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
            ]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op("mul", self.shape().to_vec(), data, vec![self.clone(), other.clone()], |ctx| {
            let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(g, v)| g * v).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(g, v)| g * v).collect()),
            ]
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| g * factor).collect())]
        })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.parents[0].numel()])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| gelu_parts(x).0).collect();
        Tensor::from_op("gelu", self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            vec![Some(
                ctx.grad.iter().zip(x).map(|(g, &v)| g * gelu_parts(v).1).collect(),
            )]
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            let x = ctx.parents[0].data();
            vec![Some(
                ctx.grad.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
            )]
        })
    }

    /// Adds `bias` (length = extent of `axis`) along `axis`. The only
    /// broadcasting operation in the engine.
    pub fn add_bias(&self, bias: &Tensor, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "add_bias")?;
        if bias.shape() != [len] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match axis {axis} of {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for (c, bc) in b.iter().enumerate() {
                let base = (o * len + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bc);
            }
        }
        Tensor::from_op("add_bias", self.shape().to_vec(), data, vec![self.clone(), bias.clone()], move |ctx| {
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![0.0; len];
                for o in 0..outer {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let base = (o * len + c) * inner;
                        *acc += ctx.grad[base..base + inner].iter().sum::<f64>();
                    }
                }
                gb
            });
            vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
        })
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape()
            )));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.data().to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// `out[i] = self[index[i]]`. Indices may repeat; the backward pass
    /// scatter-adds. Every layout change in the network (window partition,
    /// spatial shuffle, transposes, patch merging) is expressed through this.
    pub fn gather(&self, index: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != index.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        let src = self.data();
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Argument(format!(
                "gather: index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        Tensor::from_op("gather", shape.to_vec(), data, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; ctx.parents[0].numel()];
            for (&i, &go) in index.iter().zip(ctx.grad) {
                g[i] += go;
            }
            vec![Some(g)]
        })
    }

    /// Reorders axes; `order[k]` names the source axis placed at position k.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if order.len() != nd || order.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Argument(format!(
                "permute: {order:?} is not a permutation of {nd} axes"
            )));
        }
        let mut src_strides = vec![1; nd];
        for k in (0..nd.saturating_sub(1)).rev() {
            src_strides[k] = src_strides[k + 1] * shape[k + 1];
        }
        let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = order.iter().map(|&a| src_strides[a]).collect();
        let mut index = Vec::with_capacity(self.numel());
        let mut counter = vec![0usize; nd];
        for _ in 0..self.numel() {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for k in (0..nd).rev() {
                counter[k] += 1;
                if counter[k] < out_shape[k] {
                    break;
                }
                counter[k] = 0;
            }
        }
        self.gather(index, &out_shape)
    }

    /// Mirrors the last axis.
    pub fn flip_last(&self) -> Result<Tensor> {
        let w = *self.shape().last().expect("tensors have at least one axis");
        let index = (0..self.numel()).map(|i| i - i % w + (w - 1 - i % w)).collect();
        self.gather(index, self.shape())
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let nd = first.ndim();
        split_axis(first.shape(), axis, "concat")?;
        for p in parts {
            let ok = p.ndim() == nd
                && p.shape().iter().zip(first.shape()).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;

        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Tensor::from_op("concat", shape, data, parts.to_vec(), move |ctx| {
            let mut grads: ParentGrads = ctx
                .needs
                .iter()
                .zip(&lens)
                .map(|(&n, &len)| n.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, &len) in grads.iter_mut().zip(&lens) {
                    let chunk = &ctx.grad[pos..pos + len * inner];
                    if let Some(g) = g {
                        g.extend_from_slice(chunk);
                    }
                    pos += len * inner;
                }
            }
            grads
        })
    }

    /// Index of the largest value along `axis` for each remaining position
    /// (first maximum wins on ties).
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "argmax")?;
        let x = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = x[o * len * inner + i];
                for k in 1..len {
                    let v = x[(o * len + k) * inner + i];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let x = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0., 3., 1., 4., 2., 5.]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_and_split_grads() {
        let a = Tensor::param(&[2, 1], vec![1., 2.]).unwrap();
        let b = Tensor::param(&[2, 2], vec![3., 4., 5., 6.]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let w = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        c.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1., 4.]);
        assert_eq!(b.grad().unwrap(), vec![2., 3., 5., 6.]);
    }

    #[test]
    fn bias_along_channel_axis() {
        let x = Tensor::param(&[1, 2, 2], vec![0.; 4]).unwrap();
        let b = Tensor::param(&[2], vec![1., -1.]).unwrap();
        let y = x.add_bias(&b, 1).unwrap();
        assert_eq!(y.data(), &[1., 1., -1., -1.]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2., 2.]);
        assert!(x.add_bias(&b, 2).is_ok());
        assert!(x.add_bias(&Tensor::zeros(&[3]).unwrap(), 1).is_err());
    }

    #[test]
    fn gather_scatters_repeats() {
        let x = Tensor::param(&[2], vec![1., 2.]).unwrap();
        let y = x.gather(vec![0, 0, 1], &[3]).unwrap();
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2., 1.]);
    }

    #[test]
    fn flip_mirrors_rows() {
        let x = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(x.flip_last().unwrap().data(), &[2., 1., 0., 5., 4., 3.]);
    }

    #[test]
    fn argmax_first_wins() {
        let x = Tensor::new(&[1, 3, 2], vec![0., 5., 2., 5., 2., 1.]).unwrap();
        assert_eq!(x.argmax(1).unwrap(), vec![1, 0]);
    }
}
