use super::{dims4, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from the loss.
pub const IGNORE_INDEX: u8 = 255;

impl Tensor {
    /// Mean pixel-wise cross-entropy of `[N×K×H×W]` logits against `N·H·W`
    /// labels (row-major per image). Pixels labelled `ignore_index` are
    /// skipped; if every pixel is ignored the loss is 0 with a zero gradient.
    pub fn cross_entropy(&self, target: &[u8], ignore_index: u8) -> Result<Tensor> {
        let (n, k, h, w) = dims4(self, "cross_entropy")?;
        let plane = h * w;
        if target.len() != n * plane {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for logits {:?}",
                target.len(),
                self.shape()
            )));
        }
        for (i, &t) in target.iter().enumerate() {
            if t != ignore_index && t as usize >= k {
                let (b, y, x) = (i / plane, (i % plane) / w, i % w);
                return Err(Error::Data(format!(
                    "label {t} at image {b}, pixel (y={y}, x={x}) is outside [0, {k})"
                )));
            }
        }

        let logits = self.data();
        // softmax per pixel, kept for the backward pass
        let mut probs = vec![0.0; logits.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        for b in 0..n {
            for p in 0..plane {
                let at = |c: usize| (b * k + c) * plane + p;
                let max = (0..k).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (logits[at(c)] - max).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (logits[at(c)] - max).exp() / z;
                }
                let t = target[b * plane + p];
                if t != ignore_index {
                    total += z.ln() + max - logits[at(t as usize)];
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let target = target.to_vec();
        Tensor::from_op("cross_entropy", vec![1], vec![loss], vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; probs.len()];
            if count == 0 {
                return vec![Some(g)];
            }
            let scale = ctx.grad[0] / count as f64;
            for b in 0..n {
                for p in 0..plane {
                    let t = target[b * plane + p];
                    if t == ignore_index {
                        continue;
                    }
                    for c in 0..k {
                        let i = (b * k + c) * plane + p;
                        let onehot = if c == t as usize { 1.0 } else { 0.0 };
                        g[i] = scale * (probs[i] - onehot);
                    }
                }
            }
            vec![Some(g)]
        })
    }
}
