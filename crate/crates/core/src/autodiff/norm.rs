use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{GradBuf, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::math::sqrt;

/// Statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'r> {
    /// Normalize by the batch's own per-channel mean and (biased) variance.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'r [f32], var: &'r [f32] },
}

/// Per-channel batch statistics observed in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl<'a> Tape<'a> {
    /// Batch normalization over axis 1 of `x[N x C x ...]`; all remaining
    /// axes are pooled with the batch axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).clone();
        if sx.rank() < 2 {
            return Err(Error::dim("batch_norm", format!("input {sx} has no channel axis")));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let plane: usize = sx[2..].iter().product();
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::dim(
                "batch_norm",
                format!("{channels} channels, gamma {}, beta {}", self.shape(gamma), self.shape(beta)),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Usage(format!("batch_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let count = (batch * plane) as f64;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f32; channels];
                let mut var = vec![0.0f32; channels];
                for c in 0..channels {
                    let mut s = 0.0f64;
                    for n in 0..batch {
                        s += xv[(n * channels + c) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0f64;
                    for n in 0..batch {
                        q += xv[(n * channels + c) * plane..][..plane]
                            .iter()
                            .map(|&v| (v as f64 - m) * (v as f64 - m))
                            .sum::<f64>();
                    }
                    mean[c] = m as f32;
                    var[c] = (q / count) as f32;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::dim("batch_norm", format!("running stats for {} channels", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / sqrt(v + eps)).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, channels, plane };
        Ok((self.push(sx, out, op, &[x, gamma, beta]), stats))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward(
    t: &Tape<'_>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f32],
    inv_std: &[f32],
    train: bool,
    channels: usize,
    plane: usize,
    g: &[f32],
    buf: &mut GradBuf,
) {
    let batch = g.len() / (channels * plane);
    let mut sum_g = vec![0.0f64; channels];
    let mut sum_gx = vec![0.0f64; channels];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * plane;
            for i in base..base + plane {
                sum_g[c] += g[i] as f64;
                sum_gx[c] += (g[i] * xhat[i]) as f64;
            }
        }
    }
    if let Some(db) = buf.slot(t, beta) {
        db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += *s as f32);
    }
    if let Some(dg) = buf.slot(t, gamma) {
        dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += *s as f32);
    }
    let gv = t.value(gamma).to_vec();
    if let Some(dx) = buf.slot(t, x) {
        let m = (batch * plane) as f32;
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let scale = gv[c] * inv_std[c];
                if train {
                    let (mg, mgx) = ((sum_g[c] as f32) / m, (sum_gx[c] as f32) / m);
                    for i in base..base + plane {
                        dx[i] += scale * (g[i] - mg - xhat[i] * mgx);
                    }
                } else {
                    for i in base..base + plane {
                        dx[i] += scale * g[i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, rand_tensor};
    use super::*;
    use crate::tensor::Tensor;

    fn bn(x: &Tensor, gamma: f32, beta: f32) -> Vec<f32> {
        let c = x.shape()[1];
        let g = Tensor::full([c], gamma);
        let b = Tensor::full([c], beta);
        let mut t = Tape::new();
        let (xv, gv, bv) = (t.param(x), t.param(&g), t.param(&b));
        let (y, _) = t.batch_norm(xv, gv, bv, 1e-5, BatchNormMode::Train).unwrap();
        t.value(y).to_vec()
    }

    #[test]
    fn constant_batch_normalizes_to_zero() {
        let x = Tensor::full([4, 2, 3, 3], 7.5);
        assert!(bn(&x, 1.0, 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_batch_is_unchanged() {
        // Standardize a random batch per channel with a direct oracle first.
        let mut x = rand_tensor([8, 3, 2, 2], 31);
        let (n, c, plane) = (8, 3, 4);
        for ch in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|b| (0..plane).map(move |p| (b * c + ch) * plane + p)).collect();
            let m: f64 = idx.iter().map(|&i| x.data()[i] as f64).sum::<f64>() / idx.len() as f64;
            let v: f64 = idx.iter().map(|&i| (x.data()[i] as f64 - m).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                x.data_mut()[i] = ((x.data()[i] as f64 - m) / v.sqrt()) as f32;
            }
        }
        for (a, b) in bn(&x, 1.0, 0.0).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = rand_tensor([3, 2, 2, 2], 32);
        assert!(bn(&x, 0.0, 5.0).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::new([2, 1], alloc::vec![1.0, 3.0]).unwrap();
        let g = Tensor::full([1], 2.0);
        let b = Tensor::full([1], 1.0);
        let mut t = Tape::new();
        let (xv, gv, bv) = (t.param(&x), t.param(&g), t.param(&b));
        let (y, stats) = t
            .batch_norm(xv, gv, bv, 1e-5, BatchNormMode::Eval { mean: &[1.0], var: &[4.0 - 1e-5] })
            .unwrap();
        assert!(stats.is_none());
        for (a, b) in t.value(y).iter().zip([1.0, 3.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(t.batch_norm(xv, gv, bv, 0.0, BatchNormMode::Train).is_err());
    }

    #[test]
    fn batch_norm_gradients() {
        check_gradients(&[&[4, 3, 2, 2], &[3], &[3]], |t, v| {
            t.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train).map(|r| r.0)
        });
        check_gradients(&[&[5, 4], &[4], &[4]], |t, v| {
            t.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train).map(|r| r.0)
        });
        let mean = [0.1f32, -0.2, 0.3];
        let var = [0.5f32, 1.5, 2.0];
        check_gradients(&[&[2, 3, 2], &[3], &[3]], move |t, v| {
            t.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Eval { mean: &mean, var: &var }).map(|r| r.0)
        });
    }
}
