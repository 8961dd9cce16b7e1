use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{GradBuf, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{exp, ln, sigmoid, tanh};
use crate::tensor::Shape;

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const LEAKY_SLOPE: f32 = 0.2;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::LEAKY_SLOPE)
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => tanh(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

impl<'a> Tape<'a> {
    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).clone();
        self.push(shape, value, Op::Activation { x, kind }, &[x])
    }

    /// Mean cross-entropy of `logits[N x K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.rank() != 2 || s[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", format!("logits {s}, {} labels", labels.len())));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of {classes} classes")));
        }
        let probs = softmax_rows(self.value(logits), classes);
        let n = labels.len();
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(ln(probs[i * classes + l].max(1e-30)) as f64))
            .sum::<f64>()
            / n as f64;
        let op = Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec(), classes };
        Ok(self.push(Shape::scalar(), vec![loss as f32], op, &[logits]))
    }
}

/// Row-wise max-shifted softmax.
pub(crate) fn softmax_rows(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f32;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = exp(v - m);
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub(super) fn activation_backward(t: &Tape<'_>, id: usize, x: Var, kind: Activation, g: &[f32], buf: &mut GradBuf) {
    let xv = t.value(x);
    let yv = t.value(Var(id));
    if let Some(dx) = buf.slot(t, x) {
        for i in 0..dx.len() {
            let d = match kind {
                Activation::Relu => {
                    if xv[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::LeakyRelu(a) => {
                    if xv[i] > 0.0 {
                        1.0
                    } else {
                        a
                    }
                }
                Activation::Tanh => 1.0 - yv[i] * yv[i],
                Activation::Sigmoid => yv[i] * (1.0 - yv[i]),
            };
            dx[i] += d * g[i];
        }
    }
}

pub(super) fn softmax_ce_backward(
    t: &Tape<'_>,
    logits: Var,
    probs: &[f32],
    labels: &[usize],
    classes: usize,
    g: &[f32],
    buf: &mut GradBuf,
) {
    let scale = g[0] / labels.len() as f32;
    if let Some(d) = buf.slot(t, logits) {
        for (i, &l) in labels.iter().enumerate() {
            for k in 0..classes {
                let target = if k == l { 1.0 } else { 0.0 };
                d[i * classes + k] += scale * (probs[i * classes + k] - target);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, check_gradients_on, rand_away_from_zero};
    use super::*;
    use crate::tensor::Tensor;

    fn act(kind: Activation, x: f32) -> (f32, f32) {
        let xt = Tensor::new([1], vec![x]).unwrap().with_grad();
        let mut t = Tape::new();
        let v = t.param(&xt);
        let y = t.activate(v, kind);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        (t.scalar(y), g.get(v).unwrap()[0])
    }

    #[test]
    fn activation_examples() {
        assert!((act(Activation::LeakyRelu(0.2), -1.0).0 + 0.2).abs() < 1e-7);
        assert_eq!(act(Activation::Tanh, 0.0), (0.0, 1.0));
        assert_eq!(act(Activation::Relu, -3.0).0, 0.0);
        assert_eq!(act(Activation::Sigmoid, 0.0).0, 0.5);
        assert_eq!(Activation::leaky(), Activation::LeakyRelu(0.2));
    }

    #[test]
    fn activation_gradients() {
        for kind in [Activation::Relu, Activation::leaky(), Activation::Tanh, Activation::Sigmoid] {
            let x = rand_away_from_zero([3, 5], 41);
            check_gradients_on(&[x], move |t, v| Ok(t.activate(v[0], kind)));
        }
    }

    #[test]
    fn elementwise_gradients() {
        check_gradients(&[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]));
        check_gradients(&[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
        check_gradients(&[&[4]], |t, v| Ok(t.affine(v[0], -2.0, 1.0)));
        check_gradients(&[&[6]], |t, v| Ok(t.mean(v[0])));
        check_gradients(&[&[2, 6]], |t, v| t.reshape(v[0], [3, 4]));
        let x = Tensor::from_fn([5], |i| 0.2 + 0.15 * i as f32);
        check_gradients_on(&[x], |t, v| Ok(t.log_clamped(v[0], 1e-7)));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = Tensor::new([2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let mut t = Tape::new();
        let v = t.param(&logits);
        let l = t.softmax_cross_entropy(v, &[1, 2]).unwrap();
        let row = |r: &[f32], k: usize| {
            let z: f32 = r.iter().map(|&x| exp(x)).sum();
            -ln(exp(r[k]) / z)
        };
        let want = (row(&[1.0, 2.0, 0.5], 1) + row(&[-1.0, 0.0, 3.0], 2)) / 2.0;
        assert!((t.scalar(l) - want).abs() < 1e-6);
        assert!(t.softmax_cross_entropy(v, &[0, 3]).is_err());
        check_gradients(&[&[4, 3]], |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 1]));
    }
}
