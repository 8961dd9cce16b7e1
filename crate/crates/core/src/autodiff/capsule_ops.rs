//! Tape primitives behind capsule layers and dynamic routing.

use alloc::format;
use alloc::vec;

use super::{GradBuf, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::tensor::Shape;

/// Added to the norm in the squash direction factor so `s = 0` maps to 0.
pub const SQUASH_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PredictDims {
    pub batch: usize,
    pub in_caps: usize,
    pub out_caps: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Squash factor `|s|^2 / ((1 + |s|^2)(|s| + eps))` and its derivative
/// divided by `|s|`, both as functions of the squared norm.
#[inline]
fn squash_factor(n2: f32) -> (f32, f32) {
    let n = sqrt(n2);
    let a = 1.0 + n2;
    let b = n + SQUASH_EPS;
    let ab = a * b;
    let f = n2 / ab;
    // (df/dn) / n = (2ab - n(2nb + a)) / (ab)^2
    let df_over_n = (2.0 * ab - n * (2.0 * n * b + a)) / (ab * ab);
    (f, df_over_n)
}

impl<'a> Tape<'a> {
    /// Capsule squash over the last axis.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).clone();
        let dim = *s.last().ok_or_else(|| Error::dim("squash", "rank-0 input"))?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (v, o) in xv.chunks(dim).zip(out.chunks_mut(dim)) {
            let n2: f32 = v.iter().map(|a| a * a).sum();
            let (f, _) = squash_factor(n2);
            o.iter_mut().zip(v).for_each(|(o, a)| *o = f * a);
        }
        Ok(self.push(s, out, Op::Squash { x, dim }, &[x]))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).clone();
        let dim = *s.last().ok_or_else(|| Error::dim("softmax_last", "rank-0 input"))?;
        let out = super::elementwise::softmax_rows(self.value(x), dim);
        Ok(self.push(s, out, Op::SoftmaxLast { x, dim }, &[x]))
    }

    /// Prediction vectors `uhat[b,i,j,:] = u[b,i,:] . W[i,j,:,:]` for
    /// `u[B x I x Din]` and `W[I x J x Din x Dout]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u), self.shape(w));
        if su.rank() != 3 || sw.rank() != 4 || su[1] != sw[0] || su[2] != sw[2] {
            return Err(Error::dim("capsule_predict", format!("capsules {su}, weights {sw}")));
        }
        let d = PredictDims { batch: su[0], in_caps: su[1], out_caps: sw[1], in_dim: su[2], out_dim: sw[3] };
        let (uv, wv) = (self.value(u), self.value(w));
        let mut out = vec![0.0f32; d.batch * d.in_caps * d.out_caps * d.out_dim];
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                let urow = &uv[(b * d.in_caps + i) * d.in_dim..][..d.in_dim];
                for j in 0..d.out_caps {
                    let o = &mut out[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    let wij = &wv[(i * d.out_caps + j) * d.in_dim * d.out_dim..][..d.in_dim * d.out_dim];
                    for (k, &uk) in urow.iter().enumerate() {
                        let wr = &wij[k * d.out_dim..(k + 1) * d.out_dim];
                        o.iter_mut().zip(wr).for_each(|(a, w)| *a += uk * w);
                    }
                }
            }
        }
        let shape = Shape::new([d.batch, d.in_caps, d.out_caps, d.out_dim]);
        Ok(self.push(shape, out, Op::CapsulePredict { u, w, dims: d }, &[u, w]))
    }

    /// `s[b,j,:] = sum_i c[b,i,j] * uhat[b,i,j,:]`.
    pub fn routing_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let d = self.routing_dims("routing_sum", c, uhat)?;
        let (cv, uv) = (self.value(c), self.value(uhat));
        let mut out = vec![0.0f32; d.batch * d.out_caps * d.out_dim];
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                for j in 0..d.out_caps {
                    let cij = cv[(b * d.in_caps + i) * d.out_caps + j];
                    let u = &uv[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    let s = &mut out[(b * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    s.iter_mut().zip(u).for_each(|(s, u)| *s += cij * u);
                }
            }
        }
        let shape = Shape::new([d.batch, d.out_caps, d.out_dim]);
        Ok(self.push(shape, out, Op::RoutingSum { c, uhat, dims: d }, &[c, uhat]))
    }

    /// Agreement `a[b,i,j] = uhat[b,i,j,:] . v[b,j,:]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let su = self.shape(uhat).clone();
        let sv = self.shape(v);
        if su.rank() != 4 || sv.rank() != 3 || sv[0] != su[0] || sv[1] != su[2] || sv[2] != su[3] {
            return Err(Error::dim("agreement", format!("predictions {su}, outputs {sv}")));
        }
        let d = PredictDims { batch: su[0], in_caps: su[1], out_caps: su[2], in_dim: 0, out_dim: su[3] };
        let (uv, vv) = (self.value(uhat), self.value(v));
        let mut out = vec![0.0f32; d.batch * d.in_caps * d.out_caps];
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                for j in 0..d.out_caps {
                    let u = &uv[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    let vj = &vv[(b * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    out[(b * d.in_caps + i) * d.out_caps + j] = u.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
            }
        }
        let shape = Shape::new([d.batch, d.in_caps, d.out_caps]);
        Ok(self.push(shape, out, Op::Agreement { uhat, v, dims: d }, &[uhat, v]))
    }

    fn routing_dims(&self, op: &'static str, c: Var, uhat: Var) -> Result<PredictDims> {
        let (sc, su) = (self.shape(c), self.shape(uhat));
        if sc.rank() != 3 || su.rank() != 4 || sc[..] != su[..3] {
            return Err(Error::dim(op, format!("coefficients {sc}, predictions {su}")));
        }
        Ok(PredictDims { batch: su[0], in_caps: su[1], out_caps: su[2], in_dim: 0, out_dim: su[3] })
    }
}

pub(super) fn squash_backward(t: &Tape<'_>, _id: usize, x: Var, dim: usize, g: &[f32], buf: &mut GradBuf) {
    let xv = t.value(x);
    if let Some(dx) = buf.slot(t, x) {
        for ((s, gr), d) in xv.chunks(dim).zip(g.chunks(dim)).zip(dx.chunks_mut(dim)) {
            let n2: f32 = s.iter().map(|a| a * a).sum();
            let (f, df_over_n) = squash_factor(n2);
            let sg: f32 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                d[k] += f * gr[k] + df_over_n * sg * s[k];
            }
        }
    }
}

pub(super) fn softmax_backward(t: &Tape<'_>, id: usize, x: Var, dim: usize, g: &[f32], buf: &mut GradBuf) {
    let yv = t.value(Var(id));
    if let Some(dx) = buf.slot(t, x) {
        for ((y, gr), d) in yv.chunks(dim).zip(g.chunks(dim)).zip(dx.chunks_mut(dim)) {
            let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                d[k] += y[k] * (gr[k] - dot);
            }
        }
    }
}

pub(super) fn predict_backward(t: &Tape<'_>, u: Var, w: Var, d: &PredictDims, g: &[f32], buf: &mut GradBuf) {
    let (uv, wv) = (t.value(u), t.value(w));
    if let Some(du) = buf.slot(t, u) {
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                let durow = &mut du[(b * d.in_caps + i) * d.in_dim..][..d.in_dim];
                for j in 0..d.out_caps {
                    let gr = &g[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    let wij = &wv[(i * d.out_caps + j) * d.in_dim * d.out_dim..][..d.in_dim * d.out_dim];
                    for (k, du_k) in durow.iter_mut().enumerate() {
                        let wr = &wij[k * d.out_dim..(k + 1) * d.out_dim];
                        *du_k += wr.iter().zip(gr).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
            }
        }
    }
    if let Some(dw) = buf.slot(t, w) {
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                let urow = &uv[(b * d.in_caps + i) * d.in_dim..][..d.in_dim];
                for j in 0..d.out_caps {
                    let gr = &g[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    let dwij = &mut dw[(i * d.out_caps + j) * d.in_dim * d.out_dim..][..d.in_dim * d.out_dim];
                    for (k, &uk) in urow.iter().enumerate() {
                        dwij[k * d.out_dim..(k + 1) * d.out_dim]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, g)| *a += uk * g);
                    }
                }
            }
        }
    }
}

pub(super) fn routing_sum_backward(t: &Tape<'_>, c: Var, uhat: Var, d: &PredictDims, g: &[f32], buf: &mut GradBuf) {
    let (cv, uv) = (t.value(c), t.value(uhat));
    if let Some(dc) = buf.slot(t, c) {
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                for j in 0..d.out_caps {
                    let u = &uv[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    let gs = &g[(b * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    dc[(b * d.in_caps + i) * d.out_caps + j] += u.iter().zip(gs).map(|(a, b)| a * b).sum::<f32>();
                }
            }
        }
    }
    if let Some(du) = buf.slot(t, uhat) {
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                for j in 0..d.out_caps {
                    let cij = cv[(b * d.in_caps + i) * d.out_caps + j];
                    let gs = &g[(b * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    du[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim]
                        .iter_mut()
                        .zip(gs)
                        .for_each(|(a, g)| *a += cij * g);
                }
            }
        }
    }
}

pub(super) fn agreement_backward(t: &Tape<'_>, uhat: Var, v: Var, d: &PredictDims, g: &[f32], buf: &mut GradBuf) {
    let (uv, vv) = (t.value(uhat), t.value(v));
    if let Some(du) = buf.slot(t, uhat) {
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                for j in 0..d.out_caps {
                    let ga = g[(b * d.in_caps + i) * d.out_caps + j];
                    let vj = &vv[(b * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    du[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim]
                        .iter_mut()
                        .zip(vj)
                        .for_each(|(a, v)| *a += ga * v);
                }
            }
        }
    }
    if let Some(dv) = buf.slot(t, v) {
        for b in 0..d.batch {
            for i in 0..d.in_caps {
                for j in 0..d.out_caps {
                    let ga = g[(b * d.in_caps + i) * d.out_caps + j];
                    let u = &uv[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim..][..d.out_dim];
                    dv[(b * d.out_caps + j) * d.out_dim..][..d.out_dim]
                        .iter_mut()
                        .zip(u)
                        .for_each(|(a, u)| *a += ga * u);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, check_gradients_on, rand_tensor};
    use crate::tensor::Tensor;

    #[test]
    fn capsule_op_gradients() {
        check_gradients(&[&[2, 3, 4]], |t, v| t.squash(v[0]));
        // squash at large and tiny norms, where the derivative is most delicate
        let x = Tensor::from_fn([2, 4], |i| if i < 4 { 3.0 + i as f32 } else { 1e-3 * i as f32 });
        check_gradients_on(&[x], |t, v| t.squash(v[0]));
        check_gradients(&[&[2, 3, 5]], |t, v| t.softmax_last(v[0]));
        check_gradients(&[&[2, 3, 4], &[3, 2, 4, 5]], |t, v| t.capsule_predict(v[0], v[1]));
        check_gradients(&[&[2, 3, 2], &[2, 3, 2, 4]], |t, v| t.routing_sum(v[0], v[1]));
        check_gradients(&[&[2, 3, 2, 4], &[2, 2, 4]], |t, v| t.agreement(v[0], v[1]));
    }

    #[test]
    fn shape_errors() {
        let u = rand_tensor([1, 3, 4], 1);
        let w = rand_tensor([3, 2, 5, 2], 2);
        let mut t = crate::Tape::new();
        let (uv, wv) = (t.param(&u), t.param(&w));
        assert!(t.capsule_predict(uv, wv).is_err());
    }
}
