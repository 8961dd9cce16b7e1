use alloc::format;
use alloc::vec;

use super::{GradBuf, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gemm, Mat};
use crate::tensor::Shape;

impl<'a> Tape<'a> {
    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa} x {sb}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(1.0, Mat::row_major(self.value(a), m, k), Mat::row_major(self.value(b), k, n), 0.0, &mut out);
        Ok(self.push(Shape::new([m, n]), out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Adds `bias[q]` to every row of `x[N x q]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.rank() != 2 || sb.numel() != sx[1] {
            return Err(Error::dim("add_row_bias", format!("{sx} + {sb}")));
        }
        let q = sx[1];
        let bv = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + bv[i % q]).collect();
        let shape = sx.clone();
        Ok(self.push(shape, out, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    /// Affine layer `x * w + b`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.rank() != 2 || sw.rank() != 2 || sx[1] != sw[0] || sb.numel() != sw[1] {
            return Err(Error::dim("dense", format!("{sx} x {sw} + {sb}")));
        }
        let y = self.matmul(x, weight)?;
        self.add_row_bias(y, bias)
    }

    /// Adds `bias[C]` to every channel plane of `x[N x C x ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.rank() < 2 || sb.numel() != sx[1] {
            return Err(Error::dim("add_channel_bias", format!("{sx} + {sb}")));
        }
        let channels = sx[1];
        let plane: usize = sx[2..].iter().product();
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / plane) % channels])
            .collect();
        let shape = sx.clone();
        Ok(self.push(shape, out, Op::AddChannelBias { x, bias, channels, plane }, &[x, bias]))
    }

    /// Per-sample outer product `a[B x P]`, `b[B x Q]` -> `[B x P x Q]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("outer", format!("{sa} (x) {sb}")));
        }
        let (batch, p, q) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * p * q];
        for n in 0..batch {
            for i in 0..p {
                let s = av[n * p + i];
                let row = &mut out[(n * p + i) * q..(n * p + i + 1) * q];
                row.iter_mut().zip(&bv[n * q..(n + 1) * q]).for_each(|(o, z)| *o = s * z);
            }
        }
        Ok(self.push(Shape::new([batch, p, q]), out, Op::Outer { a, b, batch, p, q }, &[a, b]))
    }

    /// Contracts the channel axis of `x[B x C x L]` with weights `w[C]`, giving `[B x L]`.
    pub fn channel_contract(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.rank() != 3 || sw.numel() != sx[1] {
            return Err(Error::dim("channel_contract", format!("{sx} . {sw}")));
        }
        let (batch, channels, len) = (sx[0], sx[1], sx[2]);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; batch * len];
        for n in 0..batch {
            let o = &mut out[n * len..(n + 1) * len];
            for c in 0..channels {
                let row = &xv[(n * channels + c) * len..(n * channels + c + 1) * len];
                o.iter_mut().zip(row).for_each(|(a, r)| *a += wv[c] * r);
            }
        }
        Ok(self.push(
            Shape::new([batch, len]),
            out,
            Op::ChannelContract { x, w, batch, channels, len },
            &[x, w],
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn matmul_backward(t: &Tape<'_>, a: Var, b: Var, m: usize, k: usize, n: usize, g: &[f32], buf: &mut GradBuf) {
    let (av, bv) = (t.value(a), t.value(b));
    if let Some(da) = buf.slot(t, a) {
        // dA = dC * B^T
        gemm(1.0, Mat::row_major(g, m, n), Mat::transposed(bv, k, n), 1.0, da);
    }
    if let Some(db) = buf.slot(t, b) {
        // dB = A^T * dC
        gemm(1.0, Mat::transposed(av, m, k), Mat::row_major(g, m, n), 1.0, db);
    }
}

pub(super) fn add_row_bias_backward(t: &Tape<'_>, x: Var, bias: Var, g: &[f32], buf: &mut GradBuf) {
    buf.add(t, x, g);
    if let Some(db) = buf.slot(t, bias) {
        let q = db.len();
        for (i, v) in g.iter().enumerate() {
            db[i % q] += v;
        }
    }
}

pub(super) fn add_channel_bias_backward(
    t: &Tape<'_>,
    x: Var,
    bias: Var,
    channels: usize,
    plane: usize,
    g: &[f32],
    buf: &mut GradBuf,
) {
    buf.add(t, x, g);
    if let Some(db) = buf.slot(t, bias) {
        for (i, chunk) in g.chunks(plane).enumerate() {
            db[i % channels] += chunk.iter().sum::<f32>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn outer_backward(t: &Tape<'_>, a: Var, b: Var, batch: usize, p: usize, q: usize, g: &[f32], buf: &mut GradBuf) {
    let (av, bv) = (t.value(a), t.value(b));
    if let Some(da) = buf.slot(t, a) {
        for n in 0..batch {
            for i in 0..p {
                let row = &g[(n * p + i) * q..(n * p + i + 1) * q];
                da[n * p + i] += row.iter().zip(&bv[n * q..(n + 1) * q]).map(|(x, y)| x * y).sum::<f32>();
            }
        }
    }
    if let Some(db) = buf.slot(t, b) {
        for n in 0..batch {
            for i in 0..p {
                let s = av[n * p + i];
                let row = &g[(n * p + i) * q..(n * p + i + 1) * q];
                db[n * q..(n + 1) * q].iter_mut().zip(row).for_each(|(d, r)| *d += s * r);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn channel_contract_backward(
    t: &Tape<'_>,
    x: Var,
    w: Var,
    batch: usize,
    channels: usize,
    len: usize,
    g: &[f32],
    buf: &mut GradBuf,
) {
    let (xv, wv) = (t.value(x), t.value(w));
    if let Some(dx) = buf.slot(t, x) {
        for n in 0..batch {
            let gr = &g[n * len..(n + 1) * len];
            for c in 0..channels {
                dx[(n * channels + c) * len..(n * channels + c + 1) * len]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(d, v)| *d += wv[c] * v);
            }
        }
    }
    if let Some(dw) = buf.slot(t, w) {
        for n in 0..batch {
            let gr = &g[n * len..(n + 1) * len];
            for c in 0..channels {
                let row = &xv[(n * channels + c) * len..(n * channels + c + 1) * len];
                dw[c] += row.iter().zip(gr).map(|(a, b)| a * b).sum::<f32>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, rand_tensor};
    use crate::tensor::Tensor;
    use crate::Tape;

    fn triple_loop(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f32> {
        let mut c = alloc::vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let a = rand_tensor([3, 3], 1);
        let mut t = Tape::new();
        let (iv, av) = (t.param(&id), t.param(&a));
        let c = t.matmul(iv, av).unwrap();
        assert_eq!(t.value(c), a.data());

        let x = Tensor::new([2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor::new([2, 1], alloc::vec![1.0, 1.0]).unwrap();
        let (xv, yv) = (t.param(&x), t.param(&y));
        let c = t.matmul(xv, yv).unwrap();
        assert_eq!(t.value(c), &[3.0, 7.0]);

        let a = rand_tensor([5, 4], 2);
        let b = rand_tensor([4, 3], 3);
        let (av, bv) = (t.param(&a), t.param(&b));
        let c = t.matmul(av, bv).unwrap();
        let want = triple_loop(a.data(), b.data(), 5, 4, 3);
        for (x, y) in t.value(c).iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(t.matmul(av, av).is_err());
    }

    #[test]
    fn dense_examples() {
        let x = rand_tensor([2, 3], 4);
        let id = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let zero = Tensor::zeros([3]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.param(&x), t.param(&id), t.param(&zero));
        let y = t.dense(xv, wv, bv).unwrap();
        assert_eq!(t.value(y), x.data());

        let z = Tensor::zeros([1, 100]);
        let w = Tensor::zeros([100, 6272]);
        let b = Tensor::zeros([6272]);
        let (zv, wv, bv) = (t.param(&z), t.param(&w), t.param(&b));
        let y = t.dense(zv, wv, bv).unwrap();
        assert_eq!(t.shape(y).dims(), &[1, 6272]);

        let w = rand_tensor([3, 2], 5);
        let b = rand_tensor([2], 6);
        let (wv, bv) = (t.param(&w), t.param(&b));
        let y = t.dense(xv, wv, bv).unwrap();
        let mm = triple_loop(x.data(), w.data(), 2, 3, 2);
        for (i, v) in t.value(y).iter().enumerate() {
            assert!((v - (mm[i] + b.data()[i % 2])).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_gradients() {
        check_gradients(&[&[3, 4], &[4, 2], &[2]], |t, v| t.dense(v[0], v[1], v[2]));
        check_gradients(&[&[2, 3, 2, 2], &[3]], |t, v| t.add_channel_bias(v[0], v[1]));
        check_gradients(&[&[2, 3], &[2, 4]], |t, v| t.outer(v[0], v[1]));
        check_gradients(&[&[2, 3, 4], &[3]], |t, v| t.channel_contract(v[0], v[1]));
    }
}
