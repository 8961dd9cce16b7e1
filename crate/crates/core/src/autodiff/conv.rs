use alloc::format;
use alloc::vec;

use super::{GradBuf, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{col2im, gather_planes, gemm, im2col, scatter_planes_add, ConvGeom, Mat};
use crate::tensor::Shape;

impl<'a> Tape<'a> {
    /// Cross-correlation of `x[N x C x H x W]` with `kernel[F x C x k x k]`
    /// under explicit zero padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.rank() != 4 || sk.rank() != 4 || sk[1] != sx[1] || sk[2] != sk[3] {
            return Err(Error::dim("conv2d", format!("input {sx}, kernels {sk}")));
        }
        let batch = sx[0];
        let geom = ConvGeom::forward(sx[1], sx[2], sx[3], sk[0], sk[2], stride, pad).ok_or_else(|| {
            Error::dim("conv2d", format!("kernel {} exceeds padded input {}x{} (pad {pad})", sk[2], sx[2], sx[3]))
        })?;
        let (xv, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![0.0; batch * geom.narrow_len()];
        let chunk = geom.chunk(batch);
        let plane = geom.narrow_plane();
        let mut col = vec![0.0; geom.patch_len() * chunk * plane];
        let mut tmp = vec![0.0; geom.filters * chunk * plane];
        for n0 in (0..batch).step_by(chunk) {
            let nc = chunk.min(batch - n0);
            let col = &mut col[..geom.patch_len() * nc * plane];
            im2col(&xv[n0 * geom.wide_len()..], nc, &geom, col);
            let tmp = &mut tmp[..geom.filters * nc * plane];
            gemm(
                1.0,
                Mat::row_major(kv, geom.filters, geom.patch_len()),
                Mat::row_major(col, geom.patch_len(), nc * plane),
                0.0,
                tmp,
            );
            scatter_planes_add(tmp, nc, geom.filters, plane, &mut out[n0 * geom.narrow_len()..]);
        }
        let shape = Shape::new([batch, geom.filters, geom.out_h, geom.out_w]);
        Ok(self.push(shape, out, Op::Conv2d { x, kernel, geom, batch }, &[x, kernel]))
    }

    /// Transposed convolution of `x[N x C x H x W]` with `kernel[C x F x k x k]`,
    /// producing `F x ((H-1)s - 2p + k) x ((W-1)s - 2p + k)`. It is the exact
    /// adjoint of [`Tape::conv2d`] with the same kernel tensor.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.rank() != 4 || sk.rank() != 4 || sk[0] != sx[1] || sk[2] != sk[3] {
            return Err(Error::dim("conv_transpose2d", format!("input {sx}, kernels {sk}")));
        }
        let batch = sx[0];
        let geom = ConvGeom::transposed(sx[1], sx[2], sx[3], sk[1], sk[2], stride, pad).ok_or_else(|| {
            Error::dim("conv_transpose2d", format!("output size below 1 for input {sx}, k {}, pad {pad}", sk[2]))
        })?;
        let (xv, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![0.0; batch * geom.wide_len()];
        let chunk = geom.chunk(batch);
        let plane = geom.narrow_plane();
        let mut col = vec![0.0; geom.patch_len() * chunk * plane];
        for n0 in (0..batch).step_by(chunk) {
            let nc = chunk.min(batch - n0);
            let y = gather_planes(&xv[n0 * geom.narrow_len()..], nc, geom.filters, plane);
            let col = &mut col[..geom.patch_len() * nc * plane];
            // col = K^T * y, with K viewed as [C x F*k*k]
            gemm(
                1.0,
                Mat::transposed(kv, geom.filters, geom.patch_len()),
                Mat::row_major(&y, geom.filters, nc * plane),
                0.0,
                col,
            );
            col2im(col, nc, &geom, &mut out[n0 * geom.wide_len()..]);
        }
        let shape = Shape::new([batch, geom.channels, geom.height, geom.width]);
        Ok(self.push(shape, out, Op::ConvTranspose2d { x, kernel, geom, batch }, &[x, kernel]))
    }
}

pub(super) fn conv2d_backward(
    t: &Tape<'_>,
    x: Var,
    kernel: Var,
    geom: &ConvGeom,
    batch: usize,
    g: &[f32],
    buf: &mut GradBuf,
) {
    let (want_x, want_k) = (t.needs_grad(x), t.needs_grad(kernel));
    if !want_x && !want_k {
        return;
    }
    let (xv, kv) = (t.value(x), t.value(kernel));
    let chunk = geom.chunk(batch);
    let plane = geom.narrow_plane();
    let mut col = vec![0.0; geom.patch_len() * chunk * plane];
    let mut dk = if want_k { vec![0.0; kv.len()] } else { vec![] };
    let mut dx = if want_x { vec![0.0; xv.len()] } else { vec![] };
    for n0 in (0..batch).step_by(chunk) {
        let nc = chunk.min(batch - n0);
        let col = &mut col[..geom.patch_len() * nc * plane];
        let dy = gather_planes(&g[n0 * geom.narrow_len()..], nc, geom.filters, plane);
        if want_k {
            im2col(&xv[n0 * geom.wide_len()..], nc, geom, col);
            // dK += dY * col^T
            gemm(
                1.0,
                Mat::row_major(&dy, geom.filters, nc * plane),
                Mat::transposed(col, geom.patch_len(), nc * plane),
                1.0,
                &mut dk,
            );
        }
        if want_x {
            // dcol = K^T * dY
            gemm(
                1.0,
                Mat::transposed(kv, geom.filters, geom.patch_len()),
                Mat::row_major(&dy, geom.filters, nc * plane),
                0.0,
                col,
            );
            col2im(col, nc, geom, &mut dx[n0 * geom.wide_len()..]);
        }
    }
    if want_k {
        buf.add(t, kernel, &dk);
    }
    if want_x {
        buf.add(t, x, &dx);
    }
}

pub(super) fn conv_transpose2d_backward(
    t: &Tape<'_>,
    x: Var,
    kernel: Var,
    geom: &ConvGeom,
    batch: usize,
    g: &[f32],
    buf: &mut GradBuf,
) {
    let (want_x, want_k) = (t.needs_grad(x), t.needs_grad(kernel));
    if !want_x && !want_k {
        return;
    }
    let (xv, kv) = (t.value(x), t.value(kernel));
    let chunk = geom.chunk(batch);
    let plane = geom.narrow_plane();
    let mut col = vec![0.0; geom.patch_len() * chunk * plane];
    let mut dk = if want_k { vec![0.0; kv.len()] } else { vec![] };
    let mut dx = if want_x { vec![0.0; xv.len()] } else { vec![] };
    let mut tmp = vec![0.0; geom.filters * chunk * plane];
    for n0 in (0..batch).step_by(chunk) {
        let nc = chunk.min(batch - n0);
        let col = &mut col[..geom.patch_len() * nc * plane];
        im2col(&g[n0 * geom.wide_len()..], nc, geom, col);
        if want_x {
            let tmp = &mut tmp[..geom.filters * nc * plane];
            gemm(
                1.0,
                Mat::row_major(kv, geom.filters, geom.patch_len()),
                Mat::row_major(col, geom.patch_len(), nc * plane),
                0.0,
                tmp,
            );
            scatter_planes_add(tmp, nc, geom.filters, plane, &mut dx[n0 * geom.narrow_len()..]);
        }
        if want_k {
            let y = gather_planes(&xv[n0 * geom.narrow_len()..], nc, geom.filters, plane);
            gemm(
                1.0,
                Mat::row_major(&y, geom.filters, nc * plane),
                Mat::transposed(col, geom.patch_len(), nc * plane),
                1.0,
                &mut dk,
            );
        }
    }
    if want_k {
        buf.add(t, kernel, &dk);
    }
    if want_x {
        buf.add(t, x, &dx);
    }
}
