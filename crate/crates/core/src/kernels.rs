//! Raw slice kernels: GEMM and the im2col/col2im lowering used by the
//! convolution ops.

use alloc::vec;
use alloc::vec::Vec;

/// Strided view of a row-major-or-transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer, i.e. a `cols x rows` operand.
    pub fn transposed(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Mat { data, rows: cols, cols: rows, rs: 1, cs: cols }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f32, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every element addressed through (rows, cols, strides) lies
    // inside the slices, checked by the span assertions above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a convolution from the "wide" side (`channels x height x width`)
/// to the "narrow" side (`filters x out_h x out_w`). A transposed
/// convolution runs the same geometry backwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Convolution output size, `None` when the kernel does not fit.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Some(ConvGeom { channels, height, width, filters, kernel, stride, pad, out_h, out_w })
    }

    /// Geometry whose narrow side is `in_h x in_w`, i.e. the transposed
    /// convolution producing `(in - 1) * stride - 2 * pad + kernel`.
    pub fn transposed(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h == 0 || in_w == 0 {
            return None;
        }
        let h = ((in_h - 1) * stride + kernel).checked_sub(2 * pad)?;
        let w = ((in_w - 1) * stride + kernel).checked_sub(2 * pad)?;
        if h < 1 || w < 1 {
            return None;
        }
        Some(ConvGeom {
            channels: out_channels,
            height: h,
            width: w,
            filters: in_channels,
            kernel,
            stride,
            pad,
            out_h: in_h,
            out_w: in_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn wide_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn narrow_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn narrow_len(&self) -> usize {
        self.filters * self.narrow_plane()
    }

    /// Images per im2col chunk, bounding the column buffer to ~32 MiB.
    pub fn chunk(&self, batch: usize) -> usize {
        const LIMIT: usize = 1 << 23;
        let per_image = self.patch_len() * self.narrow_plane();
        (LIMIT / per_image.max(1)).clamp(1, batch.max(1))
    }
}

/// Output columns `ox` whose input column `ox * s + kj - p` lies in `0..width`.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if g.width + p > kj { ((g.width + p - kj - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

/// Lowers `images` wide-side images into a `patch_len x (images * plane)` matrix.
pub(crate) fn im2col(src: &[f32], images: usize, g: &ConvGeom, col: &mut [f32]) {
    let plane = g.narrow_plane();
    let ncols = images * plane;
    debug_assert!(col.len() >= g.patch_len() * ncols);
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let hw = g.height * g.width;
    for img in 0..images {
        let image = &src[img * g.wide_len()..][..g.wide_len()];
        for c in 0..g.channels {
            let chan = &image[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * ncols + img * plane..][..plane];
                    let (lo, hi) = valid_span(g, kj);
                    for oy in 0..g.out_h {
                        let out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            out.fill(0.0);
                            continue;
                        }
                        let line = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        let x0 = lo * s + kj - p;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&line[x0..x0 + hi - lo]);
                        } else {
                            for (o, v) in out[lo..hi].iter_mut().zip(line[x0..].iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into wide-side images.
pub(crate) fn col2im(col: &[f32], images: usize, g: &ConvGeom, dst: &mut [f32]) {
    let plane = g.narrow_plane();
    let ncols = images * plane;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let hw = g.height * g.width;
    for img in 0..images {
        let image = &mut dst[img * g.wide_len()..][..g.wide_len()];
        for c in 0..g.channels {
            let chan = &mut image[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * ncols + img * plane..][..plane];
                    let (lo, hi) = valid_span(g, kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.out_h {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let line = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let x0 = lo * s + kj - p;
                        let seg = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                        for (d, v) in line[x0..].iter_mut().step_by(s).zip(seg) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Copies `images` narrow-side images (`filters x plane` each) into one
/// `filters x (images * plane)` matrix.
pub(crate) fn gather_planes(src: &[f32], images: usize, filters: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0; filters * images * plane];
    let ncols = images * plane;
    for img in 0..images {
        for f in 0..filters {
            out[f * ncols + img * plane..f * ncols + (img + 1) * plane]
                .copy_from_slice(&src[(img * filters + f) * plane..(img * filters + f + 1) * plane]);
        }
    }
    out
}

/// Inverse of [`gather_planes`], accumulating into `dst`.
pub(crate) fn scatter_planes_add(src: &[f32], images: usize, filters: usize, plane: usize, dst: &mut [f32]) {
    let ncols = images * plane;
    for img in 0..images {
        for f in 0..filters {
            let s = &src[f * ncols + img * plane..f * ncols + (img + 1) * plane];
            let d = &mut dst[(img * filters + f) * plane..(img * filters + f + 1) * plane];
            d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loops_with_transposes() {
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, Mat::row_major(&a, 2, 3), Mat::row_major(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (a^T)^T a = a a^T computed via a transposed operand
        let mut d = vec![0.0; 4];
        gemm(1.0, Mat::row_major(&a, 2, 3), Mat::transposed(&a, 2, 3), 0.0, &mut d);
        assert_eq!(d, vec![5.0, 14.0, 14.0, 50.0]);
    }

    #[test]
    fn output_size_formulas() {
        let g = ConvGeom::forward(1, 28, 28, 256, 9, 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (20, 20));
        let g = ConvGeom::forward(256, 20, 20, 256, 9, 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (6, 6));
        assert!(ConvGeom::forward(1, 2, 2, 1, 5, 1, 1).is_none());
        let t = ConvGeom::transposed(128, 7, 7, 128, 4, 2, 1).unwrap();
        assert_eq!((t.height, t.width), (14, 14));
        let t = ConvGeom::transposed(256, 6, 6, 256, 6, 2, 0).unwrap();
        assert_eq!(t.height, 16);
        assert!(ConvGeom::transposed(1, 1, 1, 1, 1, 1, 1).is_none());
    }
}
