//! im2col convolution kernels and the GEMM wrapper shared with matmul.

use crate::error::{Error, Result};

/// Spatial geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::shape("convolution stride must be positive"));
        }
        if self.in_h + 2 * self.pad_h < self.kernel_h || self.in_w + 2 * self.pad_w < self.kernel_w {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.in_h + 2 * self.pad_h,
                self.in_w + 2 * self.pad_w
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad_h - self.kernel_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad_w - self.kernel_w) / self.stride_w + 1
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `input` into a `[C*kh*kw, Ho*Wo]` column matrix.
fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_n = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto an input-shaped buffer.
fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_n = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row/column strides of a matrix operand, allowing transposed views.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]` row-major.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: MatView, b: MatView, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: strides describe matrices that lie within the given slices;
    // callers pass slices of exactly the advertised extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let cols = im2col(g, input);
    let (k, n) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; g.out_channels * n];
    gemm_acc(
        g.out_channels,
        k,
        n,
        MatView::rows(kernel, k),
        MatView::rows(&cols, n),
        &mut out,
    );
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, n) = (g.patch_len(), g.out_len());
    let d_kernel = want_kernel.then(|| {
        let cols = im2col(g, input);
        let mut dk = vec![0.0; g.out_channels * k];
        gemm_acc(
            g.out_channels,
            n,
            k,
            MatView::rows(grad_out, n),
            MatView::transposed(&cols, n),
            &mut dk,
        );
        dk
    });
    let d_input = want_input.then(|| {
        let mut dcols = vec![0.0; k * n];
        gemm_acc(
            k,
            g.out_channels,
            n,
            MatView::transposed(kernel, k),
            MatView::rows(grad_out, n),
            &mut dcols,
        );
        let mut di = vec![0.0; g.in_channels * g.in_h * g.in_w];
        col2im(g, &dcols, &mut di);
        di
    });
    (d_input, d_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for co in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                                let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += input[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                                    * kernel[((co * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeometry {
            in_channels: 2,
            in_h: 7,
            in_w: 5,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 2,
            stride_h: 2,
            stride_w: 1,
            pad_h: 1,
            pad_w: 1,
        };
        let input: Vec<f64> = (0..70).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..36).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
        let fast = conv_forward(&g, &input, &kernel);
        let slow = naive_conv(&g, &input, &kernel);
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let g = ConvGeometry {
            in_channels: 1,
            in_h: 2,
            in_w: 2,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride_h: 1,
            stride_w: 1,
            pad_h: 0,
            pad_w: 0,
        };
        assert!(g.validate().is_err());
    }
}
