//! Convolution, transposed convolution and bilinear resizing over
//! channel-major images flattened into rows (`[batch, channels * h * w]`).

use crate::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution.
///
/// For [`super::Graph::conv2d`] `in_*` describe the input image. For
/// [`super::Graph::conv_transpose2d`] they describe the (smaller) input of the
/// transposed operation, and the output grows to [`ConvSpec::transpose_out_hw`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn conv_out_hw(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(self.in_h), f(self.in_w))
    }

    pub fn transpose_out_hw(&self) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.padding;
        (f(self.in_h), f(self.in_w))
    }

    /// Rows of the lowered patch matrix for a `channels`-channel image.
    fn patch_rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }
}

/// Image geometry plus the grid of kernel positions sliding over it.
struct Lowering {
    channels: usize,
    h: usize,
    w: usize,
    grid_h: usize,
    grid_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Lowering {
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let k = self.kernel;
        let grid = self.grid_h * self.grid_w;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for gy in 0..self.grid_h {
                        let y = (gy * self.stride + ky) as isize - self.padding as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for gx in 0..self.grid_w {
                            let x = (gx * self.stride + kx) as isize - self.padding as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            let pixel = (c * self.h + y as usize) * self.w + x as usize;
                            f(row * grid + gy * self.grid_w + gx, pixel);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each(|ci, pi| cols[ci] = image[pi]);
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        self.for_each(|ci, pi| image[pi] += cols[ci]);
    }
}

fn check(x: &Tensor, w: &Tensor, b: &Tensor, in_c: usize, in_hw: usize, w_shape: (usize, usize), out_c: usize) -> Result<(), String> {
    if x.cols() != in_c * in_hw {
        return Err(format!("input {:?} does not hold {in_c} channels of {in_hw} pixels", x.shape()));
    }
    if w.rows() != w_shape.0 || w.cols() != w_shape.1 {
        return Err(format!("weight {:?} expected [{}, {}]", w.shape(), w_shape.0, w_shape.1));
    }
    if b.len() != out_c {
        return Err(format!("bias {:?} expected {out_c} entries", b.shape()));
    }
    Ok(())
}

pub(super) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, s: &ConvSpec) -> Result<Tensor, String> {
    let (ho, wo) = s.conv_out_hw();
    let kk = s.patch_rows(s.in_channels);
    check(x, w, b, s.in_channels, s.in_h * s.in_w, (s.out_channels, kk), s.out_channels)?;
    let low = Lowering {
        channels: s.in_channels,
        h: s.in_h,
        w: s.in_w,
        grid_h: ho,
        grid_w: wo,
        kernel: s.kernel,
        stride: s.stride,
        padding: s.padding,
    };
    let grid = ho * wo;
    let out_cols = s.out_channels * grid;
    let mut out = vec![0.0; x.rows() * out_cols];
    let mut cols = vec![0.0; kk * grid];
    for r in 0..x.rows() {
        low.im2col(x.row(r), &mut cols);
        let dst = &mut out[r * out_cols..(r + 1) * out_cols];
        for (c, chunk) in dst.chunks_exact_mut(grid).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[c]);
        }
        matmul_nn(s.out_channels, kk, grid, 1.0, w.data(), &cols, 1.0, dst);
    }
    Ok(Tensor::matrix(x.rows(), out_cols, out))
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Vec<f64>);

pub(super) fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, s: &ConvSpec, need_x: bool, need_w: bool) -> ConvGrads {
    let (ho, wo) = s.conv_out_hw();
    let kk = s.patch_rows(s.in_channels);
    let low = Lowering {
        channels: s.in_channels,
        h: s.in_h,
        w: s.in_w,
        grid_h: ho,
        grid_w: wo,
        kernel: s.kernel,
        stride: s.stride,
        padding: s.padding,
    };
    let grid = ho * wo;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut gb = vec![0.0; s.out_channels];
    let mut cols = vec![0.0; kk * grid];
    for r in 0..x.rows() {
        let go = g.row(r);
        for (c, chunk) in go.chunks_exact(grid).enumerate() {
            gb[c] += chunk.iter().sum::<f64>();
        }
        if let Some(gw) = gw.as_mut() {
            low.im2col(x.row(r), &mut cols);
            matmul_nt(s.out_channels, grid, kk, 1.0, go, &cols, 1.0, gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            matmul_tn(kk, s.out_channels, grid, 1.0, w.data(), go, 0.0, &mut cols);
            low.col2im(&cols, gx.row_mut(r));
        }
    }
    (gx, gw, gb)
}

pub(super) fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, s: &ConvSpec) -> Result<Tensor, String> {
    let (ho, wo) = s.transpose_out_hw();
    let kk = s.patch_rows(s.out_channels);
    check(x, w, b, s.in_channels, s.in_h * s.in_w, (s.in_channels, kk), s.out_channels)?;
    let low = Lowering {
        channels: s.out_channels,
        h: ho,
        w: wo,
        grid_h: s.in_h,
        grid_w: s.in_w,
        kernel: s.kernel,
        stride: s.stride,
        padding: s.padding,
    };
    let grid = s.in_h * s.in_w;
    let out_cols = s.out_channels * ho * wo;
    let mut out = vec![0.0; x.rows() * out_cols];
    let mut cols = vec![0.0; kk * grid];
    for r in 0..x.rows() {
        matmul_tn(kk, s.in_channels, grid, 1.0, w.data(), x.row(r), 0.0, &mut cols);
        let dst = &mut out[r * out_cols..(r + 1) * out_cols];
        for (c, chunk) in dst.chunks_exact_mut(ho * wo).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[c]);
        }
        low.col2im(&cols, dst);
    }
    Ok(Tensor::matrix(x.rows(), out_cols, out))
}

pub(super) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    s: &ConvSpec,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let (ho, wo) = s.transpose_out_hw();
    let kk = s.patch_rows(s.out_channels);
    let low = Lowering {
        channels: s.out_channels,
        h: ho,
        w: wo,
        grid_h: s.in_h,
        grid_w: s.in_w,
        kernel: s.kernel,
        stride: s.stride,
        padding: s.padding,
    };
    let grid = s.in_h * s.in_w;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut gb = vec![0.0; s.out_channels];
    let mut cols = vec![0.0; kk * grid];
    for r in 0..x.rows() {
        let go = g.row(r);
        for (c, chunk) in go.chunks_exact(ho * wo).enumerate() {
            gb[c] += chunk.iter().sum::<f64>();
        }
        if gx.is_none() && gw.is_none() {
            continue;
        }
        low.im2col(go, &mut cols);
        if let Some(gx) = gx.as_mut() {
            matmul_nn(s.in_channels, kk, grid, 1.0, w.data(), &cols, 0.0, gx.row_mut(r));
        }
        if let Some(gw) = gw.as_mut() {
            matmul_nt(s.in_channels, grid, kk, 1.0, x.row(r), &cols, 1.0, gw.data_mut());
        }
    }
    (gx, gw, gb)
}

/// Bilinear resampling with half-pixel centers (edges clamped), applied to
/// each channel of each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeSpec {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Two source taps and the weight of the second one.
fn taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

impl ResizeSpec {
    fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let ty = taps(self.out_h, self.in_h);
        let tx = taps(self.out_w, self.in_w);
        for c in 0..self.channels {
            let src = c * self.in_h * self.in_w;
            let dst = c * self.out_h * self.out_w;
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let o = dst + oy * self.out_w + ox;
                    f(o, src + y0 * self.in_w + x0, (1.0 - wy) * (1.0 - wx));
                    f(o, src + y0 * self.in_w + x1, (1.0 - wy) * wx);
                    f(o, src + y1 * self.in_w + x0, wy * (1.0 - wx));
                    f(o, src + y1 * self.in_w + x1, wy * wx);
                }
            }
        }
    }

    /// Resizes each row of `x` (`[n, channels * in_h * in_w]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, String> {
        if x.cols() != self.channels * self.in_h * self.in_w {
            return Err(format!(
                "input {:?} is not {} channels of {}x{}",
                x.shape(),
                self.channels,
                self.in_h,
                self.in_w
            ));
        }
        let out_cols = self.channels * self.out_h * self.out_w;
        let mut out = vec![0.0; x.rows() * out_cols];
        for r in 0..x.rows() {
            let src = x.row(r);
            let dst = &mut out[r * out_cols..(r + 1) * out_cols];
            self.for_each(|o, i, wt| dst[o] += wt * src[i]);
        }
        Ok(Tensor::matrix(x.rows(), out_cols, out))
    }

    pub(super) fn backward(&self, g: &Tensor) -> Tensor {
        let in_cols = self.channels * self.in_h * self.in_w;
        let mut out = vec![0.0; g.rows() * in_cols];
        for r in 0..g.rows() {
            let src = g.row(r);
            let dst = &mut out[r * in_cols..(r + 1) * in_cols];
            self.for_each(|o, i, wt| dst[i] += wt * src[o]);
        }
        Tensor::matrix(g.rows(), in_cols, out)
    }
}
