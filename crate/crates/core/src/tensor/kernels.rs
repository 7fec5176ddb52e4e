//! Raw numeric kernels shared by the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Result, Tensor, TensorError};

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored as `a_rows x a_cols` before transposition, likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm: lhs layout");
    let b = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm: rhs layout");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let (m, n) = (a.nrows(), b.ncols());
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm: output layout");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

/// Plain matrix product of `a[B x p]` and `w[p x q]`.
pub fn matmul_forward(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || w.rank() != 2 || a.shape()[1] != w.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; m * n];
    if k > 0 {
        gemm(
            1.0,
            a.data(),
            m,
            k,
            false,
            w.data(),
            k,
            n,
            false,
            0.0,
            &mut out,
        );
    }
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 3x3, stride 1, pad 1 convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

pub(crate) const KSIZE: usize = 3;

impl ConvDims {
    pub fn check(x: &Tensor, k: &Tensor) -> Result<Self> {
        if x.rank() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: x.shape().to_vec(),
            });
        }
        if k.rank() != 4 || k.shape()[2] != KSIZE || k.shape()[3] != KSIZE {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel must be O x C x 3 x 3, got {:?}", k.shape()),
            });
        }
        if x.shape()[1] != k.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (channels)",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        Ok(Self {
            batch: x.shape()[0],
            in_ch: x.shape()[1],
            out_ch: k.shape()[0],
            height: x.shape()[2],
            width: x.shape()[3],
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.in_ch * KSIZE * KSIZE
    }
}

/// Unfold one sample `[C, H, W]` into `[C*9, H*W]` patches (zero padded).
fn im2col(img: &[f64], dims: &ConvDims, cols: &mut [f64]) {
    let (h, w) = (dims.height, dims.width);
    let plane = dims.plane();
    for c in 0..dims.in_ch {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - 1;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add patch gradients back into `[C, H, W]`.
fn col2im(cols: &[f64], dims: &ConvDims, img: &mut [f64]) {
    let (h, w) = (dims.height, dims.width);
    let plane = dims.plane();
    for c in 0..dims.in_ch {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[B,C,H,W]` with `k[O,C,3,3]`, stride 1, pad 1.
pub fn conv2d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let dims = ConvDims::check(x, k)?;
    let plane = dims.plane();
    let mut out = vec![0.0; dims.batch * dims.out_ch * plane];
    let mut cols = vec![0.0; dims.col_rows() * plane];
    let in_len = dims.in_ch * plane;
    let out_len = dims.out_ch * plane;
    for b in 0..dims.batch {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &dims, &mut cols);
        gemm(
            1.0,
            k.data(),
            dims.out_ch,
            dims.col_rows(),
            false,
            &cols,
            dims.col_rows(),
            plane,
            false,
            0.0,
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
    Tensor::new(vec![dims.batch, dims.out_ch, dims.height, dims.width], out)
}

/// Gradients of the convolution with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    dout: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let dims = ConvDims::check(x, k).expect("conv2d_backward: shapes validated in forward");
    let plane = dims.plane();
    let in_len = dims.in_ch * plane;
    let out_len = dims.out_ch * plane;
    let rows = dims.col_rows();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let mut cols = vec![0.0; rows * plane];
    let mut dcols = vec![0.0; rows * plane];
    for b in 0..dims.batch {
        let g = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dk) = dk.as_mut() {
            im2col(&x.data()[b * in_len..(b + 1) * in_len], &dims, &mut cols);
            // dK[O, C*9] += dOut[O, HW] * cols[C*9, HW]^T
            gemm(
                1.0,
                g,
                dims.out_ch,
                plane,
                false,
                &cols,
                rows,
                plane,
                true,
                1.0,
                dk,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[C*9, HW] = K[O, C*9]^T * dOut[O, HW]
            gemm(
                1.0,
                k.data(),
                dims.out_ch,
                rows,
                true,
                g,
                dims.out_ch,
                plane,
                false,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, &dims, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dk)
}
