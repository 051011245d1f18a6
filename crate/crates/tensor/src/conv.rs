//! 2-D cross-correlation via im2col and GEMM.
//!
//! Kernels are not flipped: `out[o, y, x] = b[o] + sum w[o, i, ky, kx] *
//! in[i, y*s + ky - p, x*s + kx - p]`, with zero padding.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(arg_err(OP, "stride must be at least 1"));
        }
        if weight.h != weight.w {
            return Err(shape_err(OP, format!("kernel must be square, got {}x{}", weight.h, weight.w)));
        }
        if input.c != weight.c {
            return Err(shape_err(
                OP,
                format!("input has {} channels but weight expects C_in = {}", input.c, weight.c),
            ));
        }
        if bias.numel() != weight.n {
            return Err(shape_err(
                OP,
                format!("bias has {} values but weight has C_out = {}", bias.numel(), weight.n),
            ));
        }
        let k = weight.h;
        if input.h + 2 * pad < k || input.w + 2 * pad < k {
            return Err(shape_err(
                OP,
                format!("kernel {k}x{k} larger than padded input {}x{}", input.h + 2 * pad, input.w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n: input.n,
            cin: input.c,
            cout: weight.n,
            k,
            stride,
            pad,
            h: input.h,
            w: input.w,
            ho: (input.h + 2 * pad - k) / stride + 1,
            wo: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], out: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let mut out = vec![T::zero(); g.out_shape().numel()];
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_plane();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.out_plane()] };
    let wmat = Mat::new(weight.data(), g.cout, g.col_rows());
    for n in 0..g.n {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (o, b) in bias.data().iter().enumerate() {
            y[o * g.out_plane()..(o + 1) * g.out_plane()].fill(*b);
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        gemm(T::one(), wmat, Mat::new(cols, g.col_rows(), g.out_plane()), T::one(), y);
    }
    Ok((g, Tensor::new(g.out_shape(), out)?))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Gradients of the convolution; each is computed only when requested.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let in_len = g.cin * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.cout * plane;
    let rows = g.col_rows();
    let mut gin = want[0].then(|| vec![T::zero(); g.n * in_len]);
    let mut gw = want[1].then(|| vec![T::zero(); weight.len()]);
    let mut gb = want[2].then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    let mut dcol = vec![T::zero(); if gin.is_some() && !g.is_pointwise() { rows * plane } else { 0 }];

    for n in 0..g.n {
        let dy = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gb) = gb.as_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let x = &input[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dW (cout x rows) += dY (cout x plane) * cols^T (plane x rows)
            gemm(T::one(), Mat::new(dy, g.cout, plane), Mat::t(cols, plane, rows), T::one(), gw);
        }
        if let Some(gin) = gin.as_mut() {
            let dx = &mut gin[n * in_len..(n + 1) * in_len];
            let wt = Mat::t(weight, rows, g.cout);
            if g.is_pointwise() {
                gemm(T::one(), wt, Mat::new(dy, g.cout, plane), T::one(), dx);
            } else {
                gemm(T::one(), wt, Mat::new(dy, g.cout, plane), T::zero(), &mut dcol);
                col2im(g, &dcol, dx);
            }
        }
    }
    ConvGrads { input: gin, weight: gw, bias: gb }
}
