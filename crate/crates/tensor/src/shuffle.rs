//! Sub-pixel rearrangements between space and channels.
//!
//! `unshuffle` maps `C x H x W` to `(C*f*f) x (H/f) x (W/f)` with
//! `out[c*f*f + i*f + j, y, x] = in[c, y*f + i, x*f + j]`; `shuffle` is its
//! inverse. Both are permutations, so backward is the opposite permutation.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub(crate) fn unshuffle_shape(s: Shape, f: usize) -> Result<Shape> {
    if f == 0 {
        return Err(arg_err("pixel_unshuffle", "factor must be at least 1"));
    }
    if s.h % f != 0 || s.w % f != 0 {
        return Err(shape_err(
            "pixel_unshuffle",
            format!("spatial dims {}x{} not divisible by factor {f}", s.h, s.w),
        ));
    }
    Ok(Shape::new(s.n, s.c * f * f, s.h / f, s.w / f))
}

pub(crate) fn shuffle_shape(s: Shape, f: usize) -> Result<Shape> {
    if f == 0 {
        return Err(arg_err("pixel_shuffle", "factor must be at least 1"));
    }
    if s.c % (f * f) != 0 {
        return Err(shape_err(
            "pixel_shuffle",
            format!("{} channels not divisible by factor^2 = {}", s.c, f * f),
        ));
    }
    Ok(Shape::new(s.n, s.c / (f * f), s.h * f, s.w * f))
}

/// Index pairs (packed, spatial) for a spatial-domain shape `s`.
fn for_each_pair(s: Shape, f: usize, mut visit: impl FnMut(usize, usize)) {
    let (hp, wp) = (s.h / f, s.w / f);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let spatial = ((n * s.c + c) * s.h + y) * s.w + x;
                    let pc = c * f * f + (y % f) * f + (x % f);
                    let packed = ((n * s.c * f * f + pc) * hp + y / f) * wp + x / f;
                    visit(packed, spatial);
                }
            }
        }
    }
}

/// Spatial -> packed.
pub(crate) fn unshuffle_data<T: Scalar>(spatial_shape: Shape, f: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for_each_pair(spatial_shape, f, |p, s| out[p] = src[s]);
    out
}

/// Packed -> spatial.
pub(crate) fn shuffle_data<T: Scalar>(spatial_shape: Shape, f: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for_each_pair(spatial_shape, f, |p, s| out[s] = src[p]);
    out
}

pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let out_shape = unshuffle_shape(input.shape(), factor)?;
    Tensor::new(out_shape, unshuffle_data(input.shape(), factor, input.data()))
}

pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let out_shape = shuffle_shape(input.shape(), factor)?;
    Tensor::new(out_shape, shuffle_data(out_shape, factor, input.data()))
}
