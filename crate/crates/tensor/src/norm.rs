//! Per-channel batch normalization over the N, H, W axes.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance tracked across training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub batches_tracked: u64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], batches_tracked: 0 }
    }
}

/// Per-channel quantities a backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn channel_iter<T: Copy>(data: &[T], s: Shape, c: usize) -> impl Iterator<Item = &[T]> + '_ {
    let plane = s.plane();
    (0..s.n).map(move |n| &data[(n * s.c + c) * plane..(n * s.c + c + 1) * plane])
}

pub(crate) fn forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut BatchNormStats<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    const OP: &str = "batchnorm2d";
    let s = input.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(shape_err(
            OP,
            format!("gamma/beta have {}/{} values for {} channels", gamma.len(), beta.len(), s.c),
        ));
    }
    if stats.mean.len() != s.c || stats.var.len() != s.c {
        return Err(shape_err(OP, format!("running stats sized {} for {} channels", stats.mean.len(), s.c)));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(arg_err(OP, format!("eps must be positive, got {eps}")));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(arg_err(OP, format!("momentum must lie in [0, 1], got {momentum}")));
    }
    let count = s.n * s.plane();
    if count == 0 {
        return Err(shape_err(OP, format!("empty input {s}")));
    }

    let mut mean = vec![T::zero(); s.c];
    let mut inv_std = vec![T::zero(); s.c];
    match mode {
        Mode::Train => {
            for c in 0..s.c {
                // f64 accumulation keeps f32 statistics stable over large batches.
                let mut sum = 0.0f64;
                for chunk in channel_iter(input.data(), s, c) {
                    sum += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for chunk in channel_iter(input.data(), s, c) {
                    sq += chunk.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                let var = sq / count as f64;
                mean[c] = T::lit(mu);
                inv_std[c] = T::lit(1.0 / (var + eps).sqrt());

                let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                let m = momentum;
                stats.mean[c] = T::lit((1.0 - m) * stats.mean[c].as_f64() + m * mu);
                stats.var[c] = T::lit((1.0 - m) * stats.var[c].as_f64() + m * unbiased);
            }
            stats.batches_tracked += 1;
        }
        Mode::Eval => {
            if stats.batches_tracked == 0 {
                return Err(TensorError::NoRunningStats);
            }
            for c in 0..s.c {
                mean[c] = stats.mean[c];
                inv_std[c] = T::lit(1.0 / (stats.var[c].as_f64() + eps).sqrt());
            }
        }
    }

    let plane = s.plane();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            for (o, x) in out[base..base + plane].iter_mut().zip(&input.data()[base..base + plane]) {
                *o = *x * scale + shift;
            }
        }
    }
    Ok((Tensor::new(s, out)?, BnSaved { mean, inv_std, mode }))
}

pub(crate) struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    saved: &BnSaved<T>,
    grad_out: &[T],
) -> BnGrads<T> {
    let s = input.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let x = input.data();
    let mut gin = vec![T::zero(); s.numel()];
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mu, istd) = (saved.mean[c].as_f64(), saved.inv_std[c].as_f64());
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                let dy = grad_out[i].as_f64();
                sum_dy += dy;
                sum_dy_xhat += dy * (x[i].as_f64() - mu) * istd;
            }
        }
        ggamma[c] = T::lit(sum_dy_xhat);
        gbeta[c] = T::lit(sum_dy);
        let g = gamma[c].as_f64();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in base..base + plane {
                let dy = grad_out[i].as_f64();
                gin[i] = T::lit(match saved.mode {
                    Mode::Train => {
                        let xhat = (x[i].as_f64() - mu) * istd;
                        g * istd * (dy - sum_dy / count - xhat * sum_dy_xhat / count)
                    }
                    Mode::Eval => g * istd * dy,
                });
            }
        }
    }
    BnGrads { input: gin, gamma: ggamma, beta: gbeta }
}
