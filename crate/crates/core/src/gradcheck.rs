//! Finite-difference gradient suite: every layer type plus an end-to-end
//! micro-model, in 64-bit with `h = 1e-5`.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use stereoisp_tensor::gradcheck::{central_difference, relative_error};
use stereoisp_tensor::{BatchNormStats, Mode, Shape, Tape, Tensor, Var};

use crate::error::Result;
use crate::model::{build_model, forward, ModelConfig};

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    /// Norm-wise relative error of analytic vs numeric gradient.
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checks: Vec<GradCheck>,
    pub elapsed_secs: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Op<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Checks `d sum(probe * op(inputs)) / d inputs` against central differences.
fn layer_error(inputs: &[Tensor<f64>], probe_seed: u64, op: &Op<'_>) -> Result<f64> {
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(grads))).collect::<std::result::Result<Vec<_>, _>>()?;
        let y = op(&mut tape, &vars)?;
        let probe = Tensor::uniform(tape.shape(y)?, -1.0, 1.0, &mut StdRng::seed_from_u64(probe_seed));
        let loss = tape.weighted_sum(y, &probe)?;
        let value = tape.value(loss)?.item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let mut failure = None;
        let numeric = central_difference(x.data(), STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = Tensor::new(x.shape(), probe.to_vec()).expect("same shape");
            match eval(&xs, false) {
                Ok((v, _)) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        all_analytic.extend_from_slice(&analytic[i]);
        all_numeric.extend(numeric);
    }
    Ok(relative_error(&all_analytic, &all_numeric))
}

fn uniform(shape: Shape, rng: &mut StdRng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so no finite-difference step crosses the
/// ReLU kink.
fn away_from_zero(shape: Shape, rng: &mut StdRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn record(checks: &mut Vec<GradCheck>, name: &str, tolerance: f64, err: f64) {
    checks.push(GradCheck { name: name.into(), rel_error: err, tolerance, passed: err < tolerance });
}

/// Runs the whole suite with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<GradCheckReport> {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut checks = Vec::new();

    for (name, stride, k) in [("conv2d 3x3 stride 1", 1, 3), ("conv2d 3x3 stride 2", 2, 3), ("conv2d 1x1", 1, 1)] {
        let inputs =
            [uniform(Shape::new(2, 3, 6, 7), &mut rng), uniform(Shape::new(4, 3, k, k), &mut rng), uniform(Shape::vector(4), &mut rng)];
        let err = layer_error(&inputs, 1, &|t, v| Ok(t.conv2d(v[0], v[1], v[2], stride, k / 2)?))?;
        record(&mut checks, name, LAYER_TOLERANCE, err);
    }

    for mode in [Mode::Train, Mode::Eval] {
        let inputs = [uniform(Shape::new(3, 3, 4, 4), &mut rng), uniform(Shape::vector(3), &mut rng), uniform(Shape::vector(3), &mut rng)];
        let stats = BatchNormStats {
            mean: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
            batches_tracked: 1,
        };
        let err = layer_error(&inputs, 2, &|t, v| {
            let mut s = stats.clone();
            Ok(t.batchnorm2d(v[0], v[1], v[2], &mut s, mode, 0.1, 1e-5)?)
        })?;
        let name = if mode == Mode::Train { "batchnorm2d train" } else { "batchnorm2d eval" };
        record(&mut checks, name, LAYER_TOLERANCE, err);
    }

    let err = layer_error(&[away_from_zero(Shape::new(2, 3, 4, 5), &mut rng)], 3, &|t, v| Ok(t.relu(v[0])?))?;
    record(&mut checks, "relu", LAYER_TOLERANCE, err);

    let err = layer_error(&[uniform(Shape::new(2, 3, 4, 6), &mut rng)], 4, &|t, v| Ok(t.pixel_unshuffle(v[0], 2)?))?;
    record(&mut checks, "pixel_unshuffle", LAYER_TOLERANCE, err);

    let err = layer_error(&[uniform(Shape::new(2, 8, 3, 2), &mut rng)], 5, &|t, v| Ok(t.pixel_shuffle(v[0], 2)?))?;
    record(&mut checks, "pixel_shuffle", LAYER_TOLERANCE, err);

    let inputs = [uniform(Shape::new(2, 2, 3, 3), &mut rng), uniform(Shape::new(2, 3, 3, 3), &mut rng)];
    let err = layer_error(&inputs, 6, &|t, v| {
        let c = t.concat(&[v[0], v[1], v[0]])?;
        Ok(t.slice_channels(c, 1, 5)?)
    })?;
    record(&mut checks, "concat/slice", LAYER_TOLERANCE, err);

    let factor = uniform(Shape::new(2, 3, 3, 4), &mut rng);
    let err = layer_error(&[uniform(Shape::new(2, 3, 3, 4), &mut rng)], 7, &|t, v| {
        let m = t.mul_const(v[0], &factor)?;
        Ok(t.scale(m, -1.5)?)
    })?;
    record(&mut checks, "mask multiply/scale", LAYER_TOLERANCE, err);

    let inputs = [uniform(Shape::new(2, 3, 3, 4), &mut rng), uniform(Shape::new(2, 3, 3, 4), &mut rng)];
    let err = layer_error(&inputs, 8, &|t, v| Ok(t.mse_loss(v[0], v[1])?))?;
    record(&mut checks, "mse_loss", LAYER_TOLERANCE, err);

    let err = model_error(seed)?;
    record(&mut checks, "end-to-end two-port micro-model", MODEL_TOLERANCE, err);

    Ok(GradCheckReport { checks, elapsed_secs: started.elapsed().as_secs_f64() })
}

/// Gradient of `sum(probe * O)` w.r.t. every trainable parameter and the
/// primary mosaic of a depth-1, width-4 two-port model on 8x16 inputs.
fn model_error(seed: u64) -> Result<f64> {
    let config = ModelConfig { depth: 1, width: 4, kernel: 3, ports: 2, noise_channel: true };
    let model = build_model::<f64>(config, seed)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let shape = Shape::new(2, 1, 8, 16);
    let primary = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng);
    let secondary = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng);
    let probe = Tensor::uniform(Shape::new(2, 3, 8, 16), -1.0, 1.0, &mut rng);
    let levels = [0.3f32, 0.2];

    let run = |params: &crate::model::ModelParams<f64>, p: &Tensor<f64>, grads: bool| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut m = params.clone();
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone().with_requires_grad(grads))?;
        let sv = tape.constant(secondary.clone())?;
        let out = forward(&mut m, &mut tape, pv, Some(sv), &levels, Mode::Train)?;
        let loss = tape.weighted_sum(out, &probe)?;
        let value = tape.value(loss)?.item()?;
        if !grads {
            return Ok((value, Vec::new(), Vec::new()));
        }
        m.params.zero_grad();
        tape.backward_into(loss, &mut m.params)?;
        let input_grad = tape.grad(pv).map(<[f64]>::to_vec).unwrap_or_default();
        let param_grads = m.params.trainable().flat_map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default()).collect();
        Ok((value, param_grads, input_grad))
    };

    let (_, mut analytic, input_grad) = run(&model, &primary, true)?;
    analytic.extend(input_grad);
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut failure = None;
    let mut value_of = |params: &crate::model::ModelParams<f64>, p: &Tensor<f64>| match run(params, p, false) {
        Ok((v, _, _)) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    for idx in 0..model.params.len() {
        let param = model.params.by_index(idx);
        if !param.trainable {
            continue;
        }
        numeric.extend(central_difference(param.tensor.data(), STEP, |x| {
            let mut perturbed = model.clone();
            perturbed.params.by_index_mut(idx).tensor.data_mut().copy_from_slice(x);
            value_of(&perturbed, &primary)
        }));
    }
    numeric.extend(central_difference(primary.data(), STEP, |x| value_of(&model, &Tensor::new(shape, x.to_vec()).expect("same shape"))));
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_suite(0).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} rel err {}", c.name, c.rel_error);
        }
        assert_eq!(report.checks.len(), 12);
    }
}
