//! The stereo demosaicking/denoising network and its single-input baseline.
//!
//! Layout for two ports, width `W` per input and depth `N`:
//!
//! ```text
//! F0      = [pack(M) | pack(W) | noise]            9 ch, H/2 x W/2
//! N x     conv KxK -> batchnorm -> relu           2W ch
//! FN      = conv 1x1                              24 ch (12 per input)
//! FN+1    = pixel_shuffle(FN)                      6 ch, H x W
//! FN+2    = [mask(M) | FN+1[0..3] | mask(W) | FN+1[3..6]]   12 ch
//! FN+3    = conv KxK -> batchnorm -> relu         2W ch
//! O       = conv 1x1                               3 ch
//! ```
//!
//! One port halves every per-input quantity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stereoisp_tensor::{kaiming_uniform, Mode, ParamSet, Scalar, Shape, Tape, Tensor, Var};

use crate::error::{dims, Error, Result};
use crate::raw::{cfa_masks, BayerMosaic, CfaPattern};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Trainable parameter count reported for the full-size two-port model.
pub const REPORTED_PARAMETER_COUNT: usize = 2_246_146;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of low-resolution conv/batchnorm/relu blocks.
    pub depth: usize,
    /// Feature channels per input port.
    pub width: usize,
    pub kernel: usize,
    pub ports: usize,
    #[serde(default = "default_true")]
    pub noise_channel: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale default.
    pub const fn desk() -> Self {
        ModelConfig { depth: 4, width: 16, kernel: 3, ports: 2, noise_channel: true }
    }

    /// Full-size configuration (depth 15, 64 channels per input).
    pub const fn full() -> Self {
        ModelConfig { depth: 15, width: 64, kernel: 3, ports: 2, noise_channel: true }
    }

    pub fn with_ports(mut self, ports: usize) -> Self {
        self.ports = ports;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return fail(format!("depth must be >= 1, got {}", self.depth));
        }
        if self.width < 4 {
            return fail(format!("width must be >= 4, got {}", self.width));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return fail(format!("kernel must be odd and >= 3, got {}", self.kernel));
        }
        if !(1..=2).contains(&self.ports) {
            return fail(format!("ports must be 1 or 2, got {}", self.ports));
        }
        Ok(())
    }

    /// Channel counts of F0, each low-res block, FN, FN+1, FN+2, FN+3, O.
    pub fn channel_plan(&self) -> ChannelPlan {
        let p = self.ports;
        ChannelPlan {
            input: 4 * p + usize::from(self.noise_channel),
            low: vec![self.width * p; self.depth],
            packed_out: 12 * p,
            upsampled: 3 * p,
            full_in: 6 * p,
            full: self.width * p,
            output: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub input: usize,
    pub low: Vec<usize>,
    pub packed_out: usize,
    pub upsampled: usize,
    pub full_in: usize,
    pub full: usize,
    pub output: usize,
}

impl ChannelPlan {
    /// Flat sequence `F0, low..., FN, FN+1, FN+2, FN+3, O`.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = vec![self.input];
        s.extend(&self.low);
        s.extend([self.packed_out, self.upsampled, self.full_in, self.full, self.output]);
        s
    }
}

/// Network weights together with the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

fn low_prefix(i: usize) -> String {
    format!("low.{i}")
}

fn add_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.add(format!("{prefix}.weight"), kaiming_uniform(Shape::new(cout, cin, k, k), cin * k * k, rng), true)?;
    params.add(format!("{prefix}.bias"), Tensor::zeros(Shape::vector(cout)), true)?;
    Ok(())
}

/// Kaiming-uniform conv weights, zero biases, unit batchnorm scale.
pub fn build_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let plan = config.channel_plan();
    let k = config.kernel;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();

    let mut cin = plan.input;
    for (i, &cout) in plan.low.iter().enumerate() {
        let prefix = low_prefix(i);
        add_conv(&mut params, &format!("{prefix}.conv"), cin, cout, k, &mut rng)?;
        params.add_batchnorm(&format!("{prefix}.bn"), cout)?;
        cin = cout;
    }
    add_conv(&mut params, "proj", cin, plan.packed_out, 1, &mut rng)?;
    add_conv(&mut params, "full.conv", plan.full_in, plan.full, k, &mut rng)?;
    params.add_batchnorm("full.bn", plan.full)?;
    add_conv(&mut params, "head", plan.full, plan.output, 1, &mut rng)?;

    let model = ModelParams { config, params };
    model.audit()?;
    Ok(model)
}

pub fn count_parameters<T: Scalar>(model: &ModelParams<T>) -> usize {
    model.params.num_trainable()
}

impl<T: Scalar> ModelParams<T> {
    /// Checks every weight shape against the channel plan.
    pub fn audit(&self) -> Result<()> {
        let plan = self.config.channel_plan();
        let k = self.config.kernel;
        let expect = |name: &str, shape: Shape| -> Result<()> {
            let got = self.params.get(name)?.tensor.shape();
            if got != shape {
                return Err(Error::Config(format!("`{name}` has shape {got}, channel plan requires {shape}")));
            }
            Ok(())
        };
        let mut cin = plan.input;
        for (i, &cout) in plan.low.iter().enumerate() {
            expect(&format!("{}.conv.weight", low_prefix(i)), Shape::new(cout, cin, k, k))?;
            cin = cout;
        }
        expect("proj.weight", Shape::new(plan.packed_out, cin, 1, 1))?;
        if plan.packed_out != 4 * plan.upsampled || plan.full_in != 2 * plan.upsampled {
            return Err(Error::Config(format!("inconsistent channel plan {plan:?}")));
        }
        expect("full.conv.weight", Shape::new(plan.full, plan.full_in, k, k))?;
        expect("head.weight", Shape::new(plan.output, plan.full, 1, 1))?;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { config: self.config, params: self.params.cast() }
    }
}

fn conv_block<T: Scalar>(
    model: &mut ModelParams<T>,
    tape: &mut Tape<T>,
    x: Var,
    prefix: &str,
    mode: Mode,
) -> Result<Var> {
    let pad = model.config.kernel / 2;
    let w = tape.param(&model.params, &format!("{prefix}.conv.weight"))?;
    let b = tape.param(&model.params, &format!("{prefix}.conv.bias"))?;
    let y = tape.conv2d(x, w, b, 1, pad)?;
    let bn = format!("{prefix}.bn");
    let gamma = tape.param(&model.params, &format!("{bn}.gamma"))?;
    let beta = tape.param(&model.params, &format!("{bn}.beta"))?;
    let mut stats = model.params.read_bn_stats(&bn)?;
    let y = tape.batchnorm2d(y, gamma, beta, &mut stats, mode, BN_MOMENTUM, BN_EPS)?;
    if mode == Mode::Train {
        model.params.write_bn_stats(&bn, &stats)?;
    }
    Ok(tape.relu(y)?)
}

fn pointwise<T: Scalar>(model: &ModelParams<T>, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&model.params, &format!("{prefix}.weight"))?;
    let b = tape.param(&model.params, &format!("{prefix}.bias"))?;
    Ok(tape.conv2d(x, w, b, 1, 0)?)
}

/// N x 3 x H x W color masks (R, G, B) for a batch.
fn mask_tensor<T: Scalar>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let masks = cfa_masks(CfaPattern::Rggb, h, w);
    let one: Vec<T> = masks.iter().flat_map(|m| m.iter().map(|v| T::lit(*v as f64))).collect();
    let data = (0..n).flat_map(|_| one.iter().copied()).collect();
    Tensor::new(Shape::new(n, 3, h, w), data).expect("sized by construction")
}

fn masked<T: Scalar>(tape: &mut Tape<T>, mosaic: Var, masks: &Tensor<T>) -> Result<Var> {
    let tiled = tape.concat(&[mosaic, mosaic, mosaic])?;
    Ok(tape.mul_const(tiled, masks)?)
}

/// Records the network on `tape` and returns the N x 3 x H x W output.
///
/// `primary`/`secondary` are N x 1 x H x W mosaics already on the tape;
/// `noise_levels` holds one value per batch item. Train mode updates the
/// batchnorm running statistics stored in `model`.
pub fn forward<T: Scalar>(
    model: &mut ModelParams<T>,
    tape: &mut Tape<T>,
    primary: Var,
    secondary: Option<Var>,
    noise_levels: &[f32],
    mode: Mode,
) -> Result<Var> {
    let cfg = model.config;
    let s = tape.shape(primary)?;
    if s.c != 1 || s.h % 2 != 0 || s.w % 2 != 0 || s.h < 2 || s.w < 2 {
        return Err(dims(format!("primary mosaic batch must be Nx1xHxW with even H, W; got {s}")));
    }
    match (cfg.ports, secondary) {
        (2, Some(sv)) => {
            let ss = tape.shape(sv)?;
            if ss != s {
                return Err(dims(format!("secondary mosaic {ss} does not match primary {s}")));
            }
        }
        (2, None) => return Err(dims("two-port model needs a secondary mosaic")),
        (_, Some(_)) => return Err(dims("single-port model takes no secondary mosaic")),
        _ => {}
    }
    if cfg.noise_channel && noise_levels.len() != s.n {
        return Err(dims(format!("{} noise levels for a batch of {}", noise_levels.len(), s.n)));
    }

    let ports: Vec<Var> = std::iter::once(primary).chain(secondary).collect();
    let mut f0_parts = Vec::with_capacity(3);
    for &p in &ports {
        f0_parts.push(tape.pixel_unshuffle(p, 2)?);
    }
    if cfg.noise_channel {
        let (hh, hw) = (s.h / 2, s.w / 2);
        let plane = Tensor::from_fn(Shape::new(s.n, 1, hh, hw), |n, _, _, _| T::lit(noise_levels[n] as f64));
        f0_parts.push(tape.constant(plane)?);
    }
    let mut x = tape.concat(&f0_parts)?;

    for i in 0..cfg.depth {
        x = conv_block(model, tape, x, &low_prefix(i), mode)?;
    }
    let packed = pointwise(model, tape, x, "proj")?;
    let upsampled = tape.pixel_shuffle(packed, 2)?;

    let masks = mask_tensor::<T>(s.n, s.h, s.w);
    let mut parts = Vec::with_capacity(2 * ports.len());
    for (k, &p) in ports.iter().enumerate() {
        parts.push(masked(tape, p, &masks)?);
        parts.push(tape.slice_channels(upsampled, 3 * k, 3)?);
    }
    let stacked = tape.concat(&parts)?;
    let features = conv_block(model, tape, stacked, "full", mode)?;
    pointwise(model, tape, features, "head")
}

/// Convenience wrapper: runs the network on mosaics and returns its output.
pub fn forward_mosaics<T: Scalar>(
    model: &mut ModelParams<T>,
    primary: &[BayerMosaic],
    secondary: Option<&[BayerMosaic]>,
    noise_levels: &[f32],
    mode: Mode,
) -> Result<Tensor<T>> {
    let stack = |ms: &[BayerMosaic]| -> Result<Tensor<T>> {
        let ts: Vec<_> = ms.iter().map(|m| m.to_tensor()).collect();
        Ok(Tensor::stack(&ts)?)
    };
    let mut tape = Tape::new();
    let p = tape.constant(stack(primary)?)?;
    let s = match secondary {
        Some(ms) => Some(tape.constant(stack(ms)?)?),
        None => None,
    };
    let out = forward(model, &mut tape, p, s, noise_levels, mode)?;
    Ok(tape.value(out)?.clone())
}
