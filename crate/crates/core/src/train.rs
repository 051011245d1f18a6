//! Two-stage training, patch sampling, dataset splits and evaluation.
//!
//! Stage 1 feeds the second port an independently noised copy of the
//! primary mosaic, so the network learns to merge two aligned observations.
//! Stage 2 replaces that copy with the secondary view, prepared according
//! to the experiment [`Variant`].

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stereoisp_tensor::{adam_step, AdamConfig, AdamState, Mode, Tape, Tensor, TensorError};

use crate::checkpoint::Checkpoint;
use crate::dataset::StereoSample;
use crate::error::{invalid, Error, Result};
use crate::model::{build_model, forward, ModelConfig, ModelParams};
use crate::raw::{add_noise, bayer_mosaic, psnr, BayerMosaic, CfaPattern, NoiseModel, RgbImage};
use crate::seed::{derive_seed, STREAM_NOISE_PRIMARY, STREAM_NOISE_SECONDARY, STREAM_PATCH, STREAM_SHUFFLE, STREAM_SPLIT};
use crate::warp::{estimate_disparity_blockmatch, warp_backward, DisparityMap, FillPolicy, WarpMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Single-port network on the primary mosaic only.
    BaselineSingle,
    /// Secondary mosaic fed as-is, without warping.
    UnwarpedPair,
    /// Secondary warped with the ground-truth disparity.
    WarpedGt,
    /// Secondary warped with block-matched disparity.
    WarpedEstimated,
    /// Two noise realizations of the primary (upper bound).
    SameNoise,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::BaselineSingle, Variant::UnwarpedPair, Variant::WarpedGt, Variant::WarpedEstimated, Variant::SameNoise];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineSingle => "baseline-single",
            Variant::UnwarpedPair => "unwarped-pair",
            Variant::WarpedGt => "warped-gt",
            Variant::WarpedEstimated => "warped-estimated",
            Variant::SameNoise => "same-noise",
        }
    }

    pub fn ports(self) -> usize {
        if self == Variant::BaselineSingle {
            1
        } else {
            2
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| invalid(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What the second port receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PortFeed {
    None,
    NoisedPrimary,
    RawSecondary,
    WarpedGt,
    WarpedEstimated,
}

fn port_feed(variant: Variant, stage: u8) -> PortFeed {
    match (variant, stage) {
        (Variant::BaselineSingle, _) => PortFeed::None,
        (_, 1) | (Variant::SameNoise, _) => PortFeed::NoisedPrimary,
        (Variant::UnwarpedPair, _) => PortFeed::RawSecondary,
        (Variant::WarpedGt, _) => PortFeed::WarpedGt,
        (Variant::WarpedEstimated, _) => PortFeed::WarpedEstimated,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMatchConfig {
    /// Search range in half-resolution steps.
    pub max_disp: usize,
    pub block: usize,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        BlockMatchConfig { max_disp: 12, block: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stage: u8,
    pub variant: Variant,
    /// Patch height and width (full resolution).
    pub patch: (usize, usize),
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays; 0 disables decay.
    pub lr_decay_period: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Noise seed used for validation, fixed across epochs.
    pub eval_seed: u64,
    pub model: ModelConfig,
    pub warp_mode: WarpMode,
    pub fill: FillPolicy,
    pub blockmatch: BlockMatchConfig,
    /// Permit stage 2 without stage-1 weights.
    pub cold_start: bool,
    /// Stage 2 from stage-1 weights stops once validation PSNR falls this
    /// far below its starting value.
    pub degrade_guard_db: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 32x64 patches, batch 4, lr 1e-3, shot noise at
    /// 10 photons.
    pub fn desk(variant: Variant, stage: u8) -> Self {
        ExperimentConfig {
            stage,
            variant,
            patch: (32, 64),
            batch_size: 4,
            lr: 1e-3,
            lr_decay_factor: 10.0,
            lr_decay_period: 0,
            epochs: 30,
            patience: Some(20),
            noise: NoiseModel::Poisson { photons: 10.0 },
            seed: 0,
            eval_seed: 0xE7A1,
            model: ModelConfig::desk().with_ports(variant.ports()),
            warp_mode: WarpMode::Raw,
            fill: FillPolicy::Primary,
            blockmatch: BlockMatchConfig::default(),
            cold_start: false,
            degrade_guard_db: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.stage) {
            return fail(format!("stage must be 1 or 2, got {}", self.stage));
        }
        let (p, r) = self.patch;
        if p < 2 || r < 2 || p % 2 != 0 || r % 2 != 0 {
            return fail(format!("patch dimensions must be even, got {p}x{r}"));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.lr_decay_period > 0 && !(self.lr_decay_factor >= 1.0) {
            return fail(format!("lr decay factor must be >= 1, got {}", self.lr_decay_factor));
        }
        if self.model.ports != self.variant.ports() {
            return fail(format!(
                "variant {} needs a {}-port model, config has {} ports",
                self.variant,
                self.variant.ports(),
                self.model.ports
            ));
        }
        self.model.validate()?;
        self.noise.validate()?;
        Ok(())
    }

    /// Learning rate at a 0-based epoch: `lr / factor^(epoch / period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_period == 0 {
            return self.lr;
        }
        self.lr / self.lr_decay_factor.powi((epoch / self.lr_decay_period) as i32)
    }

    fn feed(&self) -> PortFeed {
        port_feed(self.variant, self.stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum SplitScheme {
    /// First 160 samples (sorted by id) train, the rest test.
    Kitti16040,
    /// Seeded random split with `ratio` of the samples in the training set.
    Ratio { ratio: f64, seed: u64 },
}

/// Disjoint, exhaustive, deterministic train/test split. Both halves keep
/// id order.
pub fn split_dataset(samples: &[StereoSample], scheme: SplitScheme) -> Result<(Vec<StereoSample>, Vec<StereoSample>)> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|a, b| samples[*a].id.cmp(&samples[*b].id));
    let n_train = match scheme {
        SplitScheme::Kitti16040 => 160.min(samples.len()),
        SplitScheme::Ratio { ratio, seed } => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(invalid(format!("split ratio must lie in [0, 1], got {ratio}")));
            }
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SPLIT])));
            (ratio * samples.len() as f64).round() as usize
        }
    };
    if n_train == 0 || n_train == samples.len() {
        return Err(Error::Dataset(format!(
            "split of {} samples leaves an empty {} set",
            samples.len(),
            if n_train == 0 { "training" } else { "test" }
        )));
    }
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    let by_id = |a: &usize, b: &usize| samples[*a].id.cmp(&samples[*b].id);
    train.sort_by(by_id);
    test.sort_by(by_id);
    Ok((train.into_iter().map(|i| samples[i].clone()).collect(), test.into_iter().map(|i| samples[i].clone()).collect()))
}

/// Even top-left offset of a patch, uniform over the valid range.
pub fn patch_offset(seed: u64, epoch: usize, index: usize, size: (usize, usize), patch: (usize, usize)) -> Result<(usize, usize)> {
    let ((h, w), (p, r)) = (size, patch);
    if p > h || r > w {
        return Err(Error::Dataset(format!("image {h}x{w} is smaller than patch {p}x{r}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_PATCH, epoch as u64, index as u64]));
    let y = 2 * rng.random_range(0..=(h - p) / 2);
    let x = 2 * rng.random_range(0..=(w - r) / 2);
    Ok((y, x))
}

/// Congruent crops of one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCrop {
    pub sample: usize,
    pub offset: (usize, usize),
    pub primary: BayerMosaic,
    pub secondary: BayerMosaic,
    pub disparity: DisparityMap,
    pub target: RgbImage,
}

/// Draws patch windows for `indices` and crops the clean mosaics, the
/// disparity and the RGB target at the same even offset.
pub fn sample_patch_batch(
    samples: &[StereoSample],
    indices: &[usize],
    patch: (usize, usize),
    seed: u64,
    epoch: usize,
) -> Result<Vec<PatchCrop>> {
    indices
        .iter()
        .map(|&i| {
            let s = samples.get(i).ok_or_else(|| invalid(format!("sample index {i} out of range")))?;
            let (y, x) = patch_offset(seed, epoch, i, (s.height(), s.width()), patch)?;
            let (p, r) = patch;
            Ok(PatchCrop {
                sample: i,
                offset: (y, x),
                primary: bayer_mosaic(&s.left, CfaPattern::Rggb)?.crop(y, x, p, r)?,
                secondary: bayer_mosaic(&s.right, CfaPattern::Rggb)?.crop(y, x, p, r)?,
                disparity: s.disparity.crop(y, x, p, r)?,
                target: s.left.crop(y, x, p, r)?,
            })
        })
        .collect()
}

/// Clean mosaics computed once per sample.
struct Prepared<'a> {
    sample: &'a StereoSample,
    primary: BayerMosaic,
    secondary: BayerMosaic,
}

fn prepare(samples: &[StereoSample]) -> Result<Vec<Prepared<'_>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                sample: s,
                primary: bayer_mosaic(&s.left, CfaPattern::Rggb)?,
                secondary: bayer_mosaic(&s.right, CfaPattern::Rggb)?,
            })
        })
        .collect()
}

/// Network inputs for one full-size sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PortInputs {
    pub primary: BayerMosaic,
    pub secondary: Option<BayerMosaic>,
}

#[allow(clippy::too_many_arguments)]
fn port_inputs(
    p: &Prepared<'_>,
    feed: PortFeed,
    noise: &NoiseModel,
    noise_seed: u64,
    warp_mode: WarpMode,
    fill: FillPolicy,
    bm: BlockMatchConfig,
) -> Result<PortInputs> {
    let primary = add_noise(&p.primary, noise, derive_seed(noise_seed, &[STREAM_NOISE_PRIMARY]))?;
    let second_seed = derive_seed(noise_seed, &[STREAM_NOISE_SECONDARY]);
    let secondary = match feed {
        PortFeed::None => None,
        PortFeed::NoisedPrimary => Some(add_noise(&p.primary, noise, second_seed)?),
        PortFeed::RawSecondary => Some(add_noise(&p.secondary, noise, second_seed)?),
        PortFeed::WarpedGt | PortFeed::WarpedEstimated => {
            let s = add_noise(&p.secondary, noise, second_seed)?;
            let estimated;
            let disparity = if feed == PortFeed::WarpedGt {
                &p.sample.disparity
            } else {
                estimated = estimate_disparity_blockmatch(&primary, &s, bm.max_disp, bm.block)?;
                &estimated
            };
            Some(warp_backward(&s, disparity, warp_mode, fill, Some(&primary))?.image)
        }
    };
    Ok(PortInputs { primary, secondary })
}

/// Inputs the network sees for `sample` under a variant and stage; exposed
/// for inspection and tests.
pub fn variant_inputs(sample: &StereoSample, config: &ExperimentConfig, noise_seed: u64) -> Result<PortInputs> {
    let prepared = prepare(std::slice::from_ref(sample))?;
    port_inputs(&prepared[0], config.feed(), &config.noise, noise_seed, config.warp_mode, config.fill, config.blockmatch)
}

struct Batch {
    primary: Tensor<f32>,
    secondary: Option<Tensor<f32>>,
    target: Tensor<f32>,
    noise_levels: Vec<f32>,
}

fn assemble(items: Vec<(PortInputs, RgbImage)>, level: f32) -> Result<Batch> {
    let n = items.len();
    let primary = Tensor::stack(&items.iter().map(|(i, _)| i.primary.to_tensor()).collect::<Vec<_>>())?;
    let secondary = if items[0].0.secondary.is_some() {
        let ts: Vec<_> = items.iter().map(|(i, _)| i.secondary.as_ref().expect("uniform batch").to_tensor()).collect();
        Some(Tensor::stack(&ts)?)
    } else {
        None
    };
    let target = Tensor::stack(&items.iter().map(|(_, t)| t.to_tensor()).collect::<Vec<_>>())?;
    Ok(Batch { primary, secondary, target, noise_levels: vec![level; n] })
}

fn run_model(model: &mut ModelParams<f32>, batch: &Batch, mode: Mode) -> Result<(Tape<f32>, stereoisp_tensor::Var, stereoisp_tensor::Var)> {
    let mut tape = Tape::new();
    let p = tape.constant(batch.primary.clone())?;
    let s = match &batch.secondary {
        Some(t) => Some(tape.constant(t.clone())?),
        None => None,
    };
    let out = forward(model, &mut tape, p, s, &batch.noise_levels, mode)?;
    let target = tape.constant(batch.target.clone())?;
    Ok((tape, out, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePsnr {
    pub id: String,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub mean_psnr_db: f64,
    pub samples: Vec<SamplePsnr>,
}

/// Mean PSNR (MAX = 1) of the clamped network output over full images.
///
/// Uses the stage-2 inputs of `variant` (two noise realizations of the
/// primary for `same-noise`).
pub fn evaluate(
    model: &ModelParams<f32>,
    dataset: &[StereoSample],
    variant: Variant,
    config: &ExperimentConfig,
    noise_seed: u64,
) -> Result<EvalReport> {
    evaluate_feed(model, dataset, variant, port_feed(variant, 2), config, noise_seed)
}

fn evaluate_feed(
    model: &ModelParams<f32>,
    dataset: &[StereoSample],
    variant: Variant,
    feed: PortFeed,
    config: &ExperimentConfig,
    noise_seed: u64,
) -> Result<EvalReport> {
    if model.config.ports != variant.ports() {
        return Err(Error::Config(format!(
            "variant {variant} needs a {}-port model, got {}",
            variant.ports(),
            model.config.ports
        )));
    }
    let mut model = model.clone();
    let level = config.noise.level();
    evaluate_feed_with(dataset, variant, feed, config, noise_seed, |sample, input| {
        let batch = assemble(vec![(input, sample.left.clone())], level)?;
        let (tape, out, _) = run_model(&mut model, &batch, Mode::Eval)?;
        RgbImage::from_tensor_clamped(tape.value(out)?, 0)
    })
}

/// [`evaluate`] with an arbitrary reconstruction in place of the network.
pub fn evaluate_with(
    dataset: &[StereoSample],
    variant: Variant,
    config: &ExperimentConfig,
    noise_seed: u64,
    predict: impl FnMut(&StereoSample, PortInputs) -> Result<RgbImage>,
) -> Result<EvalReport> {
    evaluate_feed_with(dataset, variant, port_feed(variant, 2), config, noise_seed, predict)
}

fn evaluate_feed_with(
    dataset: &[StereoSample],
    variant: Variant,
    feed: PortFeed,
    config: &ExperimentConfig,
    noise_seed: u64,
    mut predict: impl FnMut(&StereoSample, PortInputs) -> Result<RgbImage>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let prepared = prepare(dataset)?;
    let inputs: Vec<PortInputs> = prepared
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            port_inputs(p, feed, &config.noise, derive_seed(noise_seed, &[i as u64]), config.warp_mode, config.fill, config.blockmatch)
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(dataset.len());
    for (input, s) in inputs.into_iter().zip(dataset) {
        let rgb = predict(s, input)?;
        samples.push(SamplePsnr { id: s.id.clone(), psnr_db: psnr(&rgb, &s.left, 1.0)? });
    }
    let mean = samples.iter().map(|s| s.psnr_db).sum::<f64>() / samples.len() as f64;
    Ok(EvalReport { variant, mean_psnr_db: mean, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub loss: f64,
    pub val_psnr_db: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub stage: u8,
    /// Validation PSNR of the initial weights (stage 2 from stage 1 only).
    pub initial_psnr_db: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the best validation PSNR; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_psnr_db: f64,
    pub stop_reason: String,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// CSV rows `epoch,loss,val_psnr,lr` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_psnr,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.8},{:.6},{:e}\n", e.epoch, e.loss, crate::raw::reportable_db(e.val_psnr_db), e.lr));
        }
        out
    }

    /// First epoch whose validation PSNR reaches `target`; 0 when the
    /// initial weights already do.
    pub fn epochs_to_reach(&self, target_db: f64) -> Option<usize> {
        if self.initial_psnr_db.is_some_and(|p| p >= target_db) {
            return Some(0);
        }
        self.epochs.iter().find(|e| e.val_psnr_db >= target_db).map(|e| e.epoch)
    }
}

const BUDGET_REACHED: &str = "epoch budget reached";

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    pub best: ModelParams<f32>,
    pub report: TrainReport,
    pub epochs_since_best: usize,
    pub finished: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeMeta {
    report: TrainReport,
    epochs_since_best: usize,
    finished: bool,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint<f32>> {
        let meta = ResumeMeta { report: self.report.clone(), epochs_since_best: self.epochs_since_best, finished: self.finished };
        Ok(Checkpoint {
            model: self.model.clone(),
            best: Some(self.best.params.clone()),
            optimizer: Some(self.optimizer.clone()),
            metadata: serde_json::json!({ "train_state": serde_json::to_value(meta)? }),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<f32>) -> Result<Self> {
        let meta: ResumeMeta = serde_json::from_value(
            ckpt.metadata.get("train_state").cloned().ok_or_else(|| Error::Config("checkpoint has no training state".into()))?,
        )?;
        let optimizer = ckpt.optimizer.ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let best = ckpt.best.ok_or_else(|| Error::Config("checkpoint has no best weights".into()))?;
        Ok(TrainState {
            best: ModelParams { config: ckpt.model.config, params: best },
            model: ckpt.model,
            optimizer,
            report: meta.report,
            epochs_since_best: meta.epochs_since_best,
            finished: meta.finished,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.report.epochs.len()
    }
}

/// Where stage weights come from.
pub enum Init {
    /// Fresh weights from `config.seed`.
    Fresh,
    /// Stage-1 (or any compatible) weights.
    From(ModelParams<f32>),
}

/// Sets up a training run; see [`train_until`] to run it.
pub fn start_training(config: &ExperimentConfig, val: &[StereoSample], init: Init) -> Result<TrainState> {
    config.validate()?;
    let (model, warm) = match init {
        Init::Fresh => {
            if config.stage == 2 && config.variant != Variant::BaselineSingle && !config.cold_start {
                return Err(Error::Config("stage 2 needs stage-1 weights or an explicit cold start".into()));
            }
            (build_model::<f32>(config.model, config.seed)?, false)
        }
        Init::From(m) => {
            if m.config != config.model {
                return Err(Error::Config(format!("initial weights built for {:?}, experiment uses {:?}", m.config, config.model)));
            }
            (m, true)
        }
    };
    let initial_psnr_db = if warm && config.stage == 2 {
        Some(evaluate_feed(&model, val, config.variant, config.feed(), config, config.eval_seed)?.mean_psnr_db)
    } else {
        None
    };
    Ok(TrainState {
        optimizer: AdamState::new(&model.params, AdamConfig::default()),
        best: model.clone(),
        model,
        report: TrainReport {
            variant: config.variant,
            stage: config.stage,
            initial_psnr_db,
            epochs: Vec::new(),
            best_epoch: 0,
            best_psnr_db: initial_psnr_db.unwrap_or(f64::NEG_INFINITY),
            stop_reason: String::new(),
            wall_clock_secs: 0.0,
        },
        epochs_since_best: 0,
        finished: false,
    })
}

fn diverged(e: Error, epoch: usize, lr: f64) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged { epoch, lr },
        other => other,
    }
}

/// Trains until `until_epoch` epochs have completed (capped by
/// `config.epochs`) or a stopping rule fires.
pub fn train_until(
    state: &mut TrainState,
    config: &ExperimentConfig,
    train: &[StereoSample],
    val: &[StereoSample],
    until_epoch: usize,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<()> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    for s in train {
        if s.height() < config.patch.0 || s.width() < config.patch.1 {
            return Err(Error::Dataset(format!(
                "sample `{}` ({}x{}) is smaller than patch {}x{}",
                s.id,
                s.height(),
                s.width(),
                config.patch.0,
                config.patch.1
            )));
        }
    }
    let prepared = prepare(train)?;
    let feed = config.feed();
    let level = config.noise.level();
    let (p, r) = config.patch;
    let until = until_epoch.min(config.epochs);
    let started = Instant::now();
    // a run that only ran out of epochs may be extended
    if state.finished && state.report.stop_reason == BUDGET_REACHED && state.epoch() < config.epochs {
        state.finished = false;
        state.report.stop_reason.clear();
    }

    while !state.finished && state.epoch() < until {
        let epoch = state.epoch();
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64])));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items = chunk
                .par_iter()
                .map(|&i| {
                    let pr = &prepared[i];
                    let noise_seed = derive_seed(config.seed, &[epoch as u64, i as u64]);
                    let inputs = port_inputs(pr, feed, &config.noise, noise_seed, config.warp_mode, config.fill, config.blockmatch)?;
                    let (y, x) = patch_offset(config.seed, epoch, i, (pr.sample.height(), pr.sample.width()), config.patch)?;
                    let crop = PortInputs {
                        primary: inputs.primary.crop(y, x, p, r)?,
                        secondary: inputs.secondary.map(|s| s.crop(y, x, p, r)).transpose()?,
                    };
                    Ok((crop, pr.sample.left.crop(y, x, p, r)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = assemble(items, level)?;

            let step = |state: &mut TrainState| -> Result<f64> {
                state.model.params.zero_grad();
                let (mut tape, out, target) = run_model(&mut state.model, &batch, Mode::Train)?;
                let loss = tape.mse_loss(out, target)?;
                let value = tape.value(loss)?.item()? as f64;
                tape.backward_into(loss, &mut state.model.params)?;
                adam_step(&mut state.model.params, &mut state.optimizer, lr)?;
                Ok(value)
            };
            let value = step(state).map_err(|e| diverged(e, epoch + 1, lr))?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, lr });
            }
            loss_sum += value * chunk.len() as f64;
        }

        let val_psnr = evaluate_feed(&state.model, val, config.variant, feed, config, config.eval_seed)?.mean_psnr_db;
        let record = EpochRecord { epoch: epoch + 1, loss: loss_sum / train.len() as f64, val_psnr_db: val_psnr, lr };
        progress(&record);
        state.report.epochs.push(record);

        if val_psnr > state.report.best_psnr_db {
            state.report.best_psnr_db = val_psnr;
            state.report.best_epoch = epoch + 1;
            state.best = state.model.clone();
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
        }
        if let Some(initial) = state.report.initial_psnr_db {
            if val_psnr < initial - config.degrade_guard_db {
                state.finished = true;
                state.report.stop_reason = format!("validation PSNR fell more than {} dB below its start", config.degrade_guard_db);
            }
        }
        if config.patience.is_some_and(|pat| state.epochs_since_best >= pat) {
            state.finished = true;
            state.report.stop_reason = "validation plateau".into();
        }
    }
    if !state.finished && state.epoch() >= config.epochs {
        state.finished = true;
        state.report.stop_reason = BUDGET_REACHED.into();
    }
    state.report.wall_clock_secs += started.elapsed().as_secs_f64();
    Ok(())
}

/// Runs a full training stage. Returns the best-validation weights and the
/// report.
pub fn train(
    config: &ExperimentConfig,
    train_set: &[StereoSample],
    val_set: &[StereoSample],
    init: Init,
    progress: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<f32>, TrainReport)> {
    let mut state = start_training(config, val_set, init)?;
    train_until(&mut state, config, train_set, val_set, config.epochs, progress)?;
    Ok((state.best, state.report))
}
