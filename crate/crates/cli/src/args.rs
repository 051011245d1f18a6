//! Command-line arguments. Every option is optional so a JSON config can
//! supply it; flags given on the command line win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "stereoisp", version, about = "Stereo raw image processing: synthesis, warping, training and evaluation")]
pub struct Cli {
    /// Worker threads for data preparation; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn an RGB stereo dataset into noisy Bayer mosaic pairs.
    Synth(SynthArgs),
    /// Warp a secondary mosaic onto the primary view.
    Warp(WarpArgs),
    /// Estimate disparity between two mosaics by block matching.
    Disparity(DisparityArgs),
    /// Train a network (one stage).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Train and compare the ablation variants under one seed.
    Ablate(AblateArgs),
    /// Write a synthetic stereo dataset in KITTI layout.
    Toygen(ToygenArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Warp(_) => "warp",
            Command::Disparity(_) => "disparity",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Toygen(_) => "toygen",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

/// Overlays `flags` on the JSON config at `path`.
///
/// The file may be a bare options object or a run manifest with `command`
/// and `config` keys.
pub fn merge<A: Args + Serialize + DeserializeOwned>(flags: &A, config: Option<&PathBuf>, command: &str) -> Result<A, CliError> {
    let mut base = match config {
        None => Value::Object(Default::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let value: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
            match value {
                Value::Object(mut o) if o.contains_key("command") && o.contains_key("config") => {
                    let found = o.get("command").and_then(Value::as_str).unwrap_or_default().to_string();
                    if found != command {
                        return Err(CliError::Usage(format!("manifest {} is for `{found}`, not `{command}`", path.display())));
                    }
                    o.remove("config").unwrap_or_default()
                }
                other => other,
            }
        }
    };
    let Value::Object(over) = serde_json::to_value(flags).expect("arguments serialize") else {
        unreachable!("argument structs serialize to objects")
    };
    let Value::Object(obj) = &mut base else {
        return Err(CliError::Usage("config must be a JSON object".into()));
    };
    obj.remove("config");
    let known: Vec<String> = A::augment_args(clap::Command::new("args")).get_arguments().map(|a| a.get_id().to_string()).collect();
    if let Some(k) = obj.keys().find(|k| !known.contains(k)) {
        return Err(CliError::Usage(format!("unknown config key `{k}` for `{command}`")));
    }
    for (k, v) in over {
        if !v.is_null() {
            obj.insert(k, v);
        }
    }
    serde_json::from_value(base).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

/// Parses a kebab/lowercase enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| CliError::Usage(format!("unknown {what} `{s}`")))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseArgs {
    /// Noise model: poisson, gaussian or poisson-gaussian.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<String>,
    /// Expected photons at full scale.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photons: Option<f64>,
    /// Read-noise standard deviation (normalized units).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DataArgs {
    /// toy (generated in memory), kitti or drivingstereo.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Dataset root; defaults to $STEREOISP_DATA.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Disparity folder overriding the layout default (e.g. disp_noc_0).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disparity_dir: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_count: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_max_disp: Option<usize>,
    /// kitti-160-40 or ratio.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArgs {
    /// desk (depth 4, width 16) or full (depth 15, width 64).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_factor: Option<f64>,
    /// Epochs between decays; 0 keeps the rate constant.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_period: Option<usize>,
    /// Plateau patience in epochs; 0 disables early stopping.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    /// Training seed (weights, patches, noise).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Fixed noise seed for validation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_seed: Option<u64>,
    /// raw or packed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warp_mode: Option<String>,
    /// primary or zero.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<String>,
    /// Block-matching search range in half-resolution steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bm_max_disp: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bm_block: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    /// Dataset root with RGB stereo pairs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// kitti or drivingstereo.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    /// Secondary mosaic (16-bit PNG).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub secondary: Option<PathBuf>,
    /// Disparity map (16-bit PNG, value / 256).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disparity: Option<PathBuf>,
    /// Primary mosaic, required for --fill primary.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub primary: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DisparityArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub left: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub right: Option<PathBuf>,
    /// Search range in half-resolution steps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_disp: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    /// baseline-single, unwarped-pair, warped-gt, warped-estimated or same-noise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Checkpoint to initialize from (stage-1 weights for stage 2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Continue an interrupted run from its `last.ckpt`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Allow stage 2 from fresh weights.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cold_start: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warp_mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bm_max_disp: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bm_block: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_epochs: Option<usize>,
    /// Add the block-matched (warped-estimated) variant as a fifth row.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_estimated: Option<bool>,
    /// Also save each variant's best weights.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_checkpoints: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ToygenArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_disp: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}
