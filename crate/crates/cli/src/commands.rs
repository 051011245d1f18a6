use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use serde::Serialize;
use serde_json::json;
use stereoisp::ablation::{rows_to_csv, run_ablation, AblationPlan, AblationRow, TABLE_VARIANTS};
use stereoisp::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stereoisp::dataset::{generate_toy_dataset, load_disparity_png, load_stereo_dataset, write_kitti_layout, Layout, StereoSample};
use stereoisp::gradcheck::run_suite;
use stereoisp::model::{ModelConfig, ModelParams};
use stereoisp::raw::{add_noise, bayer_mosaic, demosaic_bilinear, reportable_db, BayerMosaic, CfaPattern, NoiseModel};
use stereoisp::seed::{derive_seed, STREAM_NOISE_PRIMARY, STREAM_NOISE_SECONDARY};
use stereoisp::train::{
    evaluate, split_dataset, start_training, BlockMatchConfig, train_until, EpochRecord, ExperimentConfig, Init, SplitScheme, TrainState, Variant,
};
use stereoisp::warp::{estimate_disparity_blockmatch, warp_backward, FillPolicy, WarpMode};

use crate::args::*;
use crate::CliError;

/// Environment variable naming the default dataset root.
pub const DATA_ENV: &str = "STEREOISP_DATA";

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(command: Command) -> Result<()> {
    let name = command.name();
    match command {
        Command::Synth(a) => synth(merge(&a, a.config.as_ref(), name)?),
        Command::Warp(a) => warp(merge(&a, a.config.as_ref(), name)?),
        Command::Disparity(a) => disparity(merge(&a, a.config.as_ref(), name)?),
        Command::Train(a) => train(merge(&a, a.config.as_ref(), name)?),
        Command::Eval(a) => eval(merge(&a, a.config.as_ref(), name)?),
        Command::Ablate(a) => ablate(merge(&a, a.config.as_ref(), name)?),
        Command::Toygen(a) => toygen(merge(&a, a.config.as_ref(), name)?),
        Command::Gradcheck(a) => gradcheck(merge(&a, a.config.as_ref(), name)?),
    }
}

fn or<T: Clone>(slot: &mut Option<T>, default: T) -> T {
    slot.get_or_insert(default).clone()
}

fn required<T: Clone>(slot: &Option<T>, flag: &str) -> Result<T> {
    slot.clone().ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, text + "\n")
}

fn commit_id() -> String {
    Process::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// `manifest.json`: the fully resolved options of this run. Passing it back
/// through `--config` replays the run.
fn write_manifest(out: &Path, command: &str, resolved: &impl Serialize) -> Result<()> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "config": resolved,
            "version": env!("CARGO_PKG_VERSION"),
            "commit": commit_id(),
        }),
    )
}

fn noise_model(a: &mut NoiseArgs) -> Result<NoiseModel> {
    let kind = or(&mut a.noise, "poisson".into());
    let sigma = |a: &mut NoiseArgs| a.sigma.ok_or_else(|| CliError::Usage(format!("--sigma is required for {kind} noise")));
    let model = match kind.as_str() {
        "poisson" => NoiseModel::Poisson { photons: or(&mut a.photons, 10.0) },
        "gaussian" => NoiseModel::Gaussian { sigma: sigma(a)? },
        "poisson-gaussian" => NoiseModel::PoissonGaussian { photons: or(&mut a.photons, 10.0), sigma: sigma(a)? },
        other => return Err(CliError::Usage(format!("unknown noise model `{other}`"))),
    };
    model.validate()?;
    Ok(model)
}

fn model_config(a: &mut ModelArgs, ports: usize) -> Result<ModelConfig> {
    let preset = match or(&mut a.model, "desk".into()).as_str() {
        "desk" => ModelConfig::desk(),
        "full" => ModelConfig::full(),
        other => return Err(CliError::Usage(format!("unknown model preset `{other}` (desk or full)"))),
    };
    let config = ModelConfig {
        depth: or(&mut a.depth, preset.depth),
        width: or(&mut a.width, preset.width),
        kernel: or(&mut a.kernel, preset.kernel),
        ports,
        noise_channel: true,
    };
    config.validate()?;
    Ok(config)
}

/// Loads the dataset and splits it into (train, test); returns a label too.
fn load_data(a: &mut DataArgs) -> Result<(Vec<StereoSample>, Vec<StereoSample>, String)> {
    let env_root = std::env::var_os(DATA_ENV).map(PathBuf::from);
    let default_kind = if a.data.is_some() || env_root.is_some() { "kitti" } else { "toy" };
    let kind = or(&mut a.dataset, default_kind.into());
    let samples = match kind.as_str() {
        "toy" => generate_toy_dataset(
            or(&mut a.toy_count, 200),
            (or(&mut a.toy_height, 64), or(&mut a.toy_width, 128)),
            or(&mut a.toy_seed, 0),
            or(&mut a.toy_max_disp, 16),
        )?,
        "kitti" | "drivingstereo" => {
            let layout: Layout = parse_enum("layout", &kind)?;
            let root = match (&a.data, env_root) {
                (Some(r), _) => r.clone(),
                (None, Some(r)) => r,
                (None, None) => return Err(CliError::Usage(format!("--data is required for {kind} (or set {DATA_ENV})"))),
            };
            a.data = Some(root.clone());
            load_stereo_dataset(&root, layout, a.disparity_dir.as_deref())?
        }
        other => return Err(CliError::Usage(format!("unknown dataset `{other}` (toy, kitti or drivingstereo)"))),
    };
    let scheme = match or(&mut a.split, "kitti-160-40".into()).as_str() {
        "kitti-160-40" => SplitScheme::Kitti16040,
        "ratio" => SplitScheme::Ratio { ratio: or(&mut a.split_ratio, 0.8), seed: or(&mut a.split_seed, 0) },
        other => return Err(CliError::Usage(format!("unknown split `{other}` (kitti-160-40 or ratio)"))),
    };
    let (train, test) = split_dataset(&samples, scheme)?;
    Ok((train, test, kind))
}

/// Experiment settings shared by `train` and `ablate`.
fn experiment(hyper: &mut HyperArgs, model: &mut ModelArgs, noise: &mut NoiseArgs, variant: Variant, stage: u8) -> Result<ExperimentConfig> {
    let d = ExperimentConfig::desk(variant, stage);
    let patience = or(&mut hyper.patience, d.patience.unwrap_or(0));
    Ok(ExperimentConfig {
        stage,
        variant,
        patch: (or(&mut hyper.patch_height, d.patch.0), or(&mut hyper.patch_width, d.patch.1)),
        batch_size: or(&mut hyper.batch_size, d.batch_size),
        lr: or(&mut hyper.lr, d.lr),
        lr_decay_factor: or(&mut hyper.lr_decay_factor, d.lr_decay_factor),
        lr_decay_period: or(&mut hyper.lr_decay_period, d.lr_decay_period),
        epochs: d.epochs,
        patience: (patience > 0).then_some(patience),
        noise: noise_model(noise)?,
        seed: or(&mut hyper.seed, d.seed),
        eval_seed: or(&mut hyper.eval_seed, d.eval_seed),
        model: model_config(model, variant.ports())?,
        warp_mode: parse_enum("warp mode", &or(&mut hyper.warp_mode, "raw".into()))?,
        fill: parse_enum("fill policy", &or(&mut hyper.fill, "primary".into()))?,
        blockmatch: BlockMatchConfig {
            max_disp: or(&mut hyper.bm_max_disp, d.blockmatch.max_disp),
            block: or(&mut hyper.bm_block, d.blockmatch.block),
        },
        cold_start: false,
        degrade_guard_db: d.degrade_guard_db,
    })
}

fn progress(label: &str, r: &EpochRecord) {
    eprintln!("[{label}] epoch {:>4}  loss {:.6}  val {:.3} dB  lr {:.2e}", r.epoch, r.loss, reportable_db(r.val_psnr_db), r.lr);
}

fn weights_checkpoint(model: &ModelParams<f32>, metadata: serde_json::Value) -> Checkpoint<f32> {
    Checkpoint { model: model.clone(), best: None, optimizer: None, metadata }
}

fn train(mut a: TrainArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let variant: Variant = parse_enum("variant", &or(&mut a.variant, "warped-gt".into()))?;
    let stage = or(&mut a.stage, 1);
    let mut config = experiment(&mut a.hyper, &mut a.model, &mut a.noise, variant, stage)?;
    config.epochs = or(&mut a.epochs, config.epochs);
    config.cold_start = or(&mut a.cold_start, false);
    config.validate()?;
    let (train_set, test_set, dataset) = load_data(&mut a.data)?;

    let mut state = match (&a.resume, &a.init) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--resume and --init are mutually exclusive".into())),
        (Some(path), None) => {
            let state = TrainState::from_checkpoint(load_checkpoint(path)?)?;
            if state.model.config != config.model {
                return Err(CliError::Usage(config_diff("resume checkpoint", &state.model.config, &config.model)));
            }
            state
        }
        (None, Some(path)) => {
            let init = load_checkpoint::<f32>(path)?.model;
            if init.config != config.model {
                return Err(CliError::Usage(config_diff("init checkpoint", &init.config, &config.model)));
            }
            start_training(&config, &test_set, Init::From(init))?
        }
        (None, None) => start_training(&config, &test_set, Init::Fresh)?,
    };

    create_dir(&out)?;
    write_manifest(&out, "train", &a)?;
    let label = format!("{variant} stage {stage}");
    let meta = |state: &TrainState| {
        json!({ "variant": variant, "stage": stage, "dataset": dataset, "seed": config.seed, "best_epoch": state.report.best_epoch,
                "best_psnr_db": reportable_db(state.report.best_psnr_db) })
    };
    let mut saved_best = None;
    while state.epoch() < config.epochs {
        let before = state.epoch();
        train_until(&mut state, &config, &train_set, &test_set, before + 1, |r| progress(&label, r))?;
        if state.epoch() == before {
            break;
        }
        save_checkpoint(&out.join("last.ckpt"), &state.to_checkpoint()?)?;
        if saved_best != Some(state.report.best_epoch) {
            save_checkpoint(&out.join("best.ckpt"), &weights_checkpoint(&state.best, meta(&state)))?;
            saved_best = Some(state.report.best_epoch);
        }
    }
    if saved_best.is_none() {
        save_checkpoint(&out.join("best.ckpt"), &weights_checkpoint(&state.best, meta(&state)))?;
    }
    write_json(&out.join("report.json"), &state.report)?;
    write_file(&out.join("report.csv"), state.report.to_csv())?;
    println!(
        "{}",
        json!({ "variant": variant, "stage": stage, "epochs": state.epoch(), "best_epoch": state.report.best_epoch,
                "best_psnr_db": reportable_db(state.report.best_psnr_db), "stop_reason": state.report.stop_reason })
    );
    Ok(())
}

fn config_diff(what: &str, found: &ModelConfig, requested: &ModelConfig) -> String {
    let mut lines = vec![format!("model configuration does not match the {what}:")];
    let fields = [
        ("depth", found.depth, requested.depth),
        ("width", found.width, requested.width),
        ("kernel", found.kernel, requested.kernel),
        ("ports", found.ports, requested.ports),
        ("noise_channel", found.noise_channel as usize, requested.noise_channel as usize),
    ];
    for (name, f, r) in fields {
        if f != r {
            lines.push(format!("  {name}: checkpoint {f}, requested {r}"));
        }
    }
    lines.join("\n")
}

fn eval(mut a: EvalArgs) -> Result<()> {
    let path = required(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint::<f32>(&path)?;
    let found = ckpt.model.config;
    let default_variant = ckpt
        .metadata
        .get("variant")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| if found.ports == 1 { "baseline-single" } else { "warped-gt" }.into());
    let variant: Variant = parse_enum("variant", &or(&mut a.variant, default_variant))?;
    let model_given = a.model.model.is_some() || a.model.depth.is_some() || a.model.width.is_some() || a.model.kernel.is_some();
    if model_given {
        let requested = model_config(&mut a.model, variant.ports())?;
        if requested != found {
            return Err(CliError::Usage(config_diff("checkpoint", &found, &requested)));
        }
    } else if found.ports != variant.ports() {
        return Err(CliError::Usage(format!("variant {variant} needs a {}-port model, checkpoint has {} ports", variant.ports(), found.ports)));
    }

    let mut hyper = HyperArgs {
        eval_seed: a.eval_seed,
        warp_mode: a.warp_mode.clone(),
        fill: a.fill.clone(),
        bm_max_disp: a.bm_max_disp,
        bm_block: a.bm_block,
        ..Default::default()
    };
    let mut model_args = ModelArgs { depth: Some(found.depth), width: Some(found.width), kernel: Some(found.kernel), ..Default::default() };
    let config = experiment(&mut hyper, &mut model_args, &mut a.noise, variant, 2)?;
    (a.eval_seed, a.warp_mode, a.fill, a.bm_max_disp, a.bm_block) = (hyper.eval_seed, hyper.warp_mode, hyper.fill, hyper.bm_max_disp, hyper.bm_block);
    let (_, test_set, dataset) = load_data(&mut a.data)?;
    let report = evaluate(&ckpt.model, &test_set, variant, &config, config.eval_seed)?;

    if let Some(out) = &a.out {
        create_dir(out)?;
        write_manifest(out, "eval", &a)?;
        let mut csv = String::from("id,psnr_db\n");
        for s in &report.samples {
            csv.push_str(&format!("{},{:.6}\n", s.id, reportable_db(s.psnr_db)));
        }
        write_file(&out.join("eval.csv"), csv)?;
        write_json(&out.join("eval.json"), &json!({ "dataset": dataset, "report": report_view(&report) }))?;
    }
    println!("{}", json!({ "variant": variant, "dataset": dataset, "samples": report.samples.len(), "mean_psnr_db": reportable_db(report.mean_psnr_db) }));
    Ok(())
}

/// The report with infinite PSNRs replaced by the sentinel, so it stays
/// valid JSON.
fn report_view(r: &stereoisp::train::EvalReport) -> serde_json::Value {
    json!({
        "variant": r.variant,
        "mean_psnr_db": reportable_db(r.mean_psnr_db),
        "samples": r.samples.iter().map(|s| json!({ "id": s.id, "psnr_db": reportable_db(s.psnr_db) })).collect::<Vec<_>>(),
    })
}

#[derive(Serialize)]
struct AblationReport<'a> {
    rows: &'a [AblationRow],
    metadata: serde_json::Value,
}

fn ablate(mut a: AblateArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let base = experiment(&mut a.hyper, &mut a.model, &mut a.noise, Variant::WarpedGt, 1)?;
    let mut variants = TABLE_VARIANTS.to_vec();
    if or(&mut a.include_estimated, false) {
        variants.push(Variant::WarpedEstimated);
    }
    let plan = AblationPlan { base, stage1_epochs: or(&mut a.stage1_epochs, 30), stage2_epochs: or(&mut a.stage2_epochs, 20), variants };
    plan.stage1_config().validate()?;
    let save = or(&mut a.save_checkpoints, false);
    let (train_set, test_set, dataset) = load_data(&mut a.data)?;

    create_dir(&out)?;
    write_manifest(&out, "ablate", &a)?;
    let outcome = run_ablation(&plan, &train_set, &test_set, &dataset, &mut |label, r| progress(label, r))?;

    let reports = out.join("reports");
    create_dir(&reports)?;
    for run in outcome.stage1.iter().chain(&outcome.runs) {
        let name = if outcome.stage1.as_ref().is_some_and(|s| std::ptr::eq(s, run)) { "stage-1".to_string() } else { run.variant.to_string() };
        write_json(&reports.join(format!("{name}.json")), &run.report)?;
        write_file(&reports.join(format!("{name}.csv")), run.report.to_csv())?;
        if save {
            save_checkpoint(&out.join(format!("{name}.ckpt")), &weights_checkpoint(&run.model, json!({ "variant": run.variant, "ablation_run": name })))?;
        }
    }
    let csv = rows_to_csv(&outcome.rows);
    write_file(&out.join("ablation.csv"), &csv)?;
    let rows: Vec<AblationRow> =
        outcome.rows.iter().map(|r| AblationRow { mean_psnr_db: reportable_db(r.mean_psnr_db), ..r.clone() }).collect();
    let report = AblationReport {
        rows: &rows,
        metadata: json!({
            "plan": plan,
            "seeds": { "train": plan.base.seed, "eval": plan.base.eval_seed, "toy": a.data.toy_seed, "split": a.data.split_seed },
            "dataset": dataset,
            "commit": commit_id(),
        }),
    };
    write_json(&out.join("ablation.json"), &report)?;
    print!("{csv}");
    Ok(())
}

fn synth(mut a: SynthArgs) -> Result<()> {
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let layout: Layout = parse_enum("layout", &or(&mut a.layout, "kitti".into()))?;
    let seed = or(&mut a.seed, 0);
    let noise = noise_model(&mut a.noise)?;
    let samples = load_stereo_dataset(&input, layout, None)?;
    create_dir(&out)?;
    write_manifest(&out, "synth", &a)?;
    for (i, s) in samples.iter().enumerate() {
        let m = add_noise(&bayer_mosaic(&s.left, CfaPattern::Rggb)?, &noise, derive_seed(seed, &[i as u64, STREAM_NOISE_PRIMARY]))?;
        let sec = add_noise(&bayer_mosaic(&s.right, CfaPattern::Rggb)?, &noise, derive_seed(seed, &[i as u64, STREAM_NOISE_SECONDARY]))?;
        m.save_png(&out.join(format!("{}_primary.png", s.id)))?;
        sec.save_png(&out.join(format!("{}_secondary.png", s.id)))?;
        s.disparity.save_png(&out.join(format!("{}_disparity.png", s.id)))?;
        demosaic_bilinear(&m).save_png(&out.join(format!("{}_preview.png", s.id)))?;
        eprintln!("[synth] {} ({}/{})", s.id, i + 1, samples.len());
    }
    println!("{}", json!({ "samples": samples.len(), "out": out }));
    Ok(())
}

fn warp(mut a: WarpArgs) -> Result<()> {
    let secondary = BayerMosaic::load_png(&required(&a.secondary, "secondary")?)?;
    let disparity = load_disparity_png(&required(&a.disparity, "disparity")?)?;
    let out = required(&a.out, "out")?;
    let mode: WarpMode = parse_enum("warp mode", &or(&mut a.mode, "raw".into()))?;
    let fill: FillPolicy = parse_enum("fill policy", &or(&mut a.fill, "primary".into()))?;
    let primary = match &a.primary {
        Some(p) => Some(BayerMosaic::load_png(p)?),
        None if fill == FillPolicy::Primary => {
            return Err(CliError::Usage("--fill primary needs --primary (or use --fill zero)".into()));
        }
        None => None,
    };
    let result = warp_backward(&secondary, &disparity, mode, fill, primary.as_ref())?;
    create_dir(&out)?;
    write_manifest(&out, "warp", &a)?;
    result.image.save_png(&out.join("warped.png"))?;
    let (w, h) = (secondary.width() as u32, secondary.height() as u32);
    let mask = image::GrayImage::from_fn(w, h, |x, y| image::Luma([if result.coverage[(y * w + x) as usize] { 255 } else { 0 }]));
    let mask_path = out.join("coverage.png");
    mask.save(&mask_path).map_err(|e| CliError::Runtime(format!("{}: {e}", mask_path.display())))?;
    let covered = result.coverage.iter().filter(|c| **c).count();
    println!("{}", json!({ "covered": covered, "pixels": result.coverage.len() }));
    Ok(())
}

fn disparity(mut a: DisparityArgs) -> Result<()> {
    let left = BayerMosaic::load_png(&required(&a.left, "left")?)?;
    let right = BayerMosaic::load_png(&required(&a.right, "right")?)?;
    let out = required(&a.out, "out")?;
    let d = BlockMatchConfig::default();
    let map = estimate_disparity_blockmatch(&left, &right, or(&mut a.max_disp, d.max_disp), or(&mut a.block, d.block))?;
    create_dir(&out)?;
    write_manifest(&out, "disparity", &a)?;
    map.save_png(&out.join("disparity.png"))?;
    println!("{}", json!({ "valid": map.valid_count(), "pixels": map.height() * map.width() }));
    Ok(())
}

fn toygen(mut a: ToygenArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let samples = generate_toy_dataset(
        or(&mut a.count, 200),
        (or(&mut a.height, 64), or(&mut a.width, 128)),
        or(&mut a.seed, 0),
        or(&mut a.max_disp, 16),
    )?;
    create_dir(&out)?;
    write_kitti_layout(&out, &samples)?;
    write_manifest(&out, "toygen", &a)?;
    println!("{}", json!({ "samples": samples.len(), "out": out }));
    Ok(())
}

fn gradcheck(mut a: GradcheckArgs) -> Result<()> {
    let report = run_suite(or(&mut a.seed, 0))?;
    for c in &report.checks {
        eprintln!("{:<34} rel err {:.3e}  (tol {:.0e})  {}", c.name, c.rel_error, c.tolerance, if c.passed { "ok" } else { "FAILED" });
    }
    eprintln!("{} checks in {:.2}s", report.checks.len(), report.elapsed_secs);
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
