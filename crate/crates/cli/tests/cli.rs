use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stereoisp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereoisp")).args(args).env_remove("STEREOISP_DATA").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const TINY_DATA: &[&str] =
    &["--dataset", "toy", "--toy-count", "10", "--toy-height", "32", "--toy-width", "64", "--toy-max-disp", "8", "--split", "ratio"];
const TINY_MODEL: &[&str] = &["--depth", "1", "--width", "4", "--patch-height", "16", "--patch-width", "32", "--batch-size", "2"];

fn tiny(head: &[&str]) -> Vec<String> {
    head.iter().chain(TINY_DATA).chain(TINY_MODEL).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    stereoisp(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&stereoisp(&["--help"])), 0);
    assert_eq!(code(&stereoisp(&["--version"])), 0);
    assert_eq!(code(&stereoisp(&[])), 1);
    assert_eq!(code(&stereoisp(&["frobnicate"])), 1);
    assert_eq!(code(&stereoisp(&["train", "--epochs", "many"])), 1);
    // missing --out
    let o = stereoisp(&["toygen"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
    assert_eq!(code(&stereoisp(&["--threads", "0", "gradcheck"])), 1);
    // gaussian noise without sigma
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = stereoisp(&["train", "--noise", "gaussian", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--sigma"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = stereoisp(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = stereoisp(&["train", "--dataset", "kitti", "--data", dir.path().join("absent").to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn config_unknown_key_and_wrong_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"count": 3, "colour": "blue"}"#).unwrap();
    let o = stereoisp(&["toygen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("colour"));

    fs::write(&cfg, r#"{"command": "train", "config": {"count": 3}}"#).unwrap();
    let o = stereoisp(&["toygen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&o), 1);

    fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&stereoisp(&["toygen", "--config", cfg.to_str().unwrap()])), 1);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"count": 3, "height": 16, "width": 32, "max_disp": 4, "seed": 5}"#).unwrap();
    let out = dir.path().join("toy");
    let o = stereoisp(&["toygen", "--config", cfg.to_str().unwrap(), "--count", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = json_file(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "toygen");
    assert_eq!(manifest["config"]["count"], 4);
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(fs::read_dir(out.join("image_2")).unwrap().count(), 4);
}

#[test]
fn toygen_synth_warp_disparity() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    let o = stereoisp(&["toygen", "--count", "2", "--height", "32", "--width", "64", "--max-disp", "8", "--out", toy.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let synth = dir.path().join("synth");
    let o = stereoisp(&["synth", "--input", toy.to_str().unwrap(), "--out", synth.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for suffix in ["primary", "secondary", "disparity", "preview"] {
        assert!(synth.join(format!("000000_10_{suffix}.png")).exists(), "{suffix}");
    }
    let p = |s: &str| synth.join(format!("000000_10_{s}.png")).to_str().unwrap().to_string();

    let warped = dir.path().join("warped");
    let o = stereoisp(&["warp", "--secondary", &p("secondary"), "--disparity", &p("disparity"), "--primary", &p("primary"), "--out", warped.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(warped.join("warped.png").exists() && warped.join("coverage.png").exists());
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["covered"].as_u64().unwrap() > 0);

    // the default fill needs the primary mosaic
    let o = stereoisp(&["warp", "--secondary", &p("secondary"), "--disparity", &p("disparity"), "--out", warped.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let o = stereoisp(&["warp", "--secondary", &p("secondary"), "--disparity", &p("disparity"), "--fill", "zero", "--out", warped.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let disp = dir.path().join("disp");
    let o = stereoisp(&["disparity", "--left", &p("primary"), "--right", &p("secondary"), "--max-disp", "6", "--out", disp.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(disp.join("disparity.png").exists());
}

#[test]
fn train_eval_resume_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("s1");
    let mut args = tiny(&["train", "--stage", "1", "--variant", "warped-gt", "--epochs", "2", "--seed", "4"]);
    args.extend(["--out".into(), run_dir.to_str().unwrap().into()]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "report.json", "report.csv", "manifest.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(run_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,val_psnr,lr\n"));
    assert_eq!(csv.lines().count(), 3);
    let manifest = json_file(&run_dir.join("manifest.json"));
    assert_eq!(manifest["config"]["lr"], 1e-3);
    assert_eq!(manifest["config"]["noise"], "poisson");

    // replaying the manifest reproduces the run bit for bit
    let replay = dir.path().join("replay");
    let o = stereoisp(&["train", "--config", run_dir.join("manifest.json").to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(run_dir.join("best.ckpt")).unwrap(), fs::read(replay.join("best.ckpt")).unwrap());
    assert_eq!(fs::read(run_dir.join("report.csv")).unwrap(), fs::read(replay.join("report.csv")).unwrap());

    // one epoch, then resume to two: same result as the straight run
    let part = dir.path().join("part");
    let o = stereoisp(&["train", "--config", run_dir.join("manifest.json").to_str().unwrap(), "--epochs", "1", "--out", part.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = stereoisp(&[
        "train",
        "--config",
        run_dir.join("manifest.json").to_str().unwrap(),
        "--resume",
        part.join("last.ckpt").to_str().unwrap(),
        "--out",
        part.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(run_dir.join("best.ckpt")).unwrap(), fs::read(part.join("best.ckpt")).unwrap());
    assert_eq!(fs::read(run_dir.join("report.csv")).unwrap(), fs::read(part.join("report.csv")).unwrap());

    // stage 2 from the stage-1 weights
    let s2 = dir.path().join("s2");
    let mut args = tiny(&["train", "--stage", "2", "--variant", "unwarped-pair", "--epochs", "1"]);
    args.extend(["--init".into(), run_dir.join("best.ckpt").to_str().unwrap().into(), "--out".into(), s2.to_str().unwrap().into()]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // stage 2 without init or --cold-start is refused
    let args = tiny(&["train", "--stage", "2", "--epochs", "1", "--out", dir.path().join("cold").to_str().unwrap()]);
    let o = run(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cold"), "{}", stderr(&o));
    let args = tiny(&["train", "--stage", "2", "--epochs", "1", "--cold-start", "--out", dir.path().join("cold").to_str().unwrap()]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // eval takes the variant from the checkpoint
    let ev = dir.path().join("eval");
    let mut args: Vec<String> = ["eval", "--checkpoint", run_dir.join("best.ckpt").to_str().unwrap(), "--out", ev.to_str().unwrap()]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.extend(TINY_DATA.iter().map(|s| s.to_string()));
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["variant"], "warped-gt");
    assert_eq!(summary["samples"], 2);
    assert!(summary["mean_psnr_db"].as_f64().unwrap().is_finite());
    assert_eq!(fs::read_to_string(ev.join("eval.csv")).unwrap().lines().count(), 3);

    // a model flag that disagrees with the checkpoint is a usage error with a diff
    args.extend(["--width".into(), "8".into()]);
    let o = run(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("width: checkpoint 4, requested 8"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let mut args = tiny(&["ablate", "--seed", "7", "--stage1-epochs", "1", "--stage2-epochs", "1"]);
    args.extend(["--out".into(), out.to_str().unwrap().into()]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,dataset,mean_psnr_db,delta_pct");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline-single", "unwarped-pair", "warped-gt", "same-noise"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);
    let report = json_file(&out.join("ablation.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["metadata"]["seeds"]["train"], 7);
    assert!(out.join("reports/stage-1.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g/grad.json");
    let o = stereoisp(&["gradcheck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json_file(&out);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}
