use std::sync::OnceLock;

use stereoisp::checkpoint::{load_checkpoint, save_checkpoint};
use stereoisp::dataset::{generate_toy_dataset, StereoSample};
use stereoisp::model::ModelParams;
use stereoisp::raw::RgbImage;
use stereoisp::train::*;
use stereoisp::Error;

fn toy() -> &'static [StereoSample] {
    static DATA: OnceLock<Vec<StereoSample>> = OnceLock::new();
    DATA.get_or_init(|| generate_toy_dataset(24, (32, 64), 21, 8).unwrap())
}

fn small_config(variant: Variant, stage: u8) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(variant, stage);
    c.model.depth = 2;
    c.model.width = 4;
    c.patch = (16, 32);
    c.epochs = 4;
    c
}

fn param_bits(m: &ModelParams<f32>) -> Vec<u32> {
    m.params.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn kitti_split_sizes() {
    let data = generate_toy_dataset(200, (16, 32), 1, 4).unwrap();
    let (train, test) = split_dataset(&data, SplitScheme::Kitti16040).unwrap();
    assert_eq!((train.len(), test.len()), (160, 40));
    assert_eq!(train.last().unwrap().id, "000159_10");
    assert_eq!(test[0].id, "000160_10");
}

#[test]
fn ratio_split_is_deterministic_disjoint_and_exhaustive() {
    let data = generate_toy_dataset(10, (16, 32), 1, 4).unwrap();
    let scheme = SplitScheme::Ratio { ratio: 0.8, seed: 1 };
    let (a_train, a_test) = split_dataset(&data, scheme).unwrap();
    let (b_train, b_test) = split_dataset(&data, scheme).unwrap();
    assert_eq!((a_train.len(), a_test.len()), (8, 2));
    assert_eq!(a_train, b_train);
    assert_eq!(a_test, b_test);
    let mut ids: Vec<_> = a_train.iter().chain(&a_test).map(|s| s.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 10);

    assert!(split_dataset(&data, SplitScheme::Ratio { ratio: 1.0, seed: 1 }).is_err());
    assert!(split_dataset(&data, SplitScheme::Ratio { ratio: 0.0, seed: 1 }).is_err());
    assert!(split_dataset(&[], SplitScheme::Kitti16040).is_err());
    assert!(split_dataset(&data, SplitScheme::Kitti16040).is_err());
}

#[test]
fn patch_offsets_are_even() {
    for i in 0..1000 {
        let (y, x) = patch_offset(3, i / 100, i, (64, 128), (30, 50)).unwrap();
        assert!(y % 2 == 0 && x % 2 == 0);
        assert!(y + 30 <= 64 && x + 50 <= 128);
    }
    assert!(patch_offset(0, 0, 0, (16, 32), (18, 32)).is_err());
}

#[test]
fn patch_batches_are_deterministic_and_congruent() {
    let data = toy();
    let idx = [0, 3, 5, 7];
    let a = sample_patch_batch(data, &idx, (16, 24), 4, 2).unwrap();
    let b = sample_patch_batch(data, &idx, (16, 24), 4, 2).unwrap();
    assert_eq!(a, b);
    let c = sample_patch_batch(data, &idx, (16, 24), 4, 3).unwrap();
    assert_ne!(a.iter().map(|p| p.offset).collect::<Vec<_>>(), c.iter().map(|p| p.offset).collect::<Vec<_>>());
    for p in &a {
        let s = &data[p.sample];
        let (y0, x0) = p.offset;
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..24 {
                    assert_eq!(p.target.get(c, y, x), s.left.get(c, y0 + y, x0 + x));
                }
            }
        }
        for y in 0..16 {
            for x in 0..24 {
                assert_eq!(p.primary.get(y, x), s.left.get(stereoisp::raw::CfaPattern::Rggb.color_at(y, x), y0 + y, x0 + x));
                let d = s.disparity.get(y0 + y, x0 + x).filter(|d| *d < 24.0);
                assert_eq!(p.disparity.get(y, x), d);
            }
        }
    }
    assert!(sample_patch_batch(data, &[0], (34, 24), 4, 2).is_err());
}

#[test]
fn learning_rate_schedule() {
    let mut c = ExperimentConfig::desk(Variant::WarpedGt, 1);
    c.lr = 1e-4;
    c.lr_decay_factor = 10.0;
    c.lr_decay_period = 100;
    assert_eq!(c.lr_at(0), 1e-4);
    assert_eq!(c.lr_at(99), 1e-4);
    assert!((c.lr_at(100) - 1e-5).abs() < 1e-18);
    assert!((c.lr_at(200) - 1e-6).abs() < 1e-18);
}

#[test]
fn config_validation() {
    let mut c = small_config(Variant::WarpedGt, 2);
    c.patch = (15, 32);
    assert!(c.validate().is_err());
    let mut c = small_config(Variant::WarpedGt, 2);
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = small_config(Variant::WarpedGt, 2);
    c.lr = 0.0;
    assert!(c.validate().is_err());
    let mut c = small_config(Variant::BaselineSingle, 2);
    c.model.ports = 2;
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&small_config(Variant::SameNoise, 2)).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, small_config(Variant::SameNoise, 2));
}

#[test]
fn stage_one_ignores_the_secondary_view() {
    let data = toy();
    let mut swapped = data[0].clone();
    swapped.right = data[1].right.clone();
    let c = small_config(Variant::WarpedGt, 1);
    assert_eq!(variant_inputs(&data[0], &c, 5).unwrap(), variant_inputs(&swapped, &c, 5).unwrap());
    let stage2 = small_config(Variant::WarpedGt, 2);
    assert_ne!(variant_inputs(&data[0], &stage2, 5).unwrap(), variant_inputs(&swapped, &stage2, 5).unwrap());

    let mut other: Vec<StereoSample> = data[..8].to_vec();
    for (i, s) in other.iter_mut().enumerate() {
        s.right = data[8 + i].right.clone();
        s.disparity = data[8 + i].disparity.clone();
    }
    let mut c = small_config(Variant::UnwarpedPair, 1);
    c.epochs = 1;
    let (a, _) = train(&c, &data[..8], &data[20..], Init::Fresh, |_| {}).unwrap();
    let (b, _) = train(&c, &other, &data[20..], Init::Fresh, |_| {}).unwrap();
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn variant_inputs_follow_their_definitions() {
    let s = &toy()[2];
    let single = variant_inputs(s, &small_config(Variant::BaselineSingle, 2), 1).unwrap();
    assert!(single.secondary.is_none());
    let same = variant_inputs(s, &small_config(Variant::SameNoise, 2), 1).unwrap();
    let second = same.secondary.unwrap();
    assert_ne!(second, same.primary);
    // Both ports observe the same clean mosaic.
    let mean = |m: &stereoisp::raw::BayerMosaic| m.data().iter().map(|v| *v as f64).sum::<f64>() / m.data().len() as f64;
    assert!((mean(&second) - mean(&same.primary)).abs() < 0.02);
    let est = variant_inputs(s, &small_config(Variant::WarpedEstimated, 2), 1).unwrap();
    assert!(est.secondary.is_some());
}

#[test]
fn training_loss_decreases_over_first_epochs() {
    let data = generate_toy_dataset(48, (64, 128), 5, 16).unwrap();
    let (train_set, val) = split_dataset(&data, SplitScheme::Ratio { ratio: 0.75, seed: 0 }).unwrap();
    let mut good = 0;
    for seed in 0..10 {
        let mut c = ExperimentConfig::desk(Variant::WarpedGt, 1);
        c.seed = seed;
        c.epochs = 5;
        let (_, report) = train(&c, &train_set, &val, Init::Fresh, |_| {}).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            good += 1;
        } else {
            eprintln!("seed {seed}: {losses:?}");
        }
    }
    assert!(good >= 9, "{good}/10 seeds decreased monotonically");
}

#[test]
fn report_invariants() {
    let data = toy();
    let c = small_config(Variant::SameNoise, 1);
    let (_, report) = train(&c, &data[..16], &data[16..], Init::Fresh, |_| {}).unwrap();
    assert_eq!(report.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let max = report.epochs.iter().map(|e| e.val_psnr_db).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_psnr_db, max);
    assert_eq!(report.epochs[report.best_epoch - 1].val_psnr_db, max);
    let csv = report.to_csv();
    assert!(csv.starts_with("epoch,loss,val_psnr,lr\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn resume_is_bit_exact() {
    let data = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    let c = small_config(Variant::WarpedGt, 1);
    let (train_set, val) = (&data[..16], &data[16..]);

    let mut straight = start_training(&c, val, Init::Fresh).unwrap();
    train_until(&mut straight, &c, train_set, val, 4, |_| {}).unwrap();

    let mut first = start_training(&c, val, Init::Fresh).unwrap();
    train_until(&mut first, &c, train_set, val, 2, |_| {}).unwrap();
    save_checkpoint(&path, &first.to_checkpoint().unwrap()).unwrap();
    let mut resumed = TrainState::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.epoch(), 2);
    train_until(&mut resumed, &c, train_set, val, 4, |_| {}).unwrap();

    assert_eq!(param_bits(&straight.model), param_bits(&resumed.model));
    assert_eq!(param_bits(&straight.best), param_bits(&resumed.best));
    assert_eq!(straight.optimizer, resumed.optimizer);
    let strip = |r: &TrainReport| TrainReport { wall_clock_secs: 0.0, ..r.clone() };
    assert_eq!(strip(&straight.report), strip(&resumed.report));
}

#[test]
fn finished_budget_can_be_extended() {
    let data = toy();
    let (train_set, val) = (&data[..16], &data[16..]);
    let mut c = small_config(Variant::WarpedGt, 1);
    c.epochs = 3;
    c.patience = None;
    let mut straight = start_training(&c, val, Init::Fresh).unwrap();
    train_until(&mut straight, &c, train_set, val, 3, |_| {}).unwrap();

    let mut short = c.clone();
    short.epochs = 1;
    let mut state = start_training(&short, val, Init::Fresh).unwrap();
    train_until(&mut state, &short, train_set, val, 5, |_| {}).unwrap();
    assert!(state.finished);
    assert_eq!(state.epoch(), 1);
    train_until(&mut state, &c, train_set, val, 3, |_| {}).unwrap();
    assert_eq!(state.epoch(), 3);
    assert_eq!(param_bits(&straight.model), param_bits(&state.model));
    assert_eq!(state.report.stop_reason, straight.report.stop_reason);
}

#[test]
fn stage_two_needs_weights_or_cold_start() {
    let data = toy();
    let c = small_config(Variant::WarpedGt, 2);
    assert!(matches!(start_training(&c, data, Init::Fresh), Err(Error::Config(_))));
    let mut cold = c.clone();
    cold.cold_start = true;
    assert!(start_training(&cold, data, Init::Fresh).is_ok());
    let wrong = stereoisp::model::build_model::<f32>(small_config(Variant::BaselineSingle, 2).model, 0).unwrap();
    assert!(start_training(&c, data, Init::From(wrong)).is_err());
}

#[test]
fn fine_tuning_keeps_best_at_or_above_its_start() {
    let data = toy();
    let s1 = small_config(Variant::WarpedGt, 1);
    let (stage1, _) = train(&s1, &data[..16], &data[16..], Init::Fresh, |_| {}).unwrap();
    let mut c = small_config(Variant::UnwarpedPair, 2);
    c.lr = 1e-2;
    c.epochs = 3;
    let (_, report) = train(&c, &data[..16], &data[16..], Init::From(stage1), |_| {}).unwrap();
    let start = report.initial_psnr_db.unwrap();
    assert!(report.best_psnr_db >= start);
    if report.best_epoch == 0 {
        assert!(report.epochs.iter().all(|e| e.val_psnr_db <= start));
    }
    for e in &report.epochs[..report.epochs.len() - 1] {
        assert!(e.val_psnr_db >= start - c.degrade_guard_db, "guard should have stopped at epoch {}", e.epoch);
    }
}

#[test]
fn divergence_reports_epoch_and_rate() {
    let data = toy();
    let mut c = small_config(Variant::WarpedGt, 1);
    c.lr = 1e30;
    let err = train(&c, &data[..16], &data[16..], Init::Fresh, |_| {}).unwrap_err();
    match err {
        Error::Diverged { epoch, lr } => {
            assert_eq!(epoch, 1);
            assert_eq!(lr, 1e30);
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn patches_larger_than_images_are_rejected() {
    let data = toy();
    let mut c = small_config(Variant::WarpedGt, 1);
    c.patch = (64, 64);
    assert!(matches!(train(&c, &data[..4], &data[4..6], Init::Fresh, |_| {}), Err(Error::Dataset(_))));
}

#[test]
fn evaluation_is_deterministic_and_oracle_is_infinite() {
    let data = &toy()[..6];
    let c = small_config(Variant::WarpedGt, 2);
    let mut cold = c.clone();
    cold.cold_start = true;
    cold.epochs = 1;
    let (model, _) = train(&cold, &data[..4], &data[4..], Init::Fresh, |_| {}).unwrap();
    let a = evaluate(&model, data, Variant::WarpedGt, &c, 9).unwrap();
    let b = evaluate(&model, data, Variant::WarpedGt, &c, 9).unwrap();
    assert_eq!(a.mean_psnr_db.to_bits(), b.mean_psnr_db.to_bits());
    assert_eq!(a.samples.len(), 6);

    let oracle = evaluate_with(data, Variant::WarpedGt, &c, 9, |s, _| Ok(s.left.clone())).unwrap();
    assert_eq!(oracle.mean_psnr_db, f64::INFINITY);
    let gray = evaluate_with(data, Variant::WarpedGt, &c, 9, |s, _| RgbImage::from_fn(s.height(), s.width(), |_, _, _| 0.5)).unwrap();
    assert!(gray.mean_psnr_db.is_finite());

    assert!(evaluate(&model, &[], Variant::WarpedGt, &c, 9).is_err());
    assert!(evaluate(&model, data, Variant::BaselineSingle, &c, 9).is_err());
}
