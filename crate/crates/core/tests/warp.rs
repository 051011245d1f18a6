use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereoisp::dataset::generate_toy_dataset;
use stereoisp::raw::{add_noise, bayer_mosaic, BayerMosaic, CfaPattern, NoiseModel, RgbImage};
use stereoisp::warp::*;

fn random_mosaic(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BayerMosaic {
    BayerMosaic::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect(), CfaPattern::Rggb).unwrap()
}

/// Independent reference: one pixel at a time, explicit neighbors.
fn scalar_warp(s: &BayerMosaic, d: &DisparityMap, fill: &BayerMosaic) -> (Vec<f32>, Vec<bool>) {
    let (h, w) = (s.height(), s.width());
    let mut out = vec![0.0; h * w];
    let mut cov = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = fill.get(y, x);
            let Some(disp) = d.get(y, x) else { continue };
            let src = x as f64 - disp as f64;
            if src < 0.0 || src > (w - 1) as f64 {
                continue;
            }
            let left = src.floor();
            let frac = src - left;
            let a = s.get(y, left as usize) as f64;
            let b = if frac > 0.0 { s.get(y, left as usize + 1) as f64 } else { 0.0 };
            out[i] = (a + frac * (b - a)) as f32;
            cov[i] = true;
        }
    }
    (out, cov)
}

#[test]
fn matches_scalar_reference_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let (h, w) = (16, 32);
        let s = random_mosaic(h, w, &mut rng);
        let p = random_mosaic(h, w, &mut rng);
        let values: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..12.0)).collect();
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.9)).collect();
        let d = DisparityMap::new(h, w, values, valid).unwrap();
        let got = warp_backward(&s, &d, WarpMode::Raw, FillPolicy::Primary, Some(&p)).unwrap();
        let (want, cov) = scalar_warp(&s, &d, &p);
        assert_eq!(got.coverage, cov);
        for (a, b) in got.image.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-6, "max abs diff {worst}");
}

#[test]
fn integer_disparity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_mosaic(16, 32, &mut rng);
    for disp in [1.0f32, 2.0, 5.0] {
        let d = DisparityMap::constant(16, 32, disp).unwrap();
        let r = warp_backward(&s, &d, WarpMode::Raw, FillPolicy::Zero, None).unwrap();
        let k = disp as usize;
        for y in 0..16 {
            for x in 0..32 {
                if x >= k {
                    assert_eq!(r.image.get(y, x), s.get(y, x - k));
                    assert!(r.coverage[y * 32 + x]);
                } else {
                    assert_eq!(r.image.get(y, x), 0.0);
                    assert!(!r.coverage[y * 32 + x]);
                }
            }
        }
    }
}

#[test]
fn zero_disparity_and_invalid_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_mosaic(8, 12, &mut rng);
    let p = random_mosaic(8, 12, &mut rng);
    let id = warp_backward(&s, &DisparityMap::constant(8, 12, 0.0).unwrap(), WarpMode::Raw, FillPolicy::Zero, None).unwrap();
    assert_eq!(id.image, s);
    assert!(id.coverage.iter().all(|c| *c));

    let none = warp_backward(&s, &DisparityMap::invalid(8, 12), WarpMode::Raw, FillPolicy::Primary, Some(&p)).unwrap();
    assert_eq!(none.image, p);
    assert!(none.coverage.iter().all(|c| !*c));
}

#[test]
fn packed_mode_preserves_bayer_phase() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = random_mosaic(8, 16, &mut rng);
    let r = warp_backward(&s, &DisparityMap::constant(8, 16, 4.0).unwrap(), WarpMode::Packed, FillPolicy::Zero, None).unwrap();
    for y in 0..8 {
        for x in 4..16 {
            assert_eq!(r.image.get(y, x), s.get(y, x - 4));
        }
    }
    // An odd shift in packed mode interpolates between same-color samples.
    let r = warp_backward(&s, &DisparityMap::constant(8, 16, 2.0).unwrap(), WarpMode::Packed, FillPolicy::Zero, None).unwrap();
    assert_eq!(r.image.get(0, 6), s.get(0, 4));
}

#[test]
fn dimension_and_fill_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random_mosaic(8, 12, &mut rng);
    assert!(warp_backward(&s, &DisparityMap::constant(8, 10, 0.0).unwrap(), WarpMode::Raw, FillPolicy::Zero, None).is_err());
    assert!(warp_backward(&s, &DisparityMap::constant(8, 12, 0.0).unwrap(), WarpMode::Raw, FillPolicy::Primary, None).is_err());
    let small = random_mosaic(6, 12, &mut rng);
    assert!(warp_backward(&s, &DisparityMap::constant(8, 12, 0.0).unwrap(), WarpMode::Raw, FillPolicy::Primary, Some(&small)).is_err());
}

#[test]
fn ground_truth_warp_reproduces_toy_primary() {
    for sample in generate_toy_dataset(6, (32, 64), 11, 8).unwrap() {
        let m = bayer_mosaic(&sample.left, CfaPattern::Rggb).unwrap();
        let s = bayer_mosaic(&sample.right, CfaPattern::Rggb).unwrap();
        let r = warp_backward(&s, &sample.disparity, WarpMode::Raw, FillPolicy::Zero, None).unwrap();
        let noc = sample.non_occluded.as_ref().unwrap();
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..64 {
                if noc[y * 64 + x] && r.coverage[y * 64 + x] {
                    assert_eq!(r.image.get(y, x), m.get(y, x), "sample {} at ({y},{x})", sample.id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 32 * 64 / 2);
    }
}

fn textured(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
    RgbImage::from_fn(h, w, |c, y, x| (0.2 + 0.6 * base[y * w + x] + 0.05 * c as f32).min(1.0)).unwrap()
}

#[test]
fn blockmatch_recovers_constant_shift() {
    let (h, w) = (32, 96);
    let wide = textured(h, w + 6, 31);
    // A point at x in the left view appears at x - 6 in the right view.
    let left = RgbImage::from_fn(h, w, |c, y, x| wide.get(c, y, x)).unwrap();
    let right = RgbImage::from_fn(h, w, |c, y, x| wide.get(c, y, x + 6)).unwrap();
    let lm = bayer_mosaic(&left, CfaPattern::Rggb).unwrap();
    let rm = bayer_mosaic(&right, CfaPattern::Rggb).unwrap();
    let d = estimate_disparity_blockmatch(&lm, &rm, 8, 5).unwrap();
    let mut err = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 16..w {
            if let Some(v) = d.get(y, x) {
                err += (v - 6.0).abs();
                n += 1;
            }
        }
    }
    assert!(n > 0);
    assert!(err / (n as f32) < 1.0, "mean abs error {}", err / n as f32);
}

#[test]
fn blockmatch_identical_and_flat() {
    let img = textured(16, 32, 3);
    let m = bayer_mosaic(&img, CfaPattern::Rggb).unwrap();
    let d = estimate_disparity_blockmatch(&m, &m, 4, 3).unwrap();
    assert!(d.valid_count() > 0);
    assert!(d.values().iter().zip(d.valid()).filter(|(_, v)| **v).all(|(d, _)| *d == 0.0));

    let flat = BayerMosaic::new(16, 32, vec![0.4; 512], CfaPattern::Rggb).unwrap();
    let d = estimate_disparity_blockmatch(&flat, &flat, 4, 3).unwrap();
    assert!(d.values().iter().zip(d.valid()).filter(|(_, v)| **v).all(|(d, _)| *d == 0.0));

    assert!(estimate_disparity_blockmatch(&m, &m, 16, 3).is_err());
    assert!(estimate_disparity_blockmatch(&m, &m, 0, 3).is_err());
    assert!(estimate_disparity_blockmatch(&m, &m, 4, 4).is_err());
}

#[test]
fn blockmatch_range_on_noisy_toy_scenes() {
    for sample in generate_toy_dataset(3, (64, 128), 4, 16).unwrap() {
        let noise = NoiseModel::Poisson { photons: 10.0 };
        let m = add_noise(&bayer_mosaic(&sample.left, CfaPattern::Rggb).unwrap(), &noise, 1).unwrap();
        let s = add_noise(&bayer_mosaic(&sample.right, CfaPattern::Rggb).unwrap(), &noise, 2).unwrap();
        let d = estimate_disparity_blockmatch(&m, &s, 10, 7).unwrap();
        for (v, ok) in d.values().iter().zip(d.valid()) {
            if *ok {
                assert!((0.0..=20.0).contains(v));
            }
        }
    }
}

#[test]
fn crop_invalidates_out_of_range_disparity() {
    let d = DisparityMap::constant(8, 16, 6.0).unwrap();
    let c = d.crop(0, 0, 4, 6).unwrap();
    assert_eq!(c.valid_count(), 0);
    let c = d.crop(0, 0, 4, 8).unwrap();
    assert_eq!(c.valid_count(), 32);
}
