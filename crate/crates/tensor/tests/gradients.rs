//! Analytic gradients against central finite differences (64-bit, h = 1e-5).

use proptest::prelude::*;
use rand::{rngs::StdRng, Rng, SeedableRng};
use stereoisp_tensor::gradcheck::{central_difference, relative_error};
use stereoisp_tensor::{BatchNormStats, Mode, Shape, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_t(shape: Shape, rng: &mut StdRng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Builds `loss = sum(op(inputs) * probe)` and checks d loss / d input_i
/// for every input against finite differences.
fn check(inputs: Vec<Tensor<f64>>, probe_seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(grads)).unwrap()).collect();
        let y = op(&mut tape, &vars);
        let probe = Tensor::uniform(tape.shape(y).unwrap(), -1.0, 1.0, &mut StdRng::seed_from_u64(probe_seed));
        let loss = tape.weighted_sum(y, &probe).unwrap();
        let value = tape.value(loss).unwrap().item().unwrap();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect())
    };

    let (_, analytic) = eval(&inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = central_difference(x.data(), H, |probe| {
            let mut xs = inputs.clone();
            xs[i] = Tensor::new(x.shape(), probe.to_vec()).unwrap();
            eval(&xs, false).0
        });
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

fn cfg() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn conv2d_gradients(seed in any::<u64>(), stride in 1usize..3, k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = StdRng::seed_from_u64(seed);
        let inputs = vec![
            rand_t(Shape::new(2, 2, 5, 6), &mut rng),
            rand_t(Shape::new(3, 2, k, k), &mut rng),
            rand_t(Shape::vector(3), &mut rng),
        ];
        let err = check(inputs, seed ^ 1, |t, v| t.conv2d(v[0], v[1], v[2], stride, k / 2).unwrap());
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn batchnorm_gradients(seed in any::<u64>(), train in any::<bool>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let inputs = vec![
            rand_t(Shape::new(2, 3, 3, 4), &mut rng),
            rand_t(Shape::vector(3), &mut rng),
            rand_t(Shape::vector(3), &mut rng),
        ];
        let mode = if train { Mode::Train } else { Mode::Eval };
        let stats = BatchNormStats {
            mean: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
            batches_tracked: 1,
        };
        let err = check(inputs, seed ^ 2, |t, v| {
            let mut s = stats.clone();
            t.batchnorm2d(v[0], v[1], v[2], &mut s, mode, 0.1, 1e-5).unwrap()
        });
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn relu_gradients(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        // keep samples out of the |x| < 1e-3 band around the kink
        let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| {
            let m: f64 = rng.random_range(1e-3..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        });
        let err = check(vec![x], seed ^ 3, |t, v| t.relu(v[0]).unwrap());
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn shuffle_composition_gradients(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = rand_t(Shape::new(2, 3, 4, 6), &mut rng);
        let err = check(vec![x], seed ^ 4, |t, v| {
            let packed = t.pixel_unshuffle(v[0], 2).unwrap();
            let back = t.pixel_shuffle(packed, 2).unwrap();
            t.concat(&[packed, packed]).unwrap();
            back
        });
        prop_assert!(err < 1e-8, "rel err {}", err);

        let x = rand_t(Shape::new(1, 8, 2, 3), &mut rng);
        let err = check(vec![x], seed ^ 5, |t, v| t.pixel_shuffle(v[0], 2).unwrap());
        prop_assert!(err < 1e-8, "rel err {}", err);
    }

    #[test]
    fn concat_slice_mul_gradients(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = rand_t(Shape::new(2, 2, 3, 3), &mut rng);
        let b = rand_t(Shape::new(2, 3, 3, 3), &mut rng);
        let mask = rand_t(Shape::new(2, 3, 3, 3), &mut rng);
        let err = check(vec![a, b], seed ^ 6, |t, v| {
            let c = t.concat(&[v[0], v[1]]).unwrap();
            let s = t.slice_channels(c, 1, 3).unwrap();
            let m = t.mul_const(s, &mask).unwrap();
            t.scale(m, -1.5).unwrap()
        });
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn mse_gradients(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = rand_t(Shape::new(2, 3, 2, 2), &mut rng);
        let q = rand_t(Shape::new(2, 3, 2, 2), &mut rng);
        let err = check(vec![p, q], seed ^ 7, |t, v| t.mse_loss(v[0], v[1]).unwrap());
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn shuffle_roundtrip_and_multiset(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = rand_t(Shape::new(n, c, 2 * h, 2 * w), &mut rng);
        let packed = stereoisp_tensor::pixel_unshuffle(&x, 2).unwrap();
        prop_assert_eq!(&stereoisp_tensor::pixel_shuffle(&packed, 2).unwrap(), &x);
        let mut a = x.data().to_vec();
        let mut b = packed.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn conv_and_batchnorm_are_bit_deterministic() {
    let run = || {
        let mut rng = StdRng::seed_from_u64(42);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::uniform(Shape::new(4, 8, 16, 16), -1.0, 1.0, &mut rng)).unwrap();
        let w = tape.leaf(Tensor::uniform(Shape::new(16, 8, 3, 3), -1.0, 1.0, &mut rng).with_requires_grad(true)).unwrap();
        let b = tape.leaf(Tensor::zeros(Shape::vector(16))).unwrap();
        let g = tape.leaf(Tensor::full(Shape::vector(16), 1.0)).unwrap();
        let beta = tape.leaf(Tensor::zeros(Shape::vector(16))).unwrap();
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let mut stats = BatchNormStats::new(16);
        let z = tape.batchnorm2d(y, g, beta, &mut stats, Mode::Train, 0.1, 1e-5).unwrap();
        let out = tape.value(z).unwrap().clone();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        (out, tape.grad(w).unwrap().to_vec(), stats)
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_inputs_stay_finite() {
    let mut rng = StdRng::seed_from_u64(3);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::uniform(Shape::new(1, 1, 4, 4), -1e3, 1e3, &mut rng)).unwrap();
    let g = tape.leaf(Tensor::full(Shape::vector(1), 1.0)).unwrap();
    let b = tape.leaf(Tensor::zeros(Shape::vector(1))).unwrap();
    let mut stats = BatchNormStats::new(1);
    let y = tape.batchnorm2d(x, g, b, &mut stats, Mode::Train, 0.1, 1e-5).unwrap();
    assert!(tape.value(y).unwrap().is_finite());
}
