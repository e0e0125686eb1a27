//! Finite-difference gradient checks for every differentiable op.

use xseg3d_core::{grad_check, BnMode, BnStats, CheckMode, Rng, Tensor};

fn filled(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::from_seed(seed);
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

#[test]
fn conv3d_gradients() {
    for seed in 0..5 {
        let x = filled(vec![1, 2, 4, 5, 4], seed, -1.0, 1.0);
        let w = filled(vec![3, 2, 3, 3, 3], 100 + seed, -0.5, 0.5);
        let b = filled(vec![3], 200 + seed, -0.5, 0.5);
        let err = grad_check(
            |tape, v| {
                let y = tape
                    .conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])
                    .unwrap();
                tape.sum_all(y)
            },
            &[x, w, b],
            1e-5,
            CheckMode::Full,
        );
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn conv3d_strided_gradients() {
    let x = filled(vec![2, 1, 6, 6, 6], 7, -1.0, 1.0);
    let w = filled(vec![2, 1, 3, 3, 3], 8, -0.5, 0.5);
    let b = filled(vec![2], 9, -0.5, 0.5);
    // weight the output elements unevenly so the check exercises more than
    // the all-ones cotangent
    let err = grad_check(
        |tape, v| {
            let y = tape
                .conv3d(v[0], v[1], Some(v[2]), [2, 2, 2], [1, 1, 1])
                .unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq)
        },
        &[x, w, b],
        1e-5,
        CheckMode::Full,
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn conv_transpose3d_gradients() {
    for seed in 0..5 {
        let x = filled(vec![1, 3, 3, 3, 3], seed, -1.0, 1.0);
        let w = filled(vec![3, 2, 2, 2, 2], 300 + seed, -0.5, 0.5);
        let b = filled(vec![2], 400 + seed, -0.5, 0.5);
        let err = grad_check(
            |tape, v| {
                let y = tape
                    .conv_transpose3d(v[0], v[1], Some(v[2]), [2, 2, 2], [0, 0, 0])
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            &[x, w, b],
            1e-5,
            CheckMode::Full,
        );
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn batch_norm_training_gradients() {
    for seed in 0..5 {
        let x = filled(vec![2, 3, 3, 2, 2], seed, -2.0, 2.0);
        let gamma = filled(vec![3], 500 + seed, 0.5, 1.5);
        let beta = filled(vec![3], 600 + seed, -0.5, 0.5);
        // weight outputs by a fixed random probe: a plain sum of squares of
        // normalized outputs is nearly constant and ill-conditioned for FD
        let probe = filled(vec![2, 3, 3, 2, 2], 900 + seed, 0.2, 1.0);
        let err = grad_check(
            |tape, v| {
                let mut stats = BnStats::new(3);
                let y = tape
                    .batch_norm(
                        v[0],
                        v[1],
                        v[2],
                        BnMode::Train {
                            stats: &mut stats,
                            momentum: 0.1,
                        },
                        1e-5,
                    )
                    .unwrap();
                let c = tape.leaf(probe.clone(), false);
                let weighted = tape.mul(y, c).unwrap();
                let sq = tape.mul(weighted, weighted).unwrap();
                tape.sum_all(sq)
            },
            &[x, gamma, beta],
            1e-5,
            CheckMode::Full,
        );
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }
}

#[test]
fn batch_norm_eval_gradients() {
    let x = filled(vec![1, 2, 3, 3, 3], 3, -2.0, 2.0);
    let gamma = filled(vec![2], 4, 0.5, 1.5);
    let beta = filled(vec![2], 5, -0.5, 0.5);
    let mut stats = BnStats::new(2);
    stats.mean = vec![0.3, -0.2];
    stats.var = vec![1.4, 0.8];
    let err = grad_check(
        |tape, v| {
            let y = tape
                .batch_norm(v[0], v[1], v[2], BnMode::Eval { stats: &stats }, 1e-5)
                .unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq)
        },
        &[x, gamma, beta],
        1e-5,
        CheckMode::Full,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn prelu_gradients_including_alpha() {
    for seed in 0..5 {
        let x = filled(vec![1, 4, 3, 3, 3], seed, -2.0, 2.0);
        let alpha = filled(vec![4], 700 + seed, 0.1, 0.5);
        let err = grad_check(
            |tape, v| {
                let y = tape.prelu(v[0], v[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            &[x, alpha],
            1e-6,
            CheckMode::Full,
        );
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn dropout_gradients_fixed_mask() {
    // identical rng seed per evaluation keeps the mask fixed, making the op
    // a deterministic elementwise scale
    let x = filled(vec![6, 6], 11, 0.5, 1.5);
    let err = grad_check(
        |tape, v| {
            let mut rng = Rng::from_seed(42);
            let y = tape.dropout(v[0], 0.3, true, &mut rng).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum_all(sq)
        },
        &[x],
        1e-6,
        CheckMode::Full,
    );
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn elementwise_gradients() {
    let a = filled(vec![4, 3], 21, 0.5, 2.0);
    let b = filled(vec![4, 3], 22, 0.5, 2.0);
    let err = grad_check(
        |tape, v| {
            let d = tape.sub(v[0], v[1]).unwrap();
            let m = tape.mul(d, v[1]).unwrap();
            let denom = tape.add_scalar(v[0], 3.0);
            let q = tape.div(m, denom).unwrap();
            let sig = tape.sigmoid(q);
            let r = tape.relu(sig);
            let aff = tape.affine(r, 2.5, -0.75);
            tape.sum_all(aff)
        },
        &[a, b],
        1e-6,
        CheckMode::Full,
    );
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn reduce_and_concat_gradients() {
    let a = filled(vec![2, 2, 3], 31, -1.0, 1.0);
    let b = filled(vec![2, 1, 3], 32, -1.0, 1.0);
    let err = grad_check(
        |tape, v| {
            let c = tape.concat(&[v[0], v[1]], 1).unwrap();
            let m = tape.mean_axes(c, &[0, 2]).unwrap();
            let sq = tape.mul(m, m).unwrap();
            tape.sum_all(sq)
        },
        &[a, b],
        1e-6,
        CheckMode::Full,
    );
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn scalar_broadcast_gradients() {
    let a = filled(vec![5], 41, 0.5, 1.5);
    let s = filled(vec![], 42, 0.5, 1.5);
    let err = grad_check(
        |tape, v| {
            let m = tape.mul(v[0], v[1]).unwrap();
            let d = tape.div(m, v[1]).unwrap();
            let p = tape.add(d, v[1]).unwrap();
            tape.sum_all(p)
        },
        &[a, s],
        1e-6,
        CheckMode::Full,
    );
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn repeated_backward_is_deterministic() {
    let mut tape = xseg3d_core::Tape::<f64>::new();
    let x = tape.leaf(filled(vec![1, 2, 4, 4, 4], 51, -1.0, 1.0), true);
    let w = tape.leaf(filled(vec![2, 2, 3, 3, 3], 52, -0.5, 0.5), true);
    let y = tape.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
    let s = tape.sum_all(y);
    let g1 = tape.backward(s).unwrap();
    let g2 = tape.backward(s).unwrap();
    assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
    assert_eq!(g1.get(w).unwrap().data(), g2.get(w).unwrap().data());
}

// ---- full model + dice loss composition ----

use xseg3d_core::metrics::{dice_loss, DICE_SMOOTH};
use xseg3d_core::{Model, Scalar, Tape, UNetConfig};

fn micro_config() -> UNetConfig {
    UNetConfig {
        levels: 2,
        channels_per_level: vec![2, 4],
        down_strides: vec![[2, 2, 2]],
        ..UNetConfig::tiny()
    }
}

fn model_loss<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    drop_seed: u64,
) -> (f64, Option<(Vec<Tensor<T>>, Tensor<T>)>) {
    let mut m = clone_model(model);
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let mut drop_rng = Rng::from_seed(drop_seed);
    let trace = m.forward_train(&mut tape, x, &mut drop_rng).unwrap();
    let probs = tape.sigmoid(trace.logits);
    let loss = dice_loss(&mut tape, probs, target, DICE_SMOOTH).unwrap();
    let value = tape.value(loss).item().as_f64();
    let gm = tape.backward(loss).unwrap();
    let param_grads: Vec<Tensor<T>> = trace
        .param_vars
        .iter()
        .map(|&v| gm.get_or_zeros(v, &tape))
        .collect();
    let input_grad = gm.get_or_zeros(x, &tape);
    (value, Some((param_grads, input_grad)))
}

fn clone_model<T: Scalar>(model: &Model<T>) -> Model<T> {
    let mut rng = Rng::from_seed(0);
    let mut m = Model::build(model.config().clone(), &mut rng).unwrap();
    for (name, t) in model.params() {
        m.set_param(name, t.clone()).unwrap();
    }
    for (name, s) in model.bn_stats() {
        m.set_bn_stats(name, s.clone()).unwrap();
    }
    m
}

/// Central differences through the real training forward (fixed dropout
/// stream) for every parameter element and every input element. `skip_abs`
/// is the FD noise floor: where analytic and difference quotient agree to
/// that absolute tolerance the direction counts as exact.
fn composition_max_rel_err<T: Scalar>(seed: u64, epsilon: f64, skip_abs: f64) -> f64 {
    let mut rng = Rng::from_seed(seed);
    let model: Model<T> = Model::build(micro_config(), &mut rng).unwrap();
    let mut drng = Rng::from_seed(seed ^ 0xabcdef);
    let input = Tensor::<T>::from_fn(vec![1, 1, 4, 4, 4], |_| T::from_f64(drng.uniform()));
    let target = Tensor::<T>::from_fn(vec![1, 3, 4, 4, 4], |_| {
        T::from_f64(drng.bernoulli(0.5) as u8 as f64)
    });
    let drop_seed = seed ^ 0x5eed;

    let (_, grads) = model_loss(&model, &input, &target, drop_seed);
    let (param_grads, input_grad) = grads.unwrap();

    let mut max_rel = 0.0f64;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let cd = (plus - minus) / (2.0 * epsilon);
        if (analytic - cd).abs() < skip_abs {
            return;
        }
        let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    };

    let names: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let theta = model.param(name).unwrap().clone();
        for i in 0..theta.numel() {
            let perturb = |delta: f64| -> f64 {
                let mut data = theta.data().to_vec();
                data[i] = data[i] + T::from_f64(delta);
                let mut m = clone_model(&model);
                m.set_param(name, Tensor::from_vec(theta.shape().to_vec(), data).unwrap())
                    .unwrap();
                model_loss(&m, &input, &target, drop_seed).0
            };
            check(
                param_grads[pi].data()[i].as_f64(),
                perturb(epsilon),
                perturb(-epsilon),
            );
        }
    }
    for i in 0..input.numel() {
        let perturb = |delta: f64| -> f64 {
            let mut data = input.data().to_vec();
            data[i] = data[i] + T::from_f64(delta);
            let x = Tensor::from_vec(input.shape().to_vec(), data).unwrap();
            model_loss(&model, &x, &target, drop_seed).0
        };
        check(
            input_grad.data()[i].as_f64(),
            perturb(epsilon),
            perturb(-epsilon),
        );
    }
    max_rel
}

#[test]
fn full_unet_dice_composition_fd_f64() {
    let err = composition_max_rel_err::<f64>(31, 1e-6, 1e-9);
    assert!(err < 1e-5, "64-bit composition rel err {err}");
}

/// 32-bit analytic gradients against the well-conditioned 64-bit central
/// difference oracle on the same weights: a large 32-bit FD step would
/// straddle PReLU kinks, so the oracle runs in f64 where a tiny step is
/// noise-free.
#[test]
fn full_unet_dice_composition_fd_f32() {
    let seed = 32u64;
    let mut rng = Rng::from_seed(seed);
    let model32: Model<f32> = Model::build(micro_config(), &mut rng).unwrap();
    let mut drng = Rng::from_seed(seed ^ 0xabcdef);
    let input32 = Tensor::<f32>::from_fn(vec![1, 1, 4, 4, 4], |_| drng.uniform() as f32);
    let target32 = Tensor::<f32>::from_fn(vec![1, 3, 4, 4, 4], |_| {
        drng.bernoulli(0.5) as u8 as f32
    });
    let drop_seed = seed ^ 0x5eed;
    let (_, grads32) = model_loss(&model32, &input32, &target32, drop_seed);
    let (param_grads32, input_grad32) = grads32.unwrap();

    // the same network in f64
    let mut rng64 = Rng::from_seed(0);
    let mut model64: Model<f64> = Model::build(micro_config(), &mut rng64).unwrap();
    for (name, t) in model32.params() {
        model64.set_param(name, t.cast()).unwrap();
    }
    let input64: Tensor<f64> = input32.cast();
    let target64: Tensor<f64> = target32.cast();

    let epsilon = 1e-6;
    let mut max_rel = 0.0f64;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let cd = (plus - minus) / (2.0 * epsilon);
        if (analytic - cd).abs() < 1e-7 {
            return;
        }
        let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    };
    let names: Vec<String> = model64.params().iter().map(|(n, _)| n.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let theta = model64.param(name).unwrap().clone();
        for i in 0..theta.numel() {
            let perturb = |delta: f64| -> f64 {
                let mut data = theta.data().to_vec();
                data[i] += delta;
                let mut m = clone_model(&model64);
                m.set_param(name, Tensor::from_vec(theta.shape().to_vec(), data).unwrap())
                    .unwrap();
                model_loss(&m, &input64, &target64, drop_seed).0
            };
            check(
                param_grads32[pi].data()[i] as f64,
                perturb(epsilon),
                perturb(-epsilon),
            );
        }
    }
    for i in 0..input64.numel() {
        let perturb = |delta: f64| -> f64 {
            let mut data = input64.data().to_vec();
            data[i] += delta;
            let x = Tensor::from_vec(input64.shape().to_vec(), data).unwrap();
            model_loss(&model64, &x, &target64, drop_seed).0
        };
        check(input_grad32.data()[i] as f64, perturb(epsilon), perturb(-epsilon));
    }
    assert!(max_rel < 1e-3, "32-bit composition rel err {max_rel}");
}
