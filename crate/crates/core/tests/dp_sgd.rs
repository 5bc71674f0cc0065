//! DP-SGD mechanism checks against plain reference implementations.

use dpfew::data::{FewShotDataset, Split, SyntheticTaskSpec};
use dpfew::dp_optim::{
    self, clip_grad, l2_norm, poisson_batch, privatized_gradient, DpOptimConfig, Optimizer, OptimizerKind, Privacy,
};
use dpfew::model::{Architecture, Mode, ModelState};
use dpfew::rng::{self, Domain};
use rand::Rng;

fn task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        classes: 3,
        input_dim: 8,
        informative_dims: 3,
        ..SyntheticTaskSpec::default()
    }
}

fn arch() -> Architecture {
    Architecture::new(8, 10, 6, 3)
}

fn data(per_class: usize, seed: u64) -> FewShotDataset {
    task().sample(per_class, Split::Train, seed, 0).unwrap()
}

fn model(mode: Mode, seed: u64) -> ModelState {
    let mut m = ModelState::new(arch(), mode, seed).unwrap();
    // non-zero head so every mode has informative gradients
    let mut r = rng::stream(seed, Domain::Experiment, 5);
    let head = arch().head_params();
    for p in &mut m.params_mut()[..head] {
        *p = 0.3 * rng::standard_normal(&mut r);
    }
    m
}

fn cfg(sigma: f64, clip: f64, batch: usize, epochs: usize) -> DpOptimConfig {
    DpOptimConfig {
        clip_norm: clip,
        noise_multiplier: Some(sigma),
        batch_size: batch,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Sgd,
        epochs,
    }
}

/// Unclipped SGD on the realised batch, normalised by the expected batch size.
fn reference_sgd(data: &FewShotDataset, mut m: ModelState, q: f64, expected: f64, steps: usize, lr: f64, seed: u64) -> ModelState {
    let mut r = rng::stream(seed, Domain::DpOptim, 0);
    let len = m.trainable_len();
    for _ in 0..steps {
        let batch: Vec<usize> = (0..data.len()).filter(|_| r.random::<f64>() < q).collect();
        let mut g = vec![0.0; len];
        for &i in &batch {
            for (a, b) in g.iter_mut().zip(m.per_example_grad(data.x(i), data.y(i)).unwrap()) {
                *a += b;
            }
        }
        for (p, gi) in m.trainable_mut().iter_mut().zip(&g) {
            *p -= lr * gi / expected;
        }
    }
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn noiseless_unclipped_run_equals_reference_sgd() {
    let d = data(10, 1);
    let n = d.len();
    for mode in Mode::ALL {
        for (batch, epochs) in [(n, 40), (n / 2, 20), (7, 5)] {
            let c = cfg(0.0, 1e12, batch, epochs);
            let start = model(mode, 3);
            let mut r = rng::stream(11, Domain::DpOptim, 0);
            let out = dp_optim::train(&d, start.clone(), &c, Privacy::Private, &mut r).unwrap();
            let q = batch as f64 / n as f64;
            let reference = reference_sgd(&d, start, q, batch as f64, out.steps as usize, c.learning_rate, 11);
            let diff = max_abs_diff(out.model.params(), reference.params());
            assert!(diff < 1e-12, "mode {mode} batch {batch}: max diff {diff:e}");
        }
    }
}

#[test]
fn full_batch_step_equals_mean_gradient_step() {
    let d = data(6, 2);
    let m = model(Mode::Film, 4);
    let all: Vec<usize> = (0..d.len()).collect();
    let mut r = rng::stream(0, Domain::DpOptim, 0);
    let pg = privatized_gradient(&m, &d, &all, 1e12, 0.0, d.len() as f64, &mut r);
    let mean = dp_optim::mean_gradient(&m, &d, &all);
    assert!(max_abs_diff(&pg.gradient, &mean) < 1e-12);
}

#[test]
fn clip_norm_holds_for_every_example_of_a_run() {
    let d = data(12, 3);
    let c = cfg(1.0, 0.05, 9, 6);
    let q = c.sample_rate(d.len());
    let mut m = model(Mode::All, 5);
    let mut opt = Optimizer::new(c.optimizer, m.trainable_len());
    let mut r = rng::stream(21, Domain::DpOptim, 0);
    let (mut checked, mut clipped) = (0, 0);
    for _ in 0..c.planned_steps(d.len()) {
        let batch = poisson_batch(d.len(), q, &mut r);
        for &i in &batch {
            let raw = m.per_example_grad(d.x(i), d.y(i)).unwrap();
            let contrib = clip_grad(&raw, c.clip_norm);
            assert!(l2_norm(&contrib) <= c.clip_norm * (1.0 + 1e-12));
            checked += 1;
            clipped += (l2_norm(&raw) > c.clip_norm) as usize;
        }
        let reported = dp_optim::dp_step(&mut m, &d, &batch, &c, &mut opt, &mut r).unwrap();
        assert!(reported <= c.clip_norm * (1.0 + 1e-12));
    }
    assert!(checked > 100 && clipped > 0, "checked {checked}, clipped {clipped}");

    let mut r = rng::stream(21, Domain::DpOptim, 0);
    let out = dp_optim::train(&d, model(Mode::All, 5), &c, Privacy::Private, &mut r).unwrap();
    assert!(out.max_contribution > 0.0 && out.max_contribution <= c.clip_norm * (1.0 + 1e-12));
}

#[test]
fn mean_privatized_gradient_is_unbiased() {
    let d = data(4, 4);
    let m = model(Mode::Head, 6);
    let batch: Vec<usize> = (0..d.len()).step_by(2).collect();
    let (clip, sigma, expected) = (0.5, 1.5, 8.0);
    let mut target = vec![0.0; m.trainable_len()];
    for &i in &batch {
        let g = clip_grad(&m.per_example_grad(d.x(i), d.y(i)).unwrap(), clip);
        for (t, gi) in target.iter_mut().zip(g) {
            *t += gi / expected;
        }
    }
    let reps = 10_000;
    let mut acc = vec![0.0; target.len()];
    let mut r = rng::stream(9, Domain::DpOptim, 0);
    for _ in 0..reps {
        let pg = privatized_gradient(&m, &d, &batch, clip, sigma, expected, &mut r);
        for (a, g) in acc.iter_mut().zip(pg.gradient) {
            *a += g;
        }
    }
    let se = sigma * clip / expected / (reps as f64).sqrt();
    for (j, (a, t)) in acc.iter().zip(&target).enumerate() {
        let mean = a / reps as f64;
        assert!((mean - t).abs() <= 3.0 * se, "coord {j}: {mean} vs {t} (se {se})");
    }
}

#[test]
fn frozen_parameters_are_bit_identical() {
    let d = data(8, 5);
    for mode in [Mode::Head, Mode::Film] {
        let start = model(mode, 7);
        let k = start.trainable_len();
        for (privacy, sigma) in [(Privacy::Private, 1.0), (Privacy::NonPrivate, 0.0)] {
            let c = DpOptimConfig {
                optimizer: OptimizerKind::adam(),
                ..cfg(sigma, 1.0, 5, 4)
            };
            let mut r = rng::stream(1, Domain::DpOptim, 0);
            let out = dp_optim::train(&d, start.clone(), &c, privacy, &mut r).unwrap();
            assert_eq!(&out.model.params()[k..], &start.params()[k..], "{mode} {privacy:?}");
            assert_ne!(&out.model.params()[..k], &start.params()[..k]);
        }
    }
}

#[test]
fn step_count_is_epochs_times_steps_per_epoch() {
    let d = data(7, 6);
    let n = d.len();
    for (batch, epochs) in [(1, 2), (4, 3), (n, 5), (n - 1, 1), (10, 0)] {
        for privacy in [Privacy::Private, Privacy::NonPrivate] {
            let c = cfg(1.0, 1.0, batch, epochs);
            let mut r = rng::stream(2, Domain::DpOptim, 0);
            let out = dp_optim::train(&d, model(Mode::Head, 1), &c, privacy, &mut r).unwrap();
            assert_eq!(out.steps, (epochs * n.div_ceil(batch)) as u64);
            assert_eq!(out.steps, c.planned_steps(n));
        }
    }
}

#[test]
fn identical_seed_gives_identical_model() {
    let d = data(5, 7);
    let c = DpOptimConfig {
        optimizer: OptimizerKind::adam(),
        ..cfg(0.8, 0.7, 4, 3)
    };
    let run = |s| {
        let mut r = rng::stream(s, Domain::DpOptim, 0);
        dp_optim::train(&d, model(Mode::All, 2), &c, Privacy::Private, &mut r).unwrap().model
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn empty_batch_is_a_noise_only_step() {
    let d = data(3, 8);
    let m = model(Mode::Head, 3);
    let mut r = rng::stream(3, Domain::DpOptim, 0);
    let pg = privatized_gradient(&m, &d, &[], 1.0, 2.0, 4.0, &mut r);
    assert!(pg.gradient.iter().any(|g| *g != 0.0));
    assert_eq!(pg.max_contribution, 0.0);
}

#[test]
fn separable_toy_set_is_interpolated() {
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            vec![s * (1.0 + 0.1 * i as f64), 0.3 * ((i * 7) % 5) as f64 - 0.6]
        })
        .collect();
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let d = FewShotDataset::from_rows(&rows, labels, 2).unwrap();
    let m = ModelState::new(Architecture::new(2, 8, 4, 2), Mode::All, 1).unwrap();
    let c = DpOptimConfig {
        clip_norm: 1.0,
        noise_multiplier: None,
        batch_size: 5,
        learning_rate: 0.05,
        optimizer: OptimizerKind::adam(),
        epochs: 200,
    };
    let mut r = rng::stream(0, Domain::DpOptim, 0);
    let out = dp_optim::train(&d, m, &c, Privacy::NonPrivate, &mut r).unwrap();
    assert_eq!(d.accuracy(&out.model).unwrap(), 1.0);
}

#[test]
fn stronger_privacy_fits_training_data_less() {
    use dpfew::accountant::{calibrate_sigma, AccountantKind, PrivacyBudget};
    let mut wins = 0;
    for seed in 0..5u64 {
        let d = data(10, 100 + seed);
        let n = d.len();
        let base = DpOptimConfig {
            optimizer: OptimizerKind::adam(),
            learning_rate: 0.01,
            ..cfg(0.0, 1.0, 10, 40)
        };
        let fit = |eps: f64| {
            let budget = PrivacyBudget::new(eps, 1.0 / n as f64).unwrap();
            let sigma = calibrate_sigma(budget, base.sample_rate(n), base.planned_steps(n), AccountantKind::Rdp).unwrap();
            let c = DpOptimConfig {
                noise_multiplier: Some(sigma),
                ..base.clone()
            };
            let mut r = rng::stream(seed, Domain::DpOptim, 0);
            let out = dp_optim::train(&d, model(Mode::All, seed), &c, Privacy::Private, &mut r).unwrap();
            d.accuracy(&out.model).unwrap()
        };
        if fit(1.0) <= fit(8.0) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "ε=1 ≤ ε=8 train accuracy in only {wins}/5 seeds");
}
