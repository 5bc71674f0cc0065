//! Gradient and forward-pass checks against independent recomputations.

use dpfew::model::{Architecture, Mode, ModelState};
use dpfew::rng::{self, Domain};
use proptest::prelude::*;
use rand::Rng;

fn arch() -> Architecture {
    Architecture {
        input_dim: 5,
        hidden_width: 7,
        feature_dim: 6,
        classes: 4,
    }
}

/// Random state with every parameter perturbed, so adapters and head are
/// away from their initial values.
fn random_state(mode: Mode, seed: u64) -> (ModelState, Vec<f64>, usize) {
    let a = arch();
    let mut m = ModelState::new(a, mode, seed).unwrap();
    let mut r = rng::stream(seed, Domain::Experiment, 77);
    for p in m.params_mut() {
        *p += 0.5 * rng::standard_normal(&mut r);
    }
    let x: Vec<f64> = (0..a.input_dim).map(|_| rng::standard_normal(&mut r)).collect();
    let y = r.random_range(0..a.classes);
    (m, x, y)
}

#[test]
fn finite_differences_all_modes() {
    let h = 1e-4;
    let mut checked = 0;
    for mode in Mode::ALL {
        for s in 0..100u64 {
            let mut seed = s;
            let (mut m, x, y) = loop {
                let (m, x, y) = random_state(mode, seed);
                // keep every unit further than the probe step from its kink
                if m.relu_margin(&x).unwrap() > 1e-2 {
                    break (m, x, y);
                }
                seed += 1000;
            };
            let g = m.per_example_grad(&x, y).unwrap();
            assert_eq!(g.len(), m.trainable_len());
            for k in 0..g.len() {
                let orig = m.params()[k];
                m.params_mut()[k] = orig + h;
                let up = m.loss(&x, y).unwrap();
                m.params_mut()[k] = orig - h;
                let down = m.loss(&x, y).unwrap();
                m.params_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "{mode} seed {seed} coord {k}: analytic {} fd {fd}", g[k]);
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 300);
}

#[test]
fn head_gradient_is_projection_of_all() {
    let (m, x, y) = random_state(Mode::All, 3);
    let all = m.per_example_grad(&x, y).unwrap();
    let head = m.clone().with_mode(Mode::Head).per_example_grad(&x, y).unwrap();
    let film = m.clone().with_mode(Mode::Film).per_example_grad(&x, y).unwrap();
    assert_eq!(&all[..head.len()], &head[..]);
    assert_eq!(&all[..film.len()], &film[..]);
}

#[test]
fn fresh_head_gradient_closed_form() {
    let a = arch();
    let m = ModelState::new(a, Mode::Head, 9).unwrap();
    let x = [0.3, -1.0, 2.0, 0.1, 0.7];
    let y = 2;
    let f = m.features(&x).unwrap();
    let g = m.per_example_grad(&x, y).unwrap();
    let p = 1.0 / a.classes as f64;
    for c in 0..a.classes {
        let r = p - f64::from(u8::from(c == y));
        for j in 0..a.feature_dim {
            assert!((g[c * a.feature_dim + j] - r * f[j]).abs() < 1e-15);
        }
        assert!((g[a.classes * a.feature_dim + c] - r).abs() < 1e-15);
    }
}

/// Straight-line recomputation from the documented flat layout:
/// `[head W | head b | γ1 β1 | γ2 β2 | W1 b1 | W2 b2]`.
fn oracle_probs(a: Architecture, p: &[f64], x: &[f64]) -> Vec<f64> {
    let (d, w, db, c) = (a.input_dim, a.hidden_width, a.feature_dim, a.classes);
    let mut o = 0;
    let mut take = |n: usize| {
        let s = o;
        o += n;
        s
    };
    let (hw, hb) = (take(c * db), take(c));
    let (g1, b1f) = (take(w), take(w));
    let (g2, b2f) = (take(db), take(db));
    let (w1, b1) = (take(w * d), take(w));
    let (w2, b2) = (take(db * w), take(db));
    let mut h1 = vec![0.0; w];
    for j in 0..w {
        let mut z = p[b1 + j];
        for i in 0..d {
            z += p[w1 + j * d + i] * x[i];
        }
        h1[j] = (p[g1 + j] * z + p[b1f + j]).max(0.0);
    }
    let mut h2 = vec![0.0; db];
    for j in 0..db {
        let mut z = p[b2 + j];
        for i in 0..w {
            z += p[w2 + j * w + i] * h1[i];
        }
        h2[j] = (p[g2 + j] * z + p[b2f + j]).max(0.0);
    }
    let mut z = vec![0.0; c];
    for k in 0..c {
        z[k] = p[hb + k];
        for j in 0..db {
            z[k] += p[hw + k * db + j] * h2[j];
        }
    }
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn forward_matches_straight_line_oracle() {
    for seed in 0..50 {
        let (m, x, _) = random_state(Mode::All, seed);
        let got = m.forward(&x).unwrap();
        let want = oracle_probs(arch(), m.params(), &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn film_identity_is_exact() {
    let a = arch();
    let m = ModelState::new(a, Mode::Film, 4).unwrap();
    let mut folded = m.clone();
    folded.fold_film();
    let x = [1.0, -0.5, 0.25, 2.0, -1.5];
    assert_eq!(m.logits(&x).unwrap(), folded.logits(&x).unwrap());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let (mut m, x, _) = random_state(Mode::All, seed);
        for p in m.params_mut() {
            *p *= scale;
        }
        let p = m.forward(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn capacity_grows_with_mode(d in 1usize..20, w in 1usize..20, db in 1usize..20, c in 2usize..12) {
        let a = Architecture { input_dim: d, hidden_width: w, feature_dim: db, classes: c };
        prop_assert!(a.trainable_len(Mode::Head) < a.trainable_len(Mode::Film));
        prop_assert!(a.trainable_len(Mode::Film) < a.trainable_len(Mode::All));
        prop_assert_eq!(a.trainable_len(Mode::Head), db * c + c);
        prop_assert_eq!(a.trainable_len(Mode::Film), db * c + c + 2 * (w + db));
    }

    #[test]
    fn init_is_deterministic(seed in any::<u64>()) {
        let a = ModelState::new(arch(), Mode::All, seed).unwrap();
        let b = ModelState::new(arch(), Mode::All, seed).unwrap();
        prop_assert_eq!(a.params(), b.params());
    }
}
