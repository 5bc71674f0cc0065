//! Membership-inference scoring and ROC checks against brute-force oracles.

use dpfew::data::{pretrain_backbone, PretrainConfig, SyntheticTaskSpec};
use dpfew::mia::{
    attack_all, build_population, dp_bound_violations, lira_score, roc_metrics, ShadowConfig, VarianceMode,
    VARIANCE_FLOOR,
};
use dpfew::model::{Architecture, Mode};
use dpfew::protocol::Hyper;
use dpfew::rng::{self, Domain};
use proptest::prelude::*;
use rand::Rng;

/// Every threshold in the score set plus +∞; member iff score ≥ threshold.
fn brute_force_points(pairs: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let p = pairs.iter().filter(|x| x.1).count() as f64;
    let n = pairs.len() as f64 - p;
    let mut thresholds: Vec<f64> = pairs.iter().map(|x| x.0).collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .iter()
        .map(|&t| {
            let tp = pairs.iter().filter(|x| x.1 && x.0 >= t).count() as f64;
            let fp = pairs.iter().filter(|x| !x.1 && x.0 >= t).count() as f64;
            (fp / n, tp / p)
        })
        .collect()
}

/// Probability a random member outscores a random non-member, ties halved.
fn mann_whitney(pairs: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = pairs.iter().filter(|x| x.1).map(|x| x.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|x| !x.1).map(|x| x.0).collect();
    let mut wins = 0.0;
    for a in &pos {
        for b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[test]
fn roc_matches_brute_force_on_random_instances() {
    let mut r = rng::stream(0, Domain::Experiment, 0);
    for inst in 0..100 {
        let len = r.random_range(2..40);
        // few distinct values so ties are common
        let levels = r.random_range(2..12);
        let mut pairs: Vec<(f64, bool)> = (0..len)
            .map(|_| (r.random_range(0..levels) as f64 * 0.5 - 1.0, r.random_bool(0.5)))
            .collect();
        pairs[0].1 = true;
        pairs[1].1 = false;
        let m = roc_metrics(&pairs).unwrap();
        let brute = brute_force_points(&pairs);
        assert_eq!(m.points.len(), brute.len(), "instance {inst}");
        for (a, b) in m.points.iter().zip(&brute) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12, "instance {inst}");
        }
        assert!((m.auc - mann_whitney(&pairs)).abs() < 1e-12, "instance {inst}");
        let adv = brute.iter().map(|q| q.1 - q.0).fold(f64::MIN, f64::max);
        assert!((m.advantage - adv).abs() < 1e-12);
        for &(target, tpr) in &m.tpr_at_fpr {
            let best = brute.iter().filter(|q| q.0 <= target).map(|q| q.1).fold(0.0, f64::max);
            assert_eq!(tpr, best);
        }
    }
}

#[test]
fn uninformative_scores_give_auc_near_half() {
    let mut r = rng::stream(1, Domain::Experiment, 0);
    let n = 4000;
    let pairs: Vec<(f64, bool)> = (0..n).map(|i| (rng::standard_normal(&mut r), i % 2 == 0)).collect();
    let m = roc_metrics(&pairs).unwrap();
    let (a, b) = (n as f64 / 2.0, n as f64 / 2.0);
    let sd = ((a + b + 1.0) / (12.0 * a * b)).sqrt();
    assert!((m.auc - 0.5).abs() < 4.0 * sd, "auc {} sd {sd}", m.auc);
}

#[test]
fn single_class_roc_is_undefined() {
    let err = roc_metrics(&[(0.1, true), (0.4, true)]).unwrap_err();
    assert_eq!(err.kind(), "undefined_metric");
}

proptest! {
    #[test]
    fn lira_matches_gaussian_likelihood_ratio(
        ins in prop::collection::vec(-5.0f64..5.0, 1..10),
        outs in prop::collection::vec(-5.0f64..5.0, 1..10),
        obs in -8.0f64..8.0,
    ) {
        let fit = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
            (mu, var.max(VARIANCE_FLOOR))
        };
        let density = |x: f64, (mu, var): (f64, f64)| {
            (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let expected = (density(obs, fit(&ins)) / density(obs, fit(&outs))).ln();
        let got = lira_score(&ins, &outs, obs).unwrap();
        if expected.is_finite() {
            prop_assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{} vs {}", got, expected);
        }
    }
}

fn tiny_config(epsilon: Option<f64>) -> (SyntheticTaskSpec, dpfew::model::ModelState, ShadowConfig) {
    let task = SyntheticTaskSpec {
        shift: 1.0,
        ..SyntheticTaskSpec::default()
    };
    let arch = Architecture::new(task.input_dim, 16, 8, task.classes);
    let backbone = pretrain_backbone(&task, arch, &PretrainConfig::default(), 0).unwrap();
    let cfg = ShadowConfig {
        shadows: 10,
        shots: 3,
        mode: Mode::Film,
        hyper: Hyper {
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 15,
            clip_norm: 1.0,
        },
        epsilon,
        ..ShadowConfig::default()
    };
    (task, backbone, cfg)
}

#[test]
fn population_is_deterministic_and_guarded() {
    let (task, backbone, cfg) = tiny_config(Some(4.0));
    let a = build_population(&task, &backbone, &cfg, 3).unwrap();
    let b = build_population(&task, &backbone, &cfg, 3).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.confidences, b.confidences);
    assert_eq!(a.len(), cfg.shadows + 1);
    assert!(a.noise_multipliers.iter().all(|s| s.unwrap() > 0.0));
    for c in a.in_counts() {
        assert!((2..=a.len() - 2).contains(&c));
    }
    let x = attack_all(&a, VarianceMode::PerExample).unwrap();
    let y = attack_all(&b, VarianceMode::PerExample).unwrap();
    assert_eq!(x, y);
}

#[test]
fn membership_counts_follow_a_fair_binomial() {
    let (task, backbone, mut cfg) = tiny_config(None);
    cfg.shadows = 40;
    cfg.shots = 20;
    cfg.hyper.epochs = 1;
    let pop = build_population(&task, &backbone, &cfg, 9).unwrap();
    let m = pop.len() as f64;
    let counts = pop.in_counts();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    // mean of n Bin(m, 1/2) counts has sd sqrt(m/4/n)
    assert!((mean - m / 2.0).abs() < 4.0 * (m / 4.0 / n).sqrt(), "mean {mean}");
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / (m / 4.0) - 1.0).abs() < 0.35, "variance {var}");
    // every model trains on about half of the pool
    for mask in &pop.masks {
        let k = mask.iter().filter(|b| **b).count() as f64;
        assert!((k - n / 2.0).abs() < 5.0 * (n / 4.0).sqrt());
    }
}

#[test]
fn attack_scores_use_leave_one_out_shadows() {
    let (task, backbone, cfg) = tiny_config(None);
    let pop = build_population(&task, &backbone, &cfg, 4).unwrap();
    let rec = attack_all(&pop, VarianceMode::PerExample).unwrap();
    assert_eq!(rec.pairs.len(), pop.len() * pop.pool.len());
    for p in rec.pairs.iter().step_by(7) {
        let others = (0..pop.len()).filter(|&j| j != p.model);
        let (ins, outs): (Vec<usize>, Vec<usize>) = others.partition(|&j| pop.masks[j][p.example]);
        let conf = |js: &[usize]| js.iter().map(|&j| pop.confidences[j][p.example]).collect::<Vec<_>>();
        let expected = lira_score(&conf(&ins), &conf(&outs), pop.confidences[p.model][p.example]).unwrap();
        assert!((p.score - expected).abs() < 1e-12);
        assert_eq!(p.member, pop.masks[p.model][p.example]);
    }
    assert!(rec.metrics.auc > 0.5);
}

#[test]
fn bound_check_flags_only_excess() {
    let pairs: Vec<(f64, bool)> = (0..20).map(|i| (i as f64, i >= 10)).collect();
    let m = roc_metrics(&pairs).unwrap();
    assert_eq!(m.auc, 1.0);
    assert!(!dp_bound_violations(&m, 0.5, 0.0, 0.0).is_empty());
    assert!(dp_bound_violations(&m, 0.5, 1.0, 0.0).is_empty());
}
