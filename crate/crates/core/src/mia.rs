//! Likelihood-ratio membership inference: a population of shadow models
//! trained on random halves of a candidate pool, per-example Gaussian score
//! models, and ROC evaluation at low false-positive rates.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::AccountantKind;
use crate::data::{FewShotDataset, Split, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::protocol::{fit, Hyper, OptimizerPolicy, TrainSpec};
use crate::model::Mode;
use crate::rng::{self, Domain};

/// Lower bound on the fitted confidence variances.
pub const VARIANCE_FLOOR: f64 = 1e-3;

/// False-positive rates reported by [`roc_metrics`].
pub const FPR_TARGETS: [f64; 3] = [1e-3, 1e-2, 1e-1];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Separate IN/OUT variance for every example.
    #[default]
    PerExample,
    /// One IN and one OUT variance shared by all examples of a target.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowConfig {
    /// Number of shadow models `M`; the population holds `M + 1` models.
    pub shadows: usize,
    /// Shots per class of the nominal training set; the pool holds twice that.
    pub shots: usize,
    pub mode: Mode,
    pub hyper: Hyper,
    pub epsilon: Option<f64>,
    /// Defaults to `1/|D|` with `|D| = C·shots`.
    pub delta: Option<f64>,
    pub accountant: AccountantKind,
    pub optimizers: OptimizerPolicy,
    pub variance: VarianceMode,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            shadows: 32,
            shots: 5,
            mode: Mode::Film,
            hyper: Hyper {
                epochs: 100,
                learning_rate: 1e-2,
                batch_size: 25,
                clip_norm: 1.0,
            },
            epsilon: None,
            delta: None,
            accountant: AccountantKind::Rdp,
            optimizers: OptimizerPolicy::default(),
            variance: VarianceMode::PerExample,
        }
    }
}

/// Target plus shadow models and who was trained on what.
#[derive(Clone, Debug)]
pub struct ShadowPopulation {
    pub pool: FewShotDataset,
    /// `masks[j][i]`: pool example `i` is in model `j`'s training set.
    pub masks: Vec<Vec<bool>>,
    pub models: Vec<ModelState>,
    /// `confidences[j][i]`: logit confidence of model `j` on example `i`.
    pub confidences: Vec<Vec<f64>>,
    pub noise_multipliers: Vec<Option<f64>>,
    /// Mask bits flipped by the deficit guard.
    pub resampled_bits: usize,
}

impl ShadowPopulation {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn in_counts(&self) -> Vec<usize> {
        (0..self.pool.len())
            .map(|i| self.masks.iter().filter(|m| m[i]).count())
            .collect()
    }
}

/// Each pool example needs two IN and two OUT models so it keeps at least one
/// of each once any single model is held out as the target. Deficits are
/// filled by flipping randomly chosen bits of that example.
fn guard_masks(masks: &mut [Vec<bool>], rng: &mut rng::SimRng) -> usize {
    const NEED: usize = 2;
    let models = masks.len();
    let examples = masks.first().map_or(0, Vec::len);
    let mut flipped = 0;
    for i in 0..examples {
        loop {
            let ins: Vec<usize> = (0..models).filter(|&j| masks[j][i]).collect();
            let outs: Vec<usize> = (0..models).filter(|&j| !masks[j][i]).collect();
            let pick = if ins.len() < NEED {
                outs
            } else if outs.len() < NEED {
                ins
            } else {
                break;
            };
            let j = pick[rng.random_range(0..pick.len())];
            masks[j][i] = !masks[j][i];
            flipped += 1;
        }
    }
    flipped
}

/// Sample a pool of `2·C·S` examples, draw Bernoulli(0.5) memberships for
/// `M + 1` models and train all of them with the same hyperparameters.
pub fn build_population(
    task: &SyntheticTaskSpec,
    backbone: &ModelState,
    cfg: &ShadowConfig,
    seed: u64,
) -> Result<ShadowPopulation> {
    if cfg.shadows < 3 {
        return Err(Error::param("shadows", "need at least 3 shadow models"));
    }
    if cfg.shots == 0 {
        return Err(Error::param("shots", "must be >= 1"));
    }
    let pool = task.sample(2 * cfg.shots, Split::Train, seed, 0)?;
    let n_models = cfg.shadows + 1;
    let mut masks: Vec<Vec<bool>> = (0..n_models)
        .map(|j| {
            let mut r = rng::stream(seed, Domain::ShadowMask, j as u64);
            (0..pool.len()).map(|_| r.random_bool(0.5)).collect()
        })
        .collect();
    let mut guard_rng = rng::stream(seed, Domain::ShadowMask, u64::MAX);
    let resampled_bits = guard_masks(&mut masks, &mut guard_rng);

    let delta = cfg.delta.unwrap_or(1.0 / (task.classes * cfg.shots) as f64);
    let trained = masks
        .par_iter()
        .enumerate()
        .map(|(j, mask)| {
            let idx: Vec<usize> = (0..pool.len()).filter(|&i| mask[i]).collect();
            let data = pool.subset(&idx);
            let spec = TrainSpec {
                mode: cfg.mode,
                hyper: cfg.hyper,
                epsilon: cfg.epsilon,
                delta,
                accountant: cfg.accountant,
                optimizers: cfg.optimizers,
            };
            let mut r = rng::stream(seed, Domain::Shadow, j as u64);
            let f = fit(&data, backbone, &spec, &mut r)?;
            let conf = (0..pool.len())
                .map(|i| f.model.confidence_logit(pool.x(i), pool.y(i)))
                .collect::<Result<Vec<_>>>()?;
            Ok((f.model, conf, f.noise_multiplier))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut models = Vec::with_capacity(n_models);
    let mut confidences = Vec::with_capacity(n_models);
    let mut noise_multipliers = Vec::with_capacity(n_models);
    for (m, c, s) in trained {
        models.push(m);
        confidences.push(c);
        noise_multipliers.push(s);
    }
    Ok(ShadowPopulation {
        pool,
        masks,
        models,
        confidences,
        noise_multipliers,
        resampled_bits,
    })
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

fn gauss_logpdf(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((x - mu) * (x - mu) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// `log N(obs; μ_in, σ²_in) − log N(obs; μ_out, σ²_out)` with the moments
/// fitted to the given confidences (population variance, floored).
pub fn lira_score(conf_in: &[f64], conf_out: &[f64], observed: f64) -> Result<f64> {
    if conf_in.is_empty() || conf_out.is_empty() {
        return Err(Error::Input("lira_score needs IN and OUT confidences".into()));
    }
    let (mi, vi) = mean_var(conf_in);
    let (mo, vo) = mean_var(conf_out);
    Ok(lira_score_moments(observed, (mi, vi), (mo, vo)))
}

/// Score from explicit `(mean, variance)` pairs.
pub fn lira_score_moments(observed: f64, inn: (f64, f64), out: (f64, f64)) -> f64 {
    let x = observed.clamp(-40.0, 40.0);
    gauss_logpdf(x, inn.0, inn.1.max(VARIANCE_FLOOR)) - gauss_logpdf(x, out.0, out.1.max(VARIANCE_FLOOR))
}

/// One scored `(target model, pool example)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub model: usize,
    pub example: usize,
    pub score: f64,
    pub member: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocMetrics {
    /// `(fpr, tpr)` from `(0,0)` to `(1,1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub advantage: f64,
    /// `(fpr target, tpr)` for each of [`FPR_TARGETS`].
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub positives: usize,
    pub negatives: usize,
}

impl RocMetrics {
    /// Highest TPR whose FPR does not exceed `target`.
    pub fn tpr_at(&self, target: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.0 <= target)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub pairs: Vec<ScoredPair>,
    pub metrics: RocMetrics,
}

/// Treat every model in turn as the target and score each pool example with
/// the IN/OUT confidences of the remaining models. All pairs feed one ROC.
pub fn attack_all(pop: &ShadowPopulation, variance: VarianceMode) -> Result<AttackRecord> {
    let n_models = pop.len();
    let n = pop.pool.len();
    let mut pairs = Vec::with_capacity(n_models * n);
    let mut ins = Vec::with_capacity(n_models);
    let mut outs = Vec::with_capacity(n_models);
    for t in 0..n_models {
        let mut moments = Vec::with_capacity(n);
        for i in 0..n {
            ins.clear();
            outs.clear();
            for j in (0..n_models).filter(|&j| j != t) {
                let c = pop.confidences[j][i];
                if pop.masks[j][i] {
                    ins.push(c);
                } else {
                    outs.push(c);
                }
            }
            if ins.is_empty() || outs.is_empty() {
                return Err(Error::Input(format!("example {i} lacks IN or OUT shadows for target {t}")));
            }
            moments.push((mean_var(&ins), mean_var(&outs), ins.len(), outs.len()));
        }
        if variance == VarianceMode::Pooled {
            let pool = |f: &dyn Fn(&((f64, f64), (f64, f64), usize, usize)) -> (f64, usize)| {
                let (s, w) = moments.iter().map(f).fold((0.0, 0), |a, b| (a.0 + b.0 * b.1 as f64, a.1 + b.1));
                s / w as f64
            };
            let vin = pool(&|m| (m.0 .1, m.2));
            let vout = pool(&|m| (m.1 .1, m.3));
            for m in &mut moments {
                m.0 .1 = vin;
                m.1 .1 = vout;
            }
        }
        for (i, m) in moments.iter().enumerate() {
            pairs.push(ScoredPair {
                model: t,
                example: i,
                score: lira_score_moments(pop.confidences[t][i], m.0, m.1),
                member: pop.masks[t][i],
            });
        }
    }
    let scored: Vec<(f64, bool)> = pairs.iter().map(|p| (p.score, p.member)).collect();
    let metrics = roc_metrics(&scored)?;
    Ok(AttackRecord { pairs, metrics })
}

/// Threshold sweep over the distinct scores; a pair is flagged as a member
/// when its score is at least the threshold.
pub fn roc_metrics(pairs: &[(f64, bool)]) -> Result<RocMetrics> {
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC needs both classes, got {positives} members and {negatives} non-members"
        )));
    }
    if pairs.iter().any(|p| p.0.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let s = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == s {
            if sorted[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[1].1 + w[0].1))
        .sum();
    let advantage = points.iter().map(|q| q.1 - q.0).fold(0.0, f64::max);
    let mut m = RocMetrics {
        points,
        auc,
        advantage,
        tpr_at_fpr: Vec::new(),
        positives,
        negatives,
    };
    m.tpr_at_fpr = FPR_TARGETS.iter().map(|&f| (f, m.tpr_at(f))).collect();
    Ok(m)
}

/// ROC points that break `TPR ≤ e^ε·FPR + δ + z·SE`, where SE is the binomial
/// standard error of the TPR estimate. Returns the offending `(fpr, tpr, bound)`.
pub fn dp_bound_violations(m: &RocMetrics, epsilon: f64, delta: f64, z: f64) -> Vec<(f64, f64, f64)> {
    let p = m.positives as f64;
    m.points
        .iter()
        .filter_map(|&(fpr, tpr)| {
            let se = (tpr * (1.0 - tpr) / p).sqrt();
            let bound = epsilon.exp() * fpr + delta + z * se;
            (tpr > bound + 1e-12).then_some((fpr, tpr, bound))
        })
        .collect()
}
