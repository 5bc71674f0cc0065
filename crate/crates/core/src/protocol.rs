//! Centralised experimental pipeline: draw `|D| = C·S`, tune on a 70/30
//! split with a fixed trial budget, retrain on all of `D`, evaluate on the
//! test split. Also the analysis metrics built on top of sweep results.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, AccountantKind, PrivacyBudget};
use crate::data::{FewShotDataset, Split, SyntheticTaskSpec};
use crate::dp_optim::{self, DpOptimConfig, OptimizerKind, Privacy};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelState};
use crate::rng::{self, Domain, SimRng};

/// Search space for the tuner. The batch-size upper bound is always `|D|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperRanges {
    pub epochs: (usize, usize),
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub batch_size_min: usize,
    pub clip_norm: (f64, f64),
}

impl Default for HyperRanges {
    fn default() -> Self {
        Self {
            epochs: (1, 200),
            learning_rate: (1e-7, 1e-2),
            batch_size_min: 10,
            clip_norm: (0.2, 10.0),
        }
    }
}

impl HyperRanges {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs.0 < 1 || self.epochs.0 > self.epochs.1 {
            errs.push(format!("ranges.epochs: need 1 <= lo <= hi, got {:?}", self.epochs));
        }
        if !(self.learning_rate.0 > 0.0 && self.learning_rate.0 <= self.learning_rate.1) {
            errs.push(format!("ranges.learning_rate: need 0 < lo <= hi, got {:?}", self.learning_rate));
        }
        if self.batch_size_min < 1 {
            errs.push("ranges.batch_size_min: must be >= 1".into());
        }
        if !(self.clip_norm.0 > 0.0 && self.clip_norm.0 <= self.clip_norm.1) {
            errs.push(format!("ranges.clip_norm: need 0 < lo <= hi, got {:?}", self.clip_norm));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// One point of the search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Hyper {
    /// Position in the unit cube (log scale for the learning rate).
    fn to_unit(self, r: &HyperRanges, n: usize) -> [f64; 4] {
        let bmin = r.batch_size_min.min(n);
        [
            unit(self.epochs as f64, r.epochs.0 as f64, r.epochs.1 as f64),
            unit(self.learning_rate.ln(), r.learning_rate.0.ln(), r.learning_rate.1.ln()),
            unit(self.batch_size as f64, bmin as f64, n as f64),
            unit(self.clip_norm, r.clip_norm.0, r.clip_norm.1),
        ]
    }

    fn from_unit(u: [f64; 4], r: &HyperRanges, n: usize) -> Self {
        let bmin = r.batch_size_min.min(n);
        let lerp = |t: f64, lo: f64, hi: f64| lo + t.clamp(0.0, 1.0) * (hi - lo);
        Self {
            epochs: lerp(u[0], r.epochs.0 as f64, r.epochs.1 as f64 + 0.999).floor() as usize,
            learning_rate: lerp(u[1], r.learning_rate.0.ln(), r.learning_rate.1.ln()).exp(),
            batch_size: (lerp(u[2], bmin as f64, n as f64 + 0.999).floor() as usize).clamp(bmin, n),
            clip_norm: lerp(u[3], r.clip_norm.0, r.clip_norm.1),
        }
        .clamped(r, n)
    }

    fn clamped(mut self, r: &HyperRanges, n: usize) -> Self {
        self.epochs = self.epochs.clamp(r.epochs.0, r.epochs.1);
        self.batch_size = self.batch_size.clamp(r.batch_size_min.min(n), n);
        self
    }
}

fn unit(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerKind {
    /// Independent draws from the ranges.
    Random,
    /// Tree-structured Parzen style: after a random warm-up, candidates are
    /// drawn around good trials and ranked by a good/bad density ratio.
    Tpe,
}

/// Which optimizer each kind of run uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerPolicy {
    pub private: OptimizerKind,
    pub non_private_head_film: OptimizerKind,
    pub non_private_all: OptimizerKind,
}

impl Default for OptimizerPolicy {
    fn default() -> Self {
        Self {
            private: OptimizerKind::adam(),
            non_private_head_film: OptimizerKind::adam(),
            non_private_all: OptimizerKind::Sgd,
        }
    }
}

impl OptimizerPolicy {
    pub fn pick(&self, mode: Mode, private: bool) -> OptimizerKind {
        match (private, mode) {
            (true, _) => self.private,
            (false, Mode::All) => self.non_private_all,
            (false, _) => self.non_private_head_film,
        }
    }
}

/// Settings shared by every cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub tuner_budget: usize,
    pub tuner: TunerKind,
    pub ranges: HyperRanges,
    pub val_fraction: f64,
    pub test_per_class: usize,
    /// Fixed δ; `None` means `δ = 1/|D|` per cell.
    pub delta: Option<f64>,
    pub accountant: AccountantKind,
    pub optimizers: OptimizerPolicy,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            tuner_budget: 20,
            tuner: TunerKind::Random,
            ranges: HyperRanges::default(),
            val_fraction: 0.3,
            test_per_class: 200,
            delta: None,
            accountant: AccountantKind::Rdp,
            optimizers: OptimizerPolicy::default(),
        }
    }
}

/// Result of one seed of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub steps: u64,
    pub noise_multiplier: Option<f64>,
    pub delta: Option<f64>,
    pub hyper: Hyper,
    /// Best validation score during tuning; absent for fixed hyperparameters.
    pub validation_accuracy: Option<f64>,
    pub candidates_trained: usize,
}

/// `(S, ε, mode)` cell with per-seed records and medians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub shots: usize,
    /// `None` for non-private.
    pub epsilon: Option<f64>,
    pub mode: Mode,
    pub records: Vec<SeedRecord>,
    pub median_test_accuracy: f64,
    pub median_train_accuracy: f64,
}

impl SweepCell {
    fn from_records(shots: usize, epsilon: Option<f64>, mode: Mode, records: Vec<SeedRecord>) -> Self {
        let test: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
        let train: Vec<f64> = records.iter().map(|r| r.train_accuracy).collect();
        Self {
            shots,
            epsilon,
            mode,
            median_test_accuracy: median(&test),
            median_train_accuracy: median(&train),
            records,
        }
    }

    pub fn regime(&self) -> RegimeReport {
        regime_report(self.median_train_accuracy, self.median_test_accuracy)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, shots: usize, epsilon: Option<f64>, mode: Mode) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.shots == shots && c.epsilon == epsilon && c.mode == mode)
    }

    /// `(S, median test accuracy)` for one `(ε, mode)`, sorted by S.
    pub fn curve(&self, epsilon: Option<f64>, mode: Mode) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .cells
            .iter()
            .filter(|c| c.epsilon == epsilon && c.mode == mode)
            .map(|c| (c.shots as f64, c.median_test_accuracy))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    }
}

/// Median; mean of the middle pair for even lengths; NaN when empty.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Per-class split of `data` into `(train, val)` indices with about
/// `val_fraction` of each class in validation. Every class keeps at least one
/// training example; a class with a single example contributes nothing to
/// validation.
pub fn stratified_split(data: &FewShotDataset, val_fraction: f64, rng: &mut SimRng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.y(i) == c).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct Trial {
    unit: [f64; 4],
    score: f64,
}

struct Tuner<'a> {
    kind: TunerKind,
    ranges: &'a HyperRanges,
    n: usize,
    rng: SimRng,
    trials: Vec<Trial>,
}

impl<'a> Tuner<'a> {
    const WARMUP: usize = 8;
    const CANDIDATES: usize = 24;

    fn random_unit(&mut self) -> [f64; 4] {
        [
            self.rng.random::<f64>(),
            self.rng.random::<f64>(),
            self.rng.random::<f64>(),
            self.rng.random::<f64>(),
        ]
    }

    fn propose(&mut self) -> Hyper {
        let u = match self.kind {
            TunerKind::Random => self.random_unit(),
            TunerKind::Tpe if self.trials.len() < Self::WARMUP => self.random_unit(),
            TunerKind::Tpe => self.propose_tpe(),
        };
        Hyper::from_unit(u, self.ranges, self.n)
    }

    fn propose_tpe(&mut self) -> [f64; 4] {
        let mut order: Vec<usize> = (0..self.trials.len()).collect();
        order.sort_by(|&a, &b| self.trials[b].score.total_cmp(&self.trials[a].score));
        let n_good = (self.trials.len() / 4).max(1);
        let good: Vec<[f64; 4]> = order[..n_good].iter().map(|&i| self.trials[i].unit).collect();
        let bad: Vec<[f64; 4]> = order[n_good..].iter().map(|&i| self.trials[i].unit).collect();
        let bw = 0.15;
        let density = |pts: &[[f64; 4]], x: &[f64; 4]| -> f64 {
            let prior = 1.0;
            let kde: f64 = pts
                .iter()
                .map(|p| {
                    let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-d2 / (2.0 * bw * bw)).exp()
                })
                .sum();
            (kde + prior * 0.05) / (pts.len() as f64 + 1.0)
        };
        let mut best = (f64::NEG_INFINITY, self.random_unit());
        for _ in 0..Self::CANDIDATES {
            let centre = good[self.rng.random_range(0..good.len())];
            let mut x = [0.0; 4];
            for k in 0..4 {
                x[k] = (centre[k] + bw * rng::standard_normal(&mut self.rng)).clamp(0.0, 1.0);
            }
            let ratio = density(&good, &x) / density(&bad, &x);
            if ratio > best.0 {
                best = (ratio, x);
            }
        }
        best.1
    }

    fn record(&mut self, hyper: Hyper, score: f64) {
        let unit = hyper.to_unit(self.ranges, self.n);
        self.trials.push(Trial { unit, score });
    }
}

/// A single training run from a backbone: mode, hyperparameters and budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub mode: Mode,
    pub hyper: Hyper,
    /// `None` for non-private training.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub accountant: AccountantKind,
    pub optimizers: OptimizerPolicy,
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: ModelState,
    pub steps: u64,
    pub noise_multiplier: Option<f64>,
}

/// Reset the adapters of `backbone`, switch to `spec.mode` and train on all of
/// `data`. Private runs calibrate σ on the realised `|data|`.
pub fn fit(data: &FewShotDataset, backbone: &ModelState, spec: &TrainSpec, rng: &mut SimRng) -> Result<Fitted> {
    let n = data.len();
    let h = spec.hyper;
    let mut opt = DpOptimConfig {
        clip_norm: h.clip_norm,
        noise_multiplier: None,
        batch_size: h.batch_size.clamp(1, n.max(1)),
        learning_rate: h.learning_rate,
        optimizer: spec.optimizers.pick(spec.mode, spec.epsilon.is_some()),
        epochs: h.epochs,
    };
    let mut start = backbone.clone().with_mode(spec.mode);
    start.reset_adapters();
    let privacy = match spec.epsilon {
        Some(eps) => {
            let sigma = calibrate_sigma(
                PrivacyBudget::new(eps, spec.delta)?,
                opt.sample_rate(n),
                opt.planned_steps(n),
                spec.accountant,
            )?;
            opt.noise_multiplier = Some(sigma);
            Privacy::Private
        }
        None => Privacy::NonPrivate,
    };
    let out = dp_optim::train(data, start, &opt, privacy, rng)?;
    Ok(Fitted {
        model: out.model,
        steps: out.steps,
        noise_multiplier: opt.noise_multiplier,
    })
}

struct CellContext<'a> {
    backbone: &'a ModelState,
    mode: Mode,
    epsilon: Option<f64>,
    delta: f64,
    cfg: &'a ProtocolConfig,
}

impl CellContext<'_> {
    fn train(&self, data: &FewShotDataset, hyper: Hyper, rng: &mut SimRng) -> Result<Fitted> {
        let spec = TrainSpec {
            mode: self.mode,
            hyper,
            epsilon: self.epsilon,
            delta: self.delta,
            accountant: self.cfg.accountant,
            optimizers: self.cfg.optimizers,
        };
        fit(data, self.backbone, &spec, rng)
    }
}

fn validation_score(model: &ModelState, val: &FewShotDataset) -> Result<f64> {
    // accuracy first, mean loss as tie-breaker
    let acc = val.accuracy(model)?;
    let mut loss = 0.0;
    for i in 0..val.len() {
        loss += model.loss(val.x(i), val.y(i))?;
    }
    let loss = if val.is_empty() { 0.0 } else { loss / val.len() as f64 };
    Ok(acc - 1e-6 * loss.min(1e5))
}

/// One seed of one cell.
fn run_seed(
    task: &SyntheticTaskSpec,
    ctx_base: (&ModelState, Mode, Option<f64>),
    shots: usize,
    seed: u64,
    cfg: &ProtocolConfig,
) -> Result<SeedRecord> {
    let (backbone, mode, epsilon) = ctx_base;
    let all = task.few_shot(shots, cfg.test_per_class, seed)?;
    let d = all.split(Split::Train);
    let test = all.split(Split::Test);
    let delta = cfg.delta.unwrap_or(1.0 / d.len() as f64);
    let ctx = CellContext {
        backbone,
        mode,
        epsilon,
        delta,
        cfg,
    };

    let mut split_rng = rng::stream(seed, Domain::Split, shots as u64);
    let (tr_idx, val_idx) = stratified_split(&d, cfg.val_fraction, &mut split_rng);
    debug_assert!(tr_idx.iter().all(|i| !val_idx.contains(i)));
    let tune_train = d.subset(&tr_idx);
    // single-shot classes leave validation empty; score on the tuning train split then
    let tune_val = if val_idx.is_empty() {
        tune_train.clone()
    } else {
        d.subset(&val_idx).with_split_tag(Split::Val)
    };

    let mut tuner = Tuner {
        kind: cfg.tuner,
        ranges: &cfg.ranges,
        n: tune_train.len(),
        rng: rng::stream(seed, Domain::Tuner, shots as u64),
        trials: Vec::new(),
    };
    let mut best: Option<(Hyper, f64)> = None;
    let mut trained = 0;
    for trial in 0..cfg.tuner_budget {
        let h = tuner.propose();
        let mut r = rng::stream(seed, Domain::DpOptim, trial as u64);
        let score = match ctx.train(&tune_train, h, &mut r) {
            Ok(f) => validation_score(&f.model, &tune_val)?,
            Err(Error::Calibration(_)) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        trained += 1;
        tuner.record(h, score);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((h, score));
        }
    }
    let (h, val_score) = best.ok_or_else(|| Error::Config("tuner budget must be at least 1".into()))?;
    let final_h = h.clamped(&cfg.ranges, d.len());
    let mut r = rng::stream(seed, Domain::DpOptim, u64::MAX);
    let Fitted {
        model,
        steps,
        noise_multiplier: sigma,
    } = ctx.train(&d, final_h, &mut r)?;
    Ok(SeedRecord {
        seed,
        test_accuracy: test.accuracy(&model)?,
        train_accuracy: d.accuracy(&model)?,
        steps,
        noise_multiplier: sigma,
        delta: epsilon.map(|_| delta),
        hyper: final_h,
        validation_accuracy: Some(val_score.clamp(0.0, 1.0)),
        candidates_trained: trained,
    })
}

/// Run the full protocol for one `(S, mode, ε)` cell over `seeds`.
pub fn run_protocol(
    task: &SyntheticTaskSpec,
    backbone: &ModelState,
    shots: usize,
    mode: Mode,
    epsilon: Option<f64>,
    seeds: &[u64],
    cfg: &ProtocolConfig,
) -> Result<SweepCell> {
    if shots == 0 {
        return Err(Error::param("shots", "must be >= 1"));
    }
    if seeds.is_empty() {
        return Err(Error::param("seeds", "need at least one seed"));
    }
    cfg.ranges.validate()?;
    let records = seeds
        .par_iter()
        .map(|&s| run_seed(task, (backbone, mode, epsilon), shots, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCell::from_records(shots, epsilon, mode, records))
}

/// Like [`run_protocol`] but with fixed hyperparameters instead of tuning.
pub fn run_fixed(
    task: &SyntheticTaskSpec,
    backbone: &ModelState,
    shots: usize,
    mode: Mode,
    epsilon: Option<f64>,
    hyper: Hyper,
    seeds: &[u64],
    cfg: &ProtocolConfig,
) -> Result<SweepCell> {
    if shots == 0 {
        return Err(Error::param("shots", "must be >= 1"));
    }
    if seeds.is_empty() {
        return Err(Error::param("seeds", "need at least one seed"));
    }
    let records = seeds
        .par_iter()
        .map(|&seed| {
            let all = task.few_shot(shots, cfg.test_per_class, seed)?;
            let d = all.split(Split::Train);
            let test = all.split(Split::Test);
            let delta = cfg.delta.unwrap_or(1.0 / d.len() as f64);
            let hyper = hyper.clamped(&cfg.ranges, d.len());
            let spec = TrainSpec {
                mode,
                hyper,
                epsilon,
                delta,
                accountant: cfg.accountant,
                optimizers: cfg.optimizers,
            };
            let mut r = rng::stream(seed, Domain::DpOptim, u64::MAX);
            let f = fit(&d, backbone, &spec, &mut r)?;
            Ok(SeedRecord {
                seed,
                test_accuracy: test.accuracy(&f.model)?,
                train_accuracy: d.accuracy(&f.model)?,
                steps: f.steps,
                noise_multiplier: f.noise_multiplier,
                delta: epsilon.map(|_| delta),
                hyper,
                validation_accuracy: None,
                candidates_trained: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCell::from_records(shots, epsilon, mode, records))
}

/// Every combination of `shots × epsilons × modes`, cells run in parallel.
pub fn sweep(
    task: &SyntheticTaskSpec,
    backbone: &ModelState,
    shots: &[usize],
    epsilons: &[Option<f64>],
    modes: &[Mode],
    seeds: &[u64],
    cfg: &ProtocolConfig,
) -> Result<SweepResult> {
    let mut keys = Vec::new();
    for &s in shots {
        for &e in epsilons {
            for &m in modes {
                keys.push((s, e, m));
            }
        }
    }
    let cells = keys
        .par_iter()
        .map(|&(s, e, m)| run_protocol(task, backbone, s, m, e, seeds, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TdBucket {
    Low,
    Medium,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferDifficulty {
    pub score: f64,
    pub bucket: TdBucket,
}

/// `100·(acc_all − acc_head)/acc_all`; buckets `[0,5]` low, `(5,10]` medium,
/// above 10 high. Negative scores count as low.
pub fn transfer_difficulty(acc_all: f64, acc_head: f64) -> Result<TransferDifficulty> {
    if !(acc_all > 0.0) {
        return Err(Error::Input(format!("acc_all must be > 0, got {acc_all}")));
    }
    let score = 100.0 * (acc_all - acc_head) / acc_all;
    let bucket = if score <= 5.0 {
        TdBucket::Low
    } else if score <= 10.0 {
        TdBucket::Medium
    } else {
        TdBucket::High
    };
    Ok(TransferDifficulty { score, bucket })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ShotMultiplier {
    Reached {
        /// Smallest S (continuous) where the DP curve reaches the target.
        min_shots: f64,
        multiplier: f64,
        /// DP already met the target at the first grid point.
        clamped: bool,
    },
    ExceedsGrid,
}

impl ShotMultiplier {
    pub fn multiplier(&self) -> Option<f64> {
        match self {
            ShotMultiplier::Reached { multiplier, .. } => Some(*multiplier),
            ShotMultiplier::ExceedsGrid => None,
        }
    }

    /// Smallest integer S on the grid, for reporting on `S ∈ {1, 2, ...}`.
    pub fn integer_min_shots(&self) -> Option<u64> {
        match self {
            ShotMultiplier::Reached { min_shots, .. } => Some((min_shots - 1e-9).ceil() as u64),
            ShotMultiplier::ExceedsGrid => None,
        }
    }
}

fn interpolate(curve: &[(f64, f64)], s: f64) -> Option<f64> {
    if curve.len() == 1 {
        return (curve[0].0 == s).then_some(curve[0].1);
    }
    curve.windows(2).find_map(|w| {
        let ((s0, a0), (s1, a1)) = (w[0], w[1]);
        (s >= s0 && s <= s1).then(|| if s1 == s0 { a1 } else { a0 + (a1 - a0) * (s - s0) / (s1 - s0) })
    })
}

/// Minimum S on the linearly interpolated DP curve whose accuracy reaches the
/// non-private accuracy at `s_ref`, divided by `s_ref`.
pub fn shot_multiplier(np_curve: &[(f64, f64)], dp_curve: &[(f64, f64)], s_ref: f64) -> Result<ShotMultiplier> {
    if np_curve.is_empty() || dp_curve.is_empty() {
        return Err(Error::Input("shot multiplier needs non-empty curves".into()));
    }
    for c in [np_curve, dp_curve] {
        if c.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::Input("curves must be sorted by S".into()));
        }
    }
    if !(s_ref > 0.0) {
        return Err(Error::param("s_ref", "must be > 0"));
    }
    let target = interpolate(np_curve, s_ref)
        .ok_or_else(|| Error::Input(format!("S_ref={s_ref} outside the non-private curve support")))?;
    let (s_first, a_first) = dp_curve[0];
    if a_first >= target {
        return Ok(ShotMultiplier::Reached {
            min_shots: s_first,
            multiplier: s_first / s_ref,
            clamped: true,
        });
    }
    for w in dp_curve.windows(2) {
        let ((s0, a0), (s1, a1)) = (w[0], w[1]);
        if a1 >= target && a0 < target {
            let s = s0 + (target - a0) / (a1 - a0) * (s1 - s0);
            return Ok(ShotMultiplier::Reached {
                min_shots: s,
                multiplier: s / s_ref,
                clamped: false,
            });
        }
    }
    Ok(ShotMultiplier::ExceedsGrid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Interpolating,
    Regularized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub gap: f64,
    pub regime: Regime,
}

/// Train/test gap and the regime label (`Interpolating` iff train ≥ 0.99).
pub fn regime_report(train_acc: f64, test_acc: f64) -> RegimeReport {
    RegimeReport {
        gap: train_acc - test_acc,
        regime: if train_acc >= 0.99 {
            Regime::Interpolating
        } else {
            Regime::Regularized
        },
    }
}

/// Shots present in a result, sorted.
pub fn shots_of(result: &SweepResult) -> Vec<usize> {
    result.cells.iter().map(|c| c.shots).collect::<BTreeSet<_>>().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn td_table_values() {
        let svhn = transfer_difficulty(91.6, 43.1).unwrap();
        assert_eq!(format!("{:.1}", svhn.score), "52.9");
        assert_eq!(svhn.bucket, TdBucket::High);
        let c100 = transfer_difficulty(84.2, 77.6).unwrap();
        assert_eq!(format!("{:.1}", c100.score), "7.8");
        assert_eq!(c100.bucket, TdBucket::Medium);
        let same = transfer_difficulty(50.0, 50.0).unwrap();
        assert_eq!(same.score, 0.0);
        assert_eq!(same.bucket, TdBucket::Low);
        assert!(transfer_difficulty(0.0, 1.0).is_err());
    }

    #[test]
    fn td_bucket_boundaries() {
        let b = |score: f64| transfer_difficulty(100.0, 100.0 - score).unwrap().bucket;
        assert_eq!(b(5.0), TdBucket::Low);
        assert_eq!(b(10.0), TdBucket::Medium);
        let above = transfer_difficulty(100.0, 100.0 - f64::from_bits(10.0f64.to_bits() + 1) - 1e-12).unwrap();
        assert_eq!(above.bucket, TdBucket::High);
    }

    #[test]
    fn shot_multiplier_hand_interpolation() {
        let np = [(1.0, 40.0), (5.0, 74.8), (10.0, 80.0)];
        let dp = [(1.0, 20.0), (5.0, 30.0), (10.0, 40.0), (25.0, 56.6), (50.0, 81.5), (100.0, 85.0)];
        let m = shot_multiplier(&np, &dp, 5.0).unwrap();
        // 25 + (74.8 - 56.6)/(81.5 - 56.6)·25 = 43.2731
        let ShotMultiplier::Reached { min_shots, multiplier, clamped } = m else { panic!() };
        assert!((min_shots - 43.273_092).abs() < 1e-5);
        assert!((multiplier - 8.654_618).abs() < 1e-5);
        assert!(!clamped);
        assert_eq!(m.integer_min_shots(), Some(44));
    }

    #[test]
    fn shot_multiplier_edges() {
        let c = [(1.0, 10.0), (5.0, 50.0), (10.0, 60.0)];
        assert_eq!(shot_multiplier(&c, &c, 5.0).unwrap().multiplier(), Some(1.0));
        let dp_high = [(5.0, 90.0), (10.0, 95.0)];
        let m = shot_multiplier(&c, &dp_high, 10.0).unwrap();
        assert!(matches!(m, ShotMultiplier::Reached { clamped: true, .. }));
        assert!(m.multiplier().unwrap() <= 5.0 / 10.0);
        let dp_low = [(1.0, 1.0), (10.0, 2.0)];
        assert_eq!(shot_multiplier(&c, &dp_low, 5.0).unwrap(), ShotMultiplier::ExceedsGrid);
        assert!(shot_multiplier(&[], &c, 5.0).is_err());
    }

    #[test]
    fn regime_examples() {
        let r = regime_report(1.0, 0.6);
        assert!((r.gap - 0.4).abs() < 1e-12);
        assert_eq!(r.regime, Regime::Interpolating);
        let r = regime_report(0.55, 0.52);
        assert!((r.gap - 0.03).abs() < 1e-12);
        assert_eq!(r.regime, Regime::Regularized);
    }

    #[test]
    fn median_is_order_free() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[2.0, 3.0, 1.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let spec = SyntheticTaskSpec::default();
        let d = spec.sample(10, Split::Train, 1, 0).unwrap();
        let mut r = rng::stream(0, Domain::Split, 0);
        let (tr, va) = stratified_split(&d, 0.3, &mut r);
        assert_eq!(tr.len() + va.len(), d.len());
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(d.subset(&va).class_counts(), vec![3; 5]);
        let one = spec.sample(1, Split::Train, 1, 0).unwrap();
        let (tr, va) = stratified_split(&one, 0.3, &mut r);
        assert_eq!(tr.len(), 5);
        assert!(va.is_empty());
    }
}
