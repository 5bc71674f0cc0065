//! DP-SGD / DP-Adam: Poisson sampling, per-example clipping, Gaussian noise,
//! and updates restricted to the trainable prefix of the active mode.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FewShotDataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{self, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpOptimConfig {
    /// ℓ2 bound on each per-example gradient.
    pub clip_norm: f64,
    /// Required when training privately; calibrated by the accountant.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Expected batch size `B`; the sampling ratio is `B / |D|`.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
}

impl DpOptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::param("clip_norm", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be > 0"));
        }
        if let Some(s) = self.noise_multiplier {
            if !(s >= 0.0) {
                return Err(Error::param("noise_multiplier", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// `⌈n / B⌉`, with `B` capped at `n`.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let b = self.batch_size.min(n).max(1);
        n.div_ceil(b)
    }

    pub fn sample_rate(&self, n: usize) -> f64 {
        (self.batch_size as f64 / n as f64).min(1.0)
    }

    /// Planned step count `epochs · ⌈n / B⌉`.
    pub fn planned_steps(&self, n: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(n)) as u64
    }
}

/// Whether a training run is privatised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Privacy {
    NonPrivate,
    Private,
}

/// Each index is kept independently with probability `q`.
pub fn poisson_batch(n: usize, q: f64, rng: &mut SimRng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g · min(1, clip / ‖g‖₂)`.
pub fn clip_grad(g: &[f64], clip: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip);
    out
}

/// Clips in place and returns the norm before clipping.
pub fn clip_in_place(g: &mut [f64], clip: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > clip {
        let s = clip / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    norm
}

/// Neumaier-compensated sum of equal-length vectors, in the given order.
pub(crate) fn compensated_sum(rows: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut comp = vec![0.0; len];
    for r in rows {
        for j in 0..len {
            let (s, x) = (sum[j], r[j]);
            let t = s + x;
            comp[j] += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
            sum[j] = t;
        }
    }
    for j in 0..len {
        sum[j] += comp[j];
    }
    sum
}

/// Outcome of privatising one batch.
#[derive(Clone, Debug)]
pub struct PrivatizedGradient {
    pub gradient: Vec<f64>,
    /// Largest norm contributed by any single example after clipping.
    pub max_contribution: f64,
}

/// `(Σ clip(g_i) + N(0, σ²·clip²·I)) / B` over the trainable prefix.
///
/// Per-example gradients are computed in parallel; the reduction runs in batch
/// order, and noise is drawn sequentially from `rng`, so the result does not
/// depend on the thread count.
pub fn privatized_gradient(
    model: &ModelState,
    data: &FewShotDataset,
    batch: &[usize],
    clip: f64,
    sigma: f64,
    expected_batch: f64,
    rng: &mut SimRng,
) -> PrivatizedGradient {
    let len = model.trainable_len();
    let rows: Vec<(Vec<f64>, f64)> = batch
        .par_iter()
        .map(|&i| {
            let mut g = vec![0.0; len];
            model.grad_into(data.x(i), data.y(i), &mut g);
            clip_in_place(&mut g, clip);
            let n = l2_norm(&g);
            (g, n)
        })
        .collect();
    let max_contribution = rows.iter().fold(0.0f64, |m, (_, n)| m.max(*n));
    debug_assert!(max_contribution <= clip * (1.0 + 1e-12));
    let grads: Vec<Vec<f64>> = rows.into_iter().map(|(g, _)| g).collect();
    let mut sum = compensated_sum(&grads, len);
    if sigma > 0.0 {
        let std = sigma * clip;
        for s in sum.iter_mut() {
            *s += std * rng::standard_normal(rng);
        }
    }
    let inv = 1.0 / expected_batch;
    for s in sum.iter_mut() {
        *s *= inv;
    }
    PrivatizedGradient {
        gradient: sum,
        max_contribution,
    }
}

/// Plain mean gradient over a batch (no clipping or noise).
pub fn mean_gradient(model: &ModelState, data: &FewShotDataset, batch: &[usize]) -> Vec<f64> {
    let len = model.trainable_len();
    let grads: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|&i| {
            let mut g = vec![0.0; len];
            model.grad_into(data.x(i), data.y(i), &mut g);
            g
        })
        .collect();
    let mut sum = compensated_sum(&grads, len);
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        for s in sum.iter_mut() {
            *s *= inv;
        }
    }
    sum
}

/// Optimizer state over the trainable prefix.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            m: if moments { vec![0.0; len] } else { Vec::new() },
            v: if moments { vec![0.0; len] } else { Vec::new() },
            t: 0,
        }
    }

    /// One update of `params` against gradient `grad`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for j in 0..params.len() {
                    self.m[j] = beta1 * self.m[j] + (1.0 - beta1) * grad[j];
                    self.v[j] = beta2 * self.v[j] + (1.0 - beta2) * grad[j] * grad[j];
                    params[j] -= lr * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One DP step on `batch` (drawn by [`poisson_batch`]). An empty batch still
/// applies a noise-only update. Returns the largest clipped contribution.
pub fn dp_step(
    model: &mut ModelState,
    data: &FewShotDataset,
    batch: &[usize],
    cfg: &DpOptimConfig,
    opt: &mut Optimizer,
    rng: &mut SimRng,
) -> Result<f64> {
    let sigma = cfg
        .noise_multiplier
        .ok_or_else(|| Error::Config("private step requires a calibrated noise_multiplier".into()))?;
    let pg = privatized_gradient(model, data, batch, cfg.clip_norm, sigma, cfg.batch_size as f64, rng);
    opt.apply(model.trainable_mut(), &pg.gradient, cfg.learning_rate);
    Ok(pg.max_contribution)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    /// Realised number of optimizer steps `T`.
    pub steps: u64,
    /// Largest per-example contribution norm seen in any private step.
    pub max_contribution: f64,
}

/// Train on every example of `data`.
///
/// Private runs take `epochs · ⌈|D|/B⌉` Poisson-sampled steps at
/// `q = B/|D|`; non-private runs shuffle each epoch and walk mini-batches of
/// size `B` without clipping or noise.
pub fn train(
    data: &FewShotDataset,
    model: ModelState,
    cfg: &DpOptimConfig,
    privacy: Privacy,
    rng: &mut SimRng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if privacy == Privacy::Private && cfg.noise_multiplier.is_none() {
        return Err(Error::Config("private training requires a calibrated noise_multiplier".into()));
    }
    let mut model = model;
    let n = data.len();
    let mut opt = Optimizer::new(cfg.optimizer, model.trainable_len());
    let spe = cfg.steps_per_epoch(n);
    let mut steps = 0u64;
    let mut max_contribution = 0.0f64;
    match privacy {
        Privacy::Private => {
            let q = cfg.sample_rate(n);
            for _ in 0..cfg.epochs * spe {
                let batch = poisson_batch(n, q, rng);
                let c = dp_step(&mut model, data, &batch, cfg, &mut opt, rng)?;
                max_contribution = max_contribution.max(c);
                steps += 1;
            }
        }
        Privacy::NonPrivate => {
            let b = cfg.batch_size.min(n);
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(rng);
                for chunk in order.chunks(b) {
                    let g = mean_gradient(&model, data, chunk);
                    opt.apply(model.trainable_mut(), &g, cfg.learning_rate);
                    steps += 1;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        steps,
        max_contribution,
    })
}
