//! Cross-device federated fine-tuning with user-level DP: client sharding,
//! cohort sampling, local SGD, clipped and noised aggregation with adaptive
//! clipping, FedAvg/FedAdam servers and a communication-cost count.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution as _, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, calibrate_sigma, AccountantKind, MechanismParams, PrivacyBudget};
use crate::data::FewShotDataset;
use crate::dp_optim::{self, clip_in_place, compensated_sum, DpOptimConfig, OptimizerKind, Privacy};
use crate::error::{Error, Result};
use crate::model::{Architecture, ArchitectureDescriptor, Mode, ModelState};
use crate::rng::{self, Domain, SimRng};

/// How examples are spread over clients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShardDistribution {
    #[default]
    Iid,
    /// Per-class Dirichlet split over clients; smaller concentration means
    /// more skewed label mixes.
    Heterogeneous { concentration: f64 },
}

#[derive(Clone, Debug)]
pub struct ClientShard {
    pub id: usize,
    pub data: FewShotDataset,
}

/// Split `data` into `n` disjoint, non-empty shards of at most `cap` examples.
pub fn shard_clients(
    data: &FewShotDataset,
    n: usize,
    distribution: ShardDistribution,
    cap: Option<usize>,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if n == 0 {
        return Err(Error::param("clients", "must be >= 1"));
    }
    if n > data.len() {
        return Err(Error::Input(format!("cannot shard {} examples over {n} clients", data.len())));
    }
    if cap == Some(0) {
        return Err(Error::param("cap", "must be >= 1"));
    }
    let mut r = rng::stream(seed, Domain::FedShard, 0);
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n];
    match distribution {
        ShardDistribution::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut r);
            let (base, extra) = (data.len() / n, data.len() % n);
            let mut at = 0;
            for (k, shard) in owned.iter_mut().enumerate() {
                let take = base + usize::from(k < extra);
                shard.extend_from_slice(&order[at..at + take]);
                at += take;
            }
        }
        ShardDistribution::Heterogeneous { concentration } => {
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|_| Error::param("concentration", "must be > 0"))?;
            for c in 0..data.classes {
                let weights: Vec<f64> = (0..n).map(|_| gamma.sample(&mut r).max(1e-300)).collect();
                let total: f64 = weights.iter().sum();
                let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.y(i) == c).collect();
                members.shuffle(&mut r);
                for i in members {
                    let mut u = r.random::<f64>() * total;
                    let mut k = 0;
                    while k + 1 < n && u >= weights[k] {
                        u -= weights[k];
                        k += 1;
                    }
                    owned[k].push(i);
                }
            }
            // every client gets at least one example, taken from the largest shard
            for k in 0..n {
                if owned[k].is_empty() {
                    let donor = (0..n).max_by_key(|&j| (owned[j].len(), std::cmp::Reverse(j))).unwrap_or(0);
                    let moved = owned[donor].pop().ok_or_else(|| Error::Input("no example left to move".into()))?;
                    owned[k].push(moved);
                }
            }
        }
    }
    Ok(owned
        .into_iter()
        .enumerate()
        .map(|(id, mut idx)| {
            idx.sort_unstable();
            if let Some(c) = cap {
                idx.truncate(c);
            }
            ClientShard {
                id,
                data: data.subset(&idx),
            }
        })
        .collect())
}

/// Mean total-variation distance between each client's label mix and the
/// pooled label mix.
pub fn label_skew(shards: &[ClientShard], classes: usize) -> f64 {
    let mut global = vec![0.0; classes];
    let mut total = 0.0;
    for s in shards {
        for (c, k) in s.data.class_counts().into_iter().enumerate() {
            global[c] += k as f64;
            total += k as f64;
        }
    }
    global.iter_mut().for_each(|g| *g /= total);
    let tv: f64 = shards
        .iter()
        .map(|s| {
            let n = s.data.len() as f64;
            0.5 * s
                .data
                .class_counts()
                .into_iter()
                .zip(&global)
                .map(|(k, g)| (k as f64 / n - g).abs())
                .sum::<f64>()
        })
        .sum();
    tv / shards.len() as f64
}

/// Local SGD from the global model. Returns the change of the trainable
/// coordinates.
pub fn local_update(
    client: &ClientShard,
    global: &ModelState,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    if client.data.is_empty() {
        return Err(Error::Input(format!("client {} has no data", client.id)));
    }
    let cfg = DpOptimConfig {
        clip_norm: 1.0,
        noise_multiplier: None,
        batch_size,
        learning_rate,
        optimizer: OptimizerKind::Sgd,
        epochs,
    };
    let out = dp_optim::train(&client.data, global.clone(), &cfg, Privacy::NonPrivate, rng)?;
    Ok(out
        .model
        .trainable()
        .iter()
        .zip(global.trainable())
        .map(|(a, b)| a - b)
        .collect())
}

/// Geometric clip-norm tracking of a target quantile of update norms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveClipState {
    pub clip: f64,
    pub target_quantile: f64,
    pub learning_rate: f64,
    /// Std of the noise added to the count of unclipped clients.
    pub count_noise_std: f64,
}

impl AdaptiveClipState {
    /// `B ← B·exp(−η_b(b̄ − γ))` where `b̄` is the unclipped fraction.
    pub fn update(&mut self, unclipped_fraction: f64) {
        self.clip *= (-self.learning_rate * (unclipped_fraction - self.target_quantile)).exp();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerOptimizer {
    FedAvg { learning_rate: f64 },
    /// Adam on `g = −Δ̄` without bias correction.
    FedAdam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl ServerOptimizer {
    pub fn fed_adam(learning_rate: f64) -> Self {
        ServerOptimizer::FedAdam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub noise_multiplier: f64,
    /// Accounting rate `m_acc / N`.
    pub sample_rate: f64,
    /// Executed cohort rate `m / N`, logged alongside.
    pub executed_rate: f64,
    pub rounds: u64,
    pub delta: f64,
    pub accountant: AccountantKind,
}

impl PrivacyLedger {
    /// ε for the realised `(σ, q, rounds)`.
    pub fn epsilon(&self) -> Result<f64> {
        accountant::epsilon(
            &MechanismParams::new(self.noise_multiplier, self.sample_rate, self.rounds),
            self.delta,
            self.accountant,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub model: ModelState,
    pub optimizer: ServerOptimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    pub round: u64,
    /// Current clip norm; adapted when `adaptive` is set.
    pub clip: f64,
    pub adaptive: Option<AdaptiveClipState>,
    pub ledger: Option<PrivacyLedger>,
    /// Cohort size used for noise scaling; the executed cohort when `None`.
    pub accounting_cohort: Option<usize>,
}

impl ServerState {
    pub fn new(model: ModelState, optimizer: ServerOptimizer, clip: f64) -> Self {
        let len = model.trainable_len();
        Self {
            model,
            optimizer,
            m: vec![0.0; len],
            v: vec![0.0; len],
            round: 0,
            clip,
            adaptive: None,
            ledger: None,
            accounting_cohort: None,
        }
    }

    fn apply(&mut self, mean_delta: &[f64]) {
        let params = self.model.trainable_mut();
        match self.optimizer {
            ServerOptimizer::FedAvg { learning_rate } => {
                for (p, d) in params.iter_mut().zip(mean_delta) {
                    *p += learning_rate * d;
                }
            }
            ServerOptimizer::FedAdam {
                learning_rate,
                beta1,
                beta2,
                eps,
            } => {
                for k in 0..params.len() {
                    let g = -mean_delta[k];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    params[k] -= learning_rate * self.m[k] / (self.v[k].sqrt() + eps);
                }
            }
        }
    }
}

/// What one aggregation round observed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub clip: f64,
    pub unclipped_fraction: f64,
}

/// Aggregate one cohort. With `private` set every delta is clipped to the
/// current clip norm and `N(0, (σ_Δ·B)²)` is added to the sum; the mean uses
/// the executed cohort size, the noise the accounting cohort. Without it the
/// plain mean is applied.
pub fn aggregate_round(
    server: &mut ServerState,
    mut deltas: Vec<Vec<f64>>,
    private: bool,
    rng: &mut SimRng,
) -> Result<RoundStats> {
    if deltas.is_empty() {
        return Err(Error::Input("cohort is empty".into()));
    }
    let len = server.model.trainable_len();
    if let Some(d) = deltas.iter().find(|d| d.len() != len) {
        return Err(Error::Dimension {
            expected: len,
            actual: d.len(),
            context: "client delta",
        });
    }
    let m = deltas.len();
    let clip = server.clip;
    let mut unclipped = 0usize;
    if private {
        for d in &mut deltas {
            if clip_in_place(d, clip) <= clip {
                unclipped += 1;
            }
        }
    } else {
        unclipped = deltas.iter().filter(|d| dp_optim::l2_norm(d) <= clip).count();
    }
    let mut mean = compensated_sum(&deltas, len);
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let m_acc = server.accounting_cohort.unwrap_or(m) as f64;
    let mut count = unclipped as f64;
    if private {
        let ledger = server
            .ledger
            .as_ref()
            .ok_or_else(|| Error::Config("private aggregation requires a calibrated noise multiplier".into()))?;
        let z = update_noise_multiplier(ledger.noise_multiplier, server.adaptive.as_ref())?;
        let std = z * clip / m_acc;
        for v in &mut mean {
            *v += std * rng::standard_normal(rng);
        }
        if let Some(a) = &server.adaptive {
            // scaled so the noise on the fraction is σ_b / m_acc
            count += a.count_noise_std * (m as f64 / m_acc) * rng::standard_normal(rng);
        }
    }
    let fraction = count / m as f64;
    server.apply(&mean);
    if let Some(a) = &mut server.adaptive {
        a.update(fraction);
        server.clip = a.clip;
    }
    server.round += 1;
    Ok(RoundStats {
        clip,
        unclipped_fraction: fraction,
    })
}

/// Share of the privacy budget left for the updates once the clipped-count
/// query is paid for: `z_Δ = (z⁻² − (2σ_b)⁻²)^(−1/2)`.
fn update_noise_multiplier(z: f64, adaptive: Option<&AdaptiveClipState>) -> Result<f64> {
    let Some(a) = adaptive else {
        return Ok(z);
    };
    if a.count_noise_std <= 0.0 || z == 0.0 {
        return Ok(z);
    }
    let sigma_b = a.count_noise_std;
    let rest = z.powi(-2) - (2.0 * sigma_b).powi(-2);
    if rest <= 0.0 {
        return Err(Error::Config(format!(
            "fed.clip.count_noise_std = {sigma_b} must exceed half the noise multiplier ({:.4}); raise it or the accounting cohort", z / 2.0
        )));
    }
    Ok(rest.powf(-0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub initial: f64,
    pub adaptive: bool,
    pub target_quantile: f64,
    pub learning_rate: f64,
    /// Count-noise std; `None` means cohort / 20.
    pub count_noise_std: Option<f64>,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            initial: 1.0,
            adaptive: true,
            target_quantile: 0.1,
            learning_rate: 0.2,
            count_noise_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients: usize,
    pub cohort: usize,
    /// Cohort size the noise level and accounting assume.
    pub accounting_cohort: Option<usize>,
    pub epsilon: Option<f64>,
    /// Defaults to `N^-1.1`.
    pub delta: Option<f64>,
    pub accountant: AccountantKind,
    pub mode: Mode,
    pub local_epochs: usize,
    pub local_batch: usize,
    pub client_lr: f64,
    pub server: ServerOptimizer,
    pub clip: ClipConfig,
    pub distribution: ShardDistribution,
    pub max_examples_per_client: Option<usize>,
    pub eval_every: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            clients: 100,
            cohort: 10,
            accounting_cohort: None,
            epsilon: None,
            delta: None,
            accountant: AccountantKind::Rdp,
            mode: Mode::Film,
            local_epochs: 2,
            local_batch: 16,
            client_lr: 0.05,
            server: ServerOptimizer::fed_adam(0.01),
            clip: ClipConfig::default(),
            distribution: ShardDistribution::Iid,
            max_examples_per_client: Some(512),
            eval_every: 1,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.clients == 0 {
            errs.push("fed.clients: must be >= 1".to_string());
        }
        if self.cohort == 0 || self.cohort > self.clients {
            errs.push(format!("fed.cohort: need 1 <= cohort <= clients, got {}", self.cohort));
        }
        if let Some(a) = self.accounting_cohort {
            if a == 0 || a > self.clients {
                errs.push(format!("fed.accounting_cohort: need 1 <= value <= clients, got {a}"));
            }
        }
        if self.local_batch == 0 {
            errs.push("fed.local_batch: must be >= 1".into());
        }
        if !(self.client_lr > 0.0) {
            errs.push("fed.client_lr: must be > 0".into());
        }
        if !(self.clip.initial > 0.0) {
            errs.push("fed.clip.initial: must be > 0".into());
        }
        if !(self.clip.target_quantile > 0.0 && self.clip.target_quantile < 1.0) {
            errs.push("fed.clip.target_quantile: must be in (0, 1)".into());
        }
        if self.eval_every == 0 {
            errs.push("fed.eval_every: must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or((self.clients as f64).powf(-1.1))
    }

    fn accounting_cohort(&self) -> usize {
        self.accounting_cohort.unwrap_or(self.cohort)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Test accuracy after the round, on evaluated rounds.
    pub accuracy: Option<f64>,
    pub clip: f64,
    pub unclipped_fraction: f64,
    pub payload_params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyStatement {
    pub epsilon: f64,
    pub delta: f64,
    pub ledger: PrivacyLedger,
}

#[derive(Clone, Debug)]
pub struct FedOutcome {
    pub server: ServerState,
    pub log: Vec<RoundLog>,
    pub final_accuracy: f64,
    pub privacy: Option<PrivacyStatement>,
}

/// Run `rounds` rounds of federated fine-tuning of `backbone` on `train`
/// sharded over `clients`, evaluating on `test`.
pub fn fed_train(
    train: &FewShotDataset,
    test: &FewShotDataset,
    backbone: &ModelState,
    cfg: &FedConfig,
    seed: u64,
) -> Result<FedOutcome> {
    cfg.validate()?;
    let shards = shard_clients(train, cfg.clients, cfg.distribution, cfg.max_examples_per_client, seed)?;
    let mut model = backbone.clone().with_mode(cfg.mode);
    model.reset_adapters();
    let mut server = ServerState::new(model, cfg.server, cfg.clip.initial);
    let m_acc = cfg.accounting_cohort();
    if cfg.clip.adaptive {
        server.adaptive = Some(AdaptiveClipState {
            clip: cfg.clip.initial,
            target_quantile: cfg.clip.target_quantile,
            learning_rate: cfg.clip.learning_rate,
            count_noise_std: if cfg.epsilon.is_some() {
                cfg.clip.count_noise_std.unwrap_or(m_acc as f64 / 20.0)
            } else {
                0.0
            },
        });
    }
    server.accounting_cohort = cfg.accounting_cohort;
    let q = m_acc as f64 / cfg.clients as f64;
    if let Some(eps) = cfg.epsilon {
        let delta = cfg.delta();
        let sigma = calibrate_sigma(PrivacyBudget::new(eps, delta)?, q, cfg.rounds as u64, cfg.accountant)?;
        server.ledger = Some(PrivacyLedger {
            noise_multiplier: sigma,
            sample_rate: q,
            executed_rate: cfg.cohort as f64 / cfg.clients as f64,
            rounds: cfg.rounds as u64,
            delta,
            accountant: cfg.accountant,
        });
    }
    let payload = comm_cost(&server.model.arch, cfg.mode);
    let mut log = Vec::with_capacity(cfg.rounds);
    let mut noise_rng = rng::stream(seed, Domain::FedNoise, 0);
    for round in 0..cfg.rounds {
        let mut cr = rng::stream(seed, Domain::FedCohort, round as u64);
        let mut cohort = index::sample(&mut cr, cfg.clients, cfg.cohort).into_vec();
        cohort.sort_unstable();
        let round_seed = rng::child_seed(seed, Domain::FedClient, round as u64);
        let global = &server.model;
        let deltas = cohort
            .par_iter()
            .map(|&c| {
                let mut r = rng::stream(round_seed, Domain::FedClient, c as u64);
                local_update(&shards[c], global, cfg.local_epochs, cfg.local_batch, cfg.client_lr, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = aggregate_round(&mut server, deltas, cfg.epsilon.is_some(), &mut noise_rng)?;
        let evaluate = (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds;
        log.push(RoundLog {
            round: round + 1,
            accuracy: if evaluate { Some(test.accuracy(&server.model)?) } else { None },
            clip: stats.clip,
            unclipped_fraction: stats.unclipped_fraction,
            payload_params: payload,
        });
    }
    let final_accuracy = test.accuracy(&server.model)?;
    let privacy = match &server.ledger {
        Some(l) => Some(PrivacyStatement {
            epsilon: l.epsilon()?,
            delta: l.delta,
            ledger: l.clone(),
        }),
        None => None,
    };
    Ok(FedOutcome {
        server,
        log,
        final_accuracy,
        privacy,
    })
}

/// Anything whose per-mode trainable parameter count is known.
pub trait TrainableCount {
    fn trainable_params(&self, mode: Mode) -> u64;
}

impl TrainableCount for Architecture {
    fn trainable_params(&self, mode: Mode) -> u64 {
        self.trainable_len(mode) as u64
    }
}

impl TrainableCount for ArchitectureDescriptor {
    fn trainable_params(&self, mode: Mode) -> u64 {
        self.learnable(mode)
    }
}

impl TrainableCount for ModelState {
    fn trainable_params(&self, mode: Mode) -> u64 {
        self.arch.trainable_len(mode) as u64
    }
}

/// Parameters exchanged per client-server interaction.
pub fn comm_cost<T: TrainableCount + ?Sized>(model: &T, mode: Mode) -> u64 {
    model.trainable_params(mode)
}
