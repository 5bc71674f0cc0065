//! Run configuration: one TOML file per experiment, unknown keys rejected,
//! every omitted key filled with its default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accountant::AccountantKind;
use crate::data::{PretrainConfig, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::fed::FedConfig;
use crate::mia::VarianceMode;
use crate::model::{Architecture, Mode};
use crate::protocol::{Hyper, ProtocolConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Account,
    Train,
    Sweep,
    Attack,
    Fedsim,
    Analyze,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Account,
        ExperimentKind::Train,
        ExperimentKind::Sweep,
        ExperimentKind::Attack,
        ExperimentKind::Fedsim,
        ExperimentKind::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Account => "account",
            ExperimentKind::Train => "train",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Attack => "attack",
            ExperimentKind::Fedsim => "fedsim",
            ExperimentKind::Analyze => "analyze",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

/// Which accountants the `account` experiment evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccountantChoice {
    Rdp,
    Prv,
    Both,
}

impl AccountantChoice {
    pub fn kinds(self) -> Vec<AccountantKind> {
        match self {
            AccountantChoice::Rdp => vec![AccountantKind::Rdp],
            AccountantChoice::Prv => vec![AccountantKind::Prv],
            AccountantChoice::Both => vec![AccountantKind::Rdp, AccountantKind::Prv],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub hidden_width: usize,
    pub feature_dim: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            feature_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub shadows: usize,
    pub variance: VarianceMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            shadows: 32,
            variance: VarianceMode::PerExample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedSection {
    #[serde(flatten)]
    pub run: FedConfig,
    /// Training examples drawn per class before sharding.
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for FedSection {
    fn default() -> Self {
        Self {
            run: FedConfig::default(),
            train_per_class: 100,
            test_per_class: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// JSON summary written by a `sweep` run.
    pub input: Option<String>,
    pub reference_shots: Vec<usize>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            input: None,
            reference_shots: vec![5, 10],
        }
    }
}

/// Everything one run needs. Keys that only matter to other experiment kinds
/// are accepted and ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkbenchConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Seeds `seed, seed+1, ...` aggregated by median.
    pub repeats: usize,
    pub output_dir: Option<String>,
    pub threads: Option<usize>,

    pub sigma: Option<f64>,
    pub q: Option<f64>,
    pub steps: Option<u64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub accountants: AccountantChoice,

    pub mode: Mode,
    pub shots: usize,
    pub shots_grid: Vec<usize>,
    pub modes: Vec<Mode>,
    pub epsilons: Vec<f64>,
    pub include_non_private: bool,
    /// Fixed hyperparameters; tuned per run when absent.
    pub hyper: Option<Hyper>,

    pub task: SyntheticTaskSpec,
    pub architecture: ArchitectureConfig,
    pub pretrain: PretrainConfig,
    pub protocol: ProtocolConfig,
    pub attack: AttackSection,
    pub fed: FedSection,
    pub analyze: AnalyzeSection,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Account,
            seed: 0,
            repeats: 3,
            output_dir: None,
            threads: None,
            sigma: None,
            q: None,
            steps: None,
            delta: None,
            epsilon: None,
            accountants: AccountantChoice::Both,
            mode: Mode::Head,
            shots: 10,
            shots_grid: vec![2, 10, 50],
            modes: vec![Mode::Head, Mode::Film],
            epsilons: vec![8.0, 2.0, 1.0],
            include_non_private: true,
            hyper: None,
            task: SyntheticTaskSpec::default(),
            architecture: ArchitectureConfig::default(),
            pretrain: PretrainConfig::default(),
            protocol: ProtocolConfig::default(),
            attack: AttackSection::default(),
            fed: FedSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

impl WorkbenchConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Copy without the execution-only keys (`threads`, `output_dir`), which
    /// never change results.
    pub fn frozen(&self) -> Self {
        Self {
            threads: None,
            output_dir: None,
            ..self.clone()
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.task.input_dim,
            hidden_width: self.architecture.hidden_width,
            feature_dim: self.architecture.feature_dim,
            classes: self.task.classes,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Privacy levels of a sweep, non-private first.
    pub fn epsilon_levels(&self) -> Vec<Option<f64>> {
        let mut v = Vec::new();
        if self.include_non_private {
            v.push(None);
        }
        v.extend(self.epsilons.iter().map(|&e| Some(e)));
        v
    }

    /// Check every field and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut absorb = |r: Result<()>, prefix: &str| match r {
            Ok(()) => {}
            Err(Error::Validation(v)) => errs.extend(v),
            Err(e) => errs.push(format!("{prefix}: {e}")),
        };
        absorb(self.task.validate(), "task");
        absorb(self.protocol.ranges.validate(), "protocol.ranges");
        absorb(self.fed.run.validate(), "fed");
        let mut errs = errs;
        if self.seed > i64::MAX as u64 {
            errs.push(format!("seed: {} exceeds the TOML integer range (max {})", self.seed, i64::MAX));
        }
        if self.repeats == 0 {
            errs.push("repeats: must be >= 1".into());
        }
        if self.threads == Some(0) {
            errs.push("threads: must be >= 1".into());
        }
        if self.architecture.hidden_width == 0 || self.architecture.feature_dim == 0 {
            errs.push("architecture: widths must be >= 1".into());
        }
        if self.shots == 0 {
            errs.push("shots: must be >= 1".into());
        }
        if self.shots_grid.is_empty() || self.shots_grid.contains(&0) {
            errs.push("shots_grid: need at least one entry, all >= 1".into());
        }
        if self.modes.is_empty() {
            errs.push("modes: need at least one mode".into());
        }
        for &e in &self.epsilons {
            if !(e > 0.0 && e.is_finite()) {
                errs.push(format!("epsilons: {e} is not a positive finite value"));
            }
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                errs.push(format!("epsilon: {e} is not a positive finite value"));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                errs.push(format!("delta: {d} not in (0, 1)"));
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                errs.push(format!("sigma: {s} must be > 0"));
            }
        }
        if let Some(q) = self.q {
            if !(q > 0.0 && q <= 1.0) {
                errs.push(format!("q: {q} not in (0, 1]"));
            }
        }
        if self.steps == Some(0) {
            errs.push("steps: must be >= 1".into());
        }
        if self.kind == ExperimentKind::Account {
            for (name, missing) in [
                ("q", self.q.is_none()),
                ("steps", self.steps.is_none()),
                ("delta", self.delta.is_none()),
                ("sigma or epsilon", self.sigma.is_none() && self.epsilon.is_none()),
            ] {
                if missing {
                    errs.push(format!("{name}: required for kind = \"account\""));
                }
            }
        }
        if self.attack.shadows < 3 {
            errs.push("attack.shadows: must be >= 3".into());
        }
        if let Some(h) = &self.hyper {
            let r = &self.protocol.ranges;
            let n = match self.kind {
                ExperimentKind::Attack | ExperimentKind::Train => self.task.classes * self.shots,
                _ => usize::MAX,
            };
            if h.batch_size > n {
                errs.push(format!("hyper.batch_size: {} exceeds |D| = {n}", h.batch_size));
            }
            if h.batch_size < r.batch_size_min.min(n) {
                errs.push(format!("hyper.batch_size: {} below range minimum {}", h.batch_size, r.batch_size_min));
            }
            if h.epochs < r.epochs.0 || h.epochs > r.epochs.1 {
                errs.push(format!("hyper.epochs: {} outside {:?}", h.epochs, r.epochs));
            }
            if h.learning_rate < r.learning_rate.0 || h.learning_rate > r.learning_rate.1 {
                errs.push(format!("hyper.learning_rate: {} outside {:?}", h.learning_rate, r.learning_rate));
            }
            if h.clip_norm < r.clip_norm.0 || h.clip_norm > r.clip_norm.1 {
                errs.push(format!("hyper.clip_norm: {} outside {:?}", h.clip_norm, r.clip_norm));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Read, default-fill and validate a config file.
pub fn load_config(path: &Path) -> Result<WorkbenchConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    WorkbenchConfig::from_toml_str(&text)
}
