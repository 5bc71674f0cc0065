//! Runs one configured experiment end to end and persists its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{self, prv, AccountantKind, MechanismParams, PrivacyBudget};
use crate::config::{ExperimentKind, WorkbenchConfig};
use crate::data::{pretrain_backbone, Split};
use crate::error::{Error, Result};
use crate::fed::{self, comm_cost, RoundLog};
use crate::io::{file_stem, fmt_f64, fmt_opt, persist_results, Table, Written};
use crate::mia::{self, RocMetrics, ShadowConfig};
use crate::model::{Mode, ModelState};
use crate::plot::{emit_plot, AxisScale, PlotSpec, Series};
use crate::protocol::{
    self, regime_report, shot_multiplier, transfer_difficulty, Hyper, RegimeReport, ShotMultiplier, SweepCell,
    SweepResult, TransferDifficulty,
};

/// Files produced by one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub written: Written,
    pub plot: Option<PathBuf>,
}

/// Validate `cfg` and run it, writing into `out_dir`.
pub fn run_experiment(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::Account => run_account(cfg, out_dir),
        ExperimentKind::Train => run_train(cfg, out_dir),
        ExperimentKind::Sweep => run_sweep(cfg, out_dir),
        ExperimentKind::Attack => run_attack(cfg, out_dir),
        ExperimentKind::Fedsim => run_fedsim(cfg, out_dir),
        ExperimentKind::Analyze => run_analyze(cfg, out_dir),
    }
}

fn plot_path(cfg: &WorkbenchConfig, out_dir: &Path) -> PathBuf {
    out_dir.join(format!("{}.svg", file_stem(cfg.kind, cfg.seed)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountRow {
    pub accountant: AccountantKind,
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    /// Width of the PRV error band, when applicable.
    pub slack: Option<f64>,
}

fn run_account(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    let missing = |name: &str| Error::Config(format!("{name} is required for kind = \"account\""));
    let q = cfg.q.ok_or_else(|| missing("q"))?;
    let steps = cfg.steps.ok_or_else(|| missing("steps"))?;
    let delta = cfg.delta.ok_or_else(|| missing("delta"))?;
    let mut rows = Vec::new();
    for kind in cfg.accountants.kinds() {
        let sigma = match (cfg.sigma, cfg.epsilon) {
            (Some(s), _) => s,
            (None, Some(e)) => accountant::calibrate_sigma(PrivacyBudget::new(e, delta)?, q, steps, kind)?,
            (None, None) => return Err(missing("sigma or epsilon")),
        };
        let params = MechanismParams::new(sigma, q, steps);
        let (epsilon, slack) = match kind {
            AccountantKind::Rdp => (accountant::epsilon(&params, delta, kind)?, None),
            AccountantKind::Prv => {
                let r = prv::prv_report(&params, delta, &prv::PrvOptions::default())?;
                (r.epsilon, Some(r.slack))
            }
        };
        rows.push(AccountRow {
            accountant: kind,
            sigma,
            q,
            steps,
            delta,
            epsilon,
            slack,
        });
    }
    let mut table = Table::new(["accountant", "sigma", "q", "steps", "delta", "epsilon"]);
    for r in &rows {
        table.push(vec![
            r.accountant.to_string(),
            fmt_f64(r.sigma),
            fmt_f64(r.q),
            r.steps.to_string(),
            fmt_f64(r.delta),
            fmt_f64(r.epsilon),
        ])?;
    }
    let written = persist_results(out_dir, cfg, &table, &rows)?;
    Ok(RunReport { written, plot: None })
}

fn backbone(cfg: &WorkbenchConfig) -> Result<ModelState> {
    pretrain_backbone(&cfg.task, cfg.architecture(), &cfg.pretrain, cfg.seed)
}

fn cell_table(cells: &[SweepCell]) -> Result<Table> {
    let mut t = Table::new([
        "shots",
        "epsilon",
        "mode",
        "seed",
        "test_accuracy",
        "train_accuracy",
        "steps",
        "sigma",
        "delta",
        "epochs",
        "learning_rate",
        "batch_size",
        "clip_norm",
        "candidates",
    ]);
    for c in cells {
        for r in &c.records {
            t.push(vec![
                c.shots.to_string(),
                fmt_opt(c.epsilon),
                c.mode.to_string(),
                r.seed.to_string(),
                fmt_f64(r.test_accuracy),
                fmt_f64(r.train_accuracy),
                r.steps.to_string(),
                fmt_opt(r.noise_multiplier),
                fmt_opt(r.delta),
                r.hyper.epochs.to_string(),
                fmt_f64(r.hyper.learning_rate),
                r.hyper.batch_size.to_string(),
                fmt_f64(r.hyper.clip_norm),
                r.candidates_trained.to_string(),
            ])?;
        }
    }
    Ok(t)
}

fn run_cell(cfg: &WorkbenchConfig, bb: &ModelState, shots: usize, mode: Mode, epsilon: Option<f64>) -> Result<SweepCell> {
    let mut pc = cfg.protocol.clone();
    pc.delta = pc.delta.or(cfg.delta);
    match cfg.hyper {
        Some(h) => protocol::run_fixed(&cfg.task, bb, shots, mode, epsilon, h, &cfg.seeds(), &pc),
        None => protocol::run_protocol(&cfg.task, bb, shots, mode, epsilon, &cfg.seeds(), &pc),
    }
}

fn run_train(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    let bb = backbone(cfg)?;
    let cell = run_cell(cfg, &bb, cfg.shots, cfg.mode, cfg.epsilon)?;
    let table = cell_table(std::slice::from_ref(&cell))?;
    let written = persist_results(out_dir, cfg, &table, &cell)?;
    Ok(RunReport { written, plot: None })
}

fn label(mode: Mode, eps: Option<f64>) -> String {
    match eps {
        Some(e) => format!("{mode} eps={e}"),
        None => format!("{mode} non-private"),
    }
}

fn run_sweep(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    let bb = backbone(cfg)?;
    let levels = cfg.epsilon_levels();
    let result = if cfg.hyper.is_some() {
        let mut cells = Vec::new();
        for &s in &cfg.shots_grid {
            for &e in &levels {
                for &m in &cfg.modes {
                    cells.push(run_cell(cfg, &bb, s, m, e)?);
                }
            }
        }
        SweepResult { cells }
    } else {
        let mut pc = cfg.protocol.clone();
        pc.delta = pc.delta.or(cfg.delta);
        protocol::sweep(&cfg.task, &bb, &cfg.shots_grid, &levels, &cfg.modes, &cfg.seeds(), &pc)?
    };
    let table = cell_table(&result.cells)?;
    let written = persist_results(out_dir, cfg, &table, &result)?;
    let mut series = Vec::new();
    for &m in &cfg.modes {
        for &e in &levels {
            let points: Vec<(f64, f64)> = result.curve(e, m).into_iter().map(|(s, a)| (s, 100.0 * a)).collect();
            series.push(Series {
                label: label(m, e),
                points,
            });
        }
    }
    let plot = if cfg.shots_grid.len() >= 2 {
        let path = plot_path(cfg, out_dir);
        emit_plot(
            &PlotSpec {
                title: "Median test accuracy".into(),
                x_label: "shots per class".into(),
                y_label: "accuracy (%)".into(),
                scale: AxisScale::Linear,
                series,
            },
            &path,
        )?;
        Some(path)
    } else {
        None
    };
    Ok(RunReport { written, plot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub models: usize,
    pub pool: usize,
    pub hyper: Hyper,
    pub epsilon: Option<f64>,
    pub noise_multipliers: Vec<Option<f64>>,
    pub resampled_bits: usize,
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub auc: f64,
    pub advantage: f64,
}

fn run_attack(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    let bb = backbone(cfg)?;
    let hyper = match cfg.hyper {
        Some(h) => h,
        None => {
            let mut pc = cfg.protocol.clone();
            pc.delta = pc.delta.or(cfg.delta);
            let cell = protocol::run_protocol(&cfg.task, &bb, cfg.shots, cfg.mode, cfg.epsilon, &[cfg.seed], &pc)?;
            cell.records[0].hyper
        }
    };
    let sc = ShadowConfig {
        shadows: cfg.attack.shadows,
        shots: cfg.shots,
        mode: cfg.mode,
        hyper,
        epsilon: cfg.epsilon,
        delta: cfg.delta.or(cfg.protocol.delta),
        accountant: cfg.protocol.accountant,
        optimizers: cfg.protocol.optimizers,
        variance: cfg.attack.variance,
    };
    let pop = mia::build_population(&cfg.task, &bb, &sc, cfg.seed)?;
    let record = mia::attack_all(&pop, sc.variance)?;
    let mut table = Table::new(["model", "example", "score", "member"]);
    for p in &record.pairs {
        table.push(vec![
            p.model.to_string(),
            p.example.to_string(),
            fmt_f64(p.score),
            u8::from(p.member).to_string(),
        ])?;
    }
    let RocMetrics {
        auc,
        advantage,
        tpr_at_fpr,
        points,
        ..
    } = record.metrics;
    let summary = AttackSummary {
        models: pop.len(),
        pool: pop.pool.len(),
        hyper,
        epsilon: cfg.epsilon,
        noise_multipliers: pop.noise_multipliers.clone(),
        resampled_bits: pop.resampled_bits,
        tpr_at_fpr: tpr_at_fpr.clone(),
        auc,
        advantage,
    };
    let written = persist_results(out_dir, cfg, &table, &summary)?;
    let path = plot_path(cfg, out_dir);
    let tpr3 = tpr_at_fpr.first().map_or(0.0, |t| t.1);
    emit_plot(
        &PlotSpec {
            title: "Membership inference ROC".into(),
            x_label: "false positive rate".into(),
            y_label: "true positive rate".into(),
            scale: AxisScale::LogLog,
            series: vec![
                Series {
                    label: format!("LiRA, TPR@1e-3={:.1}%", 100.0 * tpr3),
                    points,
                },
                Series {
                    label: "chance".into(),
                    points: vec![(1e-5, 1e-5), (1.0, 1.0)],
                },
            ],
        },
        &path,
    )?;
    Ok(RunReport {
        written,
        plot: Some(path),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedSummary {
    pub final_accuracy: f64,
    pub rounds: usize,
    pub payload_params: u64,
    pub privacy: Option<fed::PrivacyStatement>,
    pub log: Vec<RoundLog>,
}

fn run_fedsim(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    let bb = backbone(cfg)?;
    let train = cfg.task.sample(cfg.fed.train_per_class, Split::Train, cfg.seed, 0)?;
    let test = cfg.task.sample(cfg.fed.test_per_class, Split::Test, cfg.seed, 1)?;
    let mut run = cfg.fed.run.clone();
    run.epsilon = run.epsilon.or(cfg.epsilon);
    let out = fed::fed_train(&train, &test, &bb, &run, cfg.seed)?;
    let mut table = Table::new(["round", "accuracy", "clip_B", "unclipped_fraction", "payload_params"]);
    for r in &out.log {
        table.push(vec![
            r.round.to_string(),
            fmt_opt(r.accuracy),
            fmt_f64(r.clip),
            fmt_f64(r.unclipped_fraction),
            r.payload_params.to_string(),
        ])?;
    }
    let summary = FedSummary {
        final_accuracy: out.final_accuracy,
        rounds: out.log.len(),
        payload_params: comm_cost(&out.server.model.arch, run.mode),
        privacy: out.privacy.clone(),
        log: out.log.clone(),
    };
    let written = persist_results(out_dir, cfg, &table, &summary)?;
    let pts: Vec<(f64, f64)> = out
        .log
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (r.round as f64, 100.0 * a)))
        .collect();
    let plot = if pts.len() >= 2 {
        let path = plot_path(cfg, out_dir);
        emit_plot(
            &PlotSpec {
                title: "Federated test accuracy".into(),
                x_label: "round".into(),
                y_label: "accuracy (%)".into(),
                scale: AxisScale::Linear,
                series: vec![Series {
                    label: label(run.mode, run.epsilon),
                    points: pts,
                }],
            },
            &path,
        )?;
        Some(path)
    } else {
        None
    };
    Ok(RunReport { written, plot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdEntry {
    pub shots: usize,
    pub epsilon: Option<f64>,
    pub difficulty: TransferDifficulty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierEntry {
    pub mode: Mode,
    pub epsilon: f64,
    pub reference_shots: usize,
    pub result: ShotMultiplier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeEntry {
    pub shots: usize,
    pub epsilon: Option<f64>,
    pub mode: Mode,
    pub report: RegimeReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub transfer_difficulty: Vec<TdEntry>,
    pub shot_multipliers: Vec<MultiplierEntry>,
    pub regimes: Vec<RegimeEntry>,
}

/// TD wherever both `all` and `head` cells exist, shot multipliers of every
/// private curve against the non-private one, and the regime of every cell.
pub fn analyze(result: &SweepResult, reference_shots: &[usize]) -> Result<Analysis> {
    let mut a = Analysis::default();
    let mut keys: Vec<(usize, Option<f64>)> = result.cells.iter().map(|c| (c.shots, c.epsilon)).collect();
    keys.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.unwrap_or(f64::INFINITY).total_cmp(&y.1.unwrap_or(f64::INFINITY))));
    keys.dedup();
    for (shots, eps) in keys {
        if let (Some(all), Some(head)) = (result.cell(shots, eps, Mode::All), result.cell(shots, eps, Mode::Head)) {
            if all.median_test_accuracy > 0.0 {
                a.transfer_difficulty.push(TdEntry {
                    shots,
                    epsilon: eps,
                    difficulty: transfer_difficulty(100.0 * all.median_test_accuracy, 100.0 * head.median_test_accuracy)?,
                });
            }
        }
    }
    let mut modes: Vec<Mode> = result.cells.iter().map(|c| c.mode).collect();
    modes.sort_by_key(|m| m.to_string());
    modes.dedup();
    let mut eps: Vec<f64> = result.cells.iter().filter_map(|c| c.epsilon).collect();
    eps.sort_by(|x, y| y.total_cmp(x));
    eps.dedup();
    for &m in &modes {
        let np = result.curve(None, m);
        for &e in &eps {
            let dp = result.curve(Some(e), m);
            for &s in reference_shots {
                if np.is_empty() || dp.is_empty() || !np.iter().any(|p| p.0 == s as f64) {
                    continue;
                }
                a.shot_multipliers.push(MultiplierEntry {
                    mode: m,
                    epsilon: e,
                    reference_shots: s,
                    result: shot_multiplier(&np, &dp, s as f64)?,
                });
            }
        }
    }
    for c in &result.cells {
        a.regimes.push(RegimeEntry {
            shots: c.shots,
            epsilon: c.epsilon,
            mode: c.mode,
            report: regime_report(c.median_train_accuracy, c.median_test_accuracy),
        });
    }
    Ok(a)
}

fn run_analyze(cfg: &WorkbenchConfig, out_dir: &Path) -> Result<RunReport> {
    let input = cfg
        .analyze
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("analyze.input: path to a sweep summary is required".into()))?;
    let path = Path::new(input);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let result: SweepResult =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: not a sweep summary: {e}", path.display())))?;
    let analysis = analyze(&result, &cfg.analyze.reference_shots)?;
    let mut table = Table::new(["metric", "mode", "shots", "epsilon", "value", "label"]);
    for t in &analysis.transfer_difficulty {
        table.push(vec![
            "transfer_difficulty".into(),
            String::new(),
            t.shots.to_string(),
            fmt_opt(t.epsilon),
            fmt_f64(t.difficulty.score),
            format!("{:?}", t.difficulty.bucket).to_lowercase(),
        ])?;
    }
    for m in &analysis.shot_multipliers {
        let (value, tag) = match m.result {
            ShotMultiplier::Reached {
                multiplier, clamped, ..
            } => (fmt_f64(multiplier), if clamped { "clamped" } else { "reached" }),
            ShotMultiplier::ExceedsGrid => (String::new(), "exceeds_grid"),
        };
        table.push(vec![
            "shot_multiplier".into(),
            m.mode.to_string(),
            m.reference_shots.to_string(),
            fmt_f64(m.epsilon),
            value,
            tag.into(),
        ])?;
    }
    for r in &analysis.regimes {
        table.push(vec![
            "train_test_gap".into(),
            r.mode.to_string(),
            r.shots.to_string(),
            fmt_opt(r.epsilon),
            fmt_f64(r.report.gap),
            format!("{:?}", r.report.regime).to_lowercase(),
        ])?;
    }
    let written = persist_results(out_dir, cfg, &table, &analysis)?;
    Ok(RunReport { written, plot: None })
}
