//! LiRA against a population of FiLM models trained on random halves of a
//! shared pool, at several privacy levels.

use dpfew::data::{pretrain_backbone, PretrainConfig, SyntheticTaskSpec};
use dpfew::mia::{attack_all, build_population, dp_bound_violations, ShadowConfig};
use dpfew::model::Architecture;

fn main() -> dpfew::Result<()> {
    let task = SyntheticTaskSpec {
        shift: 1.0,
        ..SyntheticTaskSpec::default()
    };
    let arch = Architecture::new(task.input_dim, 32, 16, task.classes);
    let backbone = pretrain_backbone(&task, arch, &PretrainConfig::default(), 0)?;
    for eps in [None, Some(8.0), Some(1.0)] {
        let cfg = ShadowConfig {
            shadows: 16,
            epsilon: eps,
            ..ShadowConfig::default()
        };
        let pop = build_population(&task, &backbone, &cfg, 0)?;
        let m = attack_all(&pop, cfg.variance)?.metrics;
        let label = eps.map_or("inf".into(), |e| e.to_string());
        println!("eps={label}: AUC {:.3}, advantage {:.3}, TPR@FPR {:?}", m.auc, m.advantage, m.tpr_at_fpr);
        if let Some(e) = eps {
            let delta = 1.0 / (task.classes * cfg.shots) as f64;
            println!("  points above the DP bound: {}", dp_bound_violations(&m, e, delta, 3.0).len());
        }
    }
    Ok(())
}
