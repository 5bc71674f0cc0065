//! User-level DP federated fine-tuning with FedAdam and adaptive clipping,
//! plus the per-round payload of each learnable-parameter mode.

use dpfew::data::{pretrain_backbone, PretrainConfig, Split, SyntheticTaskSpec};
use dpfew::fed::{comm_cost, fed_train, ClipConfig, FedConfig, ShardDistribution};
use dpfew::model::{Architecture, ArchitectureDescriptor, Mode};

fn main() -> dpfew::Result<()> {
    let task = SyntheticTaskSpec {
        shift: 0.5,
        ..SyntheticTaskSpec::default()
    };
    let arch = Architecture::new(task.input_dim, 32, 16, task.classes);
    let backbone = pretrain_backbone(&task, arch, &PretrainConfig::default(), 0)?;
    let train = task.sample(100, Split::Train, 1, 0)?;
    let test = task.sample(200, Split::Test, 1, 1)?;

    let r18 = ArchitectureDescriptor::resnet18(10);
    for mode in Mode::ALL {
        println!("{mode}: {} parameters per update here, {} on {}", comm_cost(&arch, mode), comm_cost(&r18, mode), r18.name);
    }

    for eps in [None, Some(4.0)] {
        let cfg = FedConfig {
            rounds: 30,
            clients: 50,
            cohort: 10,
            epsilon: eps,
            distribution: ShardDistribution::Heterogeneous { concentration: 1.0 },
            clip: ClipConfig {
                count_noise_std: Some(20.0),
                ..ClipConfig::default()
            },
            eval_every: 10,
            ..FedConfig::default()
        };
        let out = fed_train(&train, &test, &backbone, &cfg, 0)?;
        let privacy = out.privacy.map_or("non-private".into(), |p| format!("(eps={:.3}, delta={:.2e})", p.epsilon, p.delta));
        println!("{privacy}: accuracy {:.3}, final clip {:.3}", out.final_accuracy, out.server.clip);
        for log in out.log.iter().filter(|l| l.accuracy.is_some()) {
            println!("  round {:>2}: accuracy {:.3}, clip {:.3}", log.round, log.accuracy.unwrap(), log.clip);
        }
    }
    Ok(())
}
