//! Fine-tune a pretrained backbone with DP-SGD in each learnable-parameter
//! mode and compare against non-private training.

use dpfew::data::{pretrain_backbone, PretrainConfig, SyntheticTaskSpec};
use dpfew::model::{Architecture, ArchitectureDescriptor, Mode, ModelState};
use dpfew::protocol::{run_fixed, Hyper, ProtocolConfig};

fn main() -> dpfew::Result<()> {
    let task = SyntheticTaskSpec {
        shift: 0.5,
        ..SyntheticTaskSpec::default()
    };
    let arch = Architecture::new(task.input_dim, 32, 16, task.classes);
    let backbone = pretrain_backbone(&task, arch, &PretrainConfig::default(), 0)?;

    let r18 = ArchitectureDescriptor::resnet18(10);
    for mode in Mode::ALL {
        let local = ModelState::new(arch, mode, 0)?.count_learnable();
        println!("{mode}: {local} learnable here, {} on {}", r18.learnable(mode), r18.name);
    }

    let hyper = Hyper {
        epochs: 60,
        learning_rate: 5e-3,
        batch_size: 25,
        clip_norm: 1.0,
    };
    let cfg = ProtocolConfig {
        test_per_class: 500,
        ..ProtocolConfig::default()
    };
    let seeds = [0, 1, 2];
    for mode in Mode::ALL {
        for eps in [None, Some(8.0), Some(1.0)] {
            let cell = run_fixed(&task, &backbone, 20, mode, eps, hyper, &seeds, &cfg)?;
            let sigma = cell.records[0].noise_multiplier.map_or("-".into(), |s| format!("{s:.3}"));
            println!(
                "{mode:>4} eps={:<4} sigma={sigma:<6} train {:.3} test {:.3}",
                eps.map_or("inf".into(), |e| e.to_string()),
                cell.median_train_accuracy,
                cell.median_test_accuracy
            );
        }
    }
    Ok(())
}
