//! Tuned sweep over shots and privacy levels followed by the analysis
//! metrics: transfer difficulty, shot multipliers and train/test regimes.
//! Writes an accuracy-vs-shots SVG to the system temp directory.

use dpfew::data::{pretrain_backbone, PretrainConfig, SyntheticTaskSpec};
use dpfew::model::{Architecture, Mode};
use dpfew::plot::{emit_plot, AxisScale, PlotSpec, Series};
use dpfew::protocol::{sweep, HyperRanges, ProtocolConfig, TunerKind};
use dpfew::workbench::analyze;

fn main() -> dpfew::Result<()> {
    let task = SyntheticTaskSpec {
        shift: 0.5,
        ..SyntheticTaskSpec::default()
    };
    let arch = Architecture::new(task.input_dim, 32, 16, task.classes);
    let backbone = pretrain_backbone(&task, arch, &PretrainConfig::default(), 0)?;
    let cfg = ProtocolConfig {
        tuner: TunerKind::Tpe,
        tuner_budget: 10,
        ranges: HyperRanges {
            epochs: (1, 80),
            ..HyperRanges::default()
        },
        test_per_class: 300,
        ..ProtocolConfig::default()
    };
    let shots = [2, 5, 10, 25];
    let levels = [None, Some(8.0), Some(2.0)];
    let result = sweep(&task, &backbone, &shots, &levels, &[Mode::Head, Mode::All], &[0, 1, 2], &cfg)?;

    let analysis = analyze(&result, &[5, 10])?;
    for td in &analysis.transfer_difficulty {
        println!("S={} eps={:?}: TD {:.1} ({:?})", td.shots, td.epsilon, td.difficulty.score, td.difficulty.bucket);
    }
    for m in &analysis.shot_multipliers {
        println!("{m:?}");
    }
    for r in analysis.regimes.iter().filter(|r| r.shots == 2) {
        println!("{r:?}");
    }

    let series = levels
        .iter()
        .map(|&eps| Series {
            label: eps.map_or("Head non-private".into(), |e| format!("Head eps={e}")),
            points: result.curve(eps, Mode::Head),
        })
        .collect();
    let path = std::env::temp_dir().join("dpfew_shot_sweep.svg");
    emit_plot(
        &PlotSpec {
            title: "Head accuracy".into(),
            x_label: "shots per class".into(),
            y_label: "median test accuracy".into(),
            scale: AxisScale::Linear,
            series,
        },
        &path,
    )?;
    println!("plot: {}", path.display());
    Ok(())
}
