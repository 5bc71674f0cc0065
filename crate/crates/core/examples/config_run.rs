//! Drive the workbench from a TOML config, as the command-line tool does, and
//! list the files it writes. Pass an output directory or use a temp one.

use dpfew::config::WorkbenchConfig;
use dpfew::workbench::run_experiment;

const CONFIG: &str = r#"
kind = "sweep"
seed = 0
repeats = 3
shots_grid = [2, 5, 10]
modes = ["head", "film"]
epsilons = [2.0]

[hyper]
epochs = 40
learning_rate = 5e-3
batch_size = 10
clip_norm = 1.0

[task]
shift = 0.5

[protocol]
test_per_class = 200
"#;

fn main() -> dpfew::Result<()> {
    let cfg = WorkbenchConfig::from_toml_str(CONFIG)?;
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("dpfew_config_run"));
    let report = run_experiment(&cfg, &out)?;
    println!("csv: {}", report.written.csv.display());
    println!("summary: {}", report.written.summary.display());
    println!("config: {}", report.written.config.display());
    if let Some(plot) = report.plot {
        println!("plot: {}", plot.display());
    }
    Ok(())
}
