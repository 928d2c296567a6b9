//! Trains each variant briefly, evaluates the test split by stratum and
//! writes the results table, markdown and chart.
//!
//! ```text
//! cargo run --release --example evaluate_report -- [out_dir]
//! ```

use std::path::PathBuf;

use sarfuse::data::load_dataset;
use sarfuse::evaluation::{evaluate, report, EvalOptions, EvalTable};
use sarfuse::models::{load_checkpoint, BackboneConfig, Variant};
use sarfuse::simulator::{generate_dataset, SimConfig};
use sarfuse::training::{run_experiment, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-report".into()));
    let data = out.join("data");
    generate_dataset(
        &SimConfig {
            num_sites: 12,
            timestamps_per_site: 6,
            dropout_rate: 0.25,
            speckle_std: 1.0,
            ..Default::default()
        },
        &data,
    )?;
    let test = load_dataset(&data, "test")?;

    let mut table = EvalTable::new();
    for variant in Variant::ALL {
        let config = TrainConfig {
            variant,
            backbone: BackboneConfig {
                base_width: 8,
                feature_channels: 8,
                ..Default::default()
            },
            learning_rate: 1e-3,
            max_epochs: 5,
            patience: 2,
            num_runs: 2,
            ..Default::default()
        };
        for run in run_experiment(&config, &data, &out.join(variant.as_str()), true)? {
            let (model, _) = load_checkpoint(&run.checkpoint)?;
            let metrics = evaluate(&model, &test, &EvalOptions::default())?;
            table.add_run(variant, run.seed, &metrics);
        }
    }
    let files = report(&table, &out.join("report"))?;
    print!("{}", std::fs::read_to_string(&files.markdown)?);
    println!("chart: {}", files.chart.display());
    Ok(())
}
