//! Trains the proposed model on a small synthetic dataset, then reloads the
//! best checkpoint and predicts one test tile with and without its optical
//! image.
//!
//! ```text
//! cargo run --release --example train -- [out_dir]
//! ```

use std::path::PathBuf;

use sarfuse::data::load_dataset;
use sarfuse::evaluation::{confusion, predict_tile};
use sarfuse::models::{load_checkpoint, BackboneConfig, ForwardMode, Variant};
use sarfuse::simulator::{generate_dataset, SimConfig};
use sarfuse::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-train".into()));
    let data = out.join("data");
    generate_dataset(
        &SimConfig {
            num_sites: 12,
            timestamps_per_site: 8,
            ..Default::default()
        },
        &data,
    )?;

    let config = TrainConfig {
        variant: Variant::Proposed,
        backbone: BackboneConfig {
            base_width: 8,
            feature_channels: 8,
            ..Default::default()
        },
        learning_rate: 1e-3,
        max_epochs: 8,
        patience: 3,
        ..Default::default()
    };
    let record = train(&config, &data, &out.join("run"))?;
    println!(
        "best val F1 {:.4} at epoch {} of {}, {:.0} s",
        record.best_val_f1, record.best_epoch, record.epochs_run, record.wall_clock_seconds
    );

    let (model, meta) = load_checkpoint(&record.checkpoint)?;
    println!("checkpoint: {} seed {} epoch {:?}", meta.variant, meta.seed, meta.epoch);
    let test = load_dataset(&data, "test")?;
    let tile = test.iter().find(|s| s.optical_available).expect("a tile with optical");
    for mode in [ForwardMode::Auto, ForwardMode::ForceMissing] {
        let pred = predict_tile(&model, tile, mode)?;
        let (f1, iou) = confusion(&pred, &tile.label, 0.5)?.f1_iou();
        println!("{}/t{} {mode:?}: F1 {f1:.4}, IoU {iou:.4}", tile.site_id, tile.timestamp_index);
    }
    Ok(())
}
