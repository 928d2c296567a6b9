//! Synthesises a small dataset, reloads it and prints per-split statistics.
//!
//! ```text
//! cargo run --release --example simulate -- [out_dir]
//! ```

use std::path::PathBuf;

use sarfuse::data::{load_dataset, DatasetManifest};
use sarfuse::simulator::{generate_dataset, optical_response, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into()));
    let config = SimConfig {
        num_sites: 10,
        timestamps_per_site: 8,
        ..Default::default()
    };
    generate_dataset(&config, &out)?;
    let manifest = DatasetManifest::read(&out)?;
    let records: usize = manifest.splits.values().map(Vec::len).sum();
    println!("dataset at {} ({records} records)", out.display());

    for split in ["train", "val", "test"] {
        let ds = load_dataset(&out, split)?;
        let density = |t: u32| {
            let tiles: Vec<_> = ds.iter().filter(|s| s.timestamp_index == t).collect();
            let on: f32 = tiles.iter().map(|s| s.label.data.iter().sum::<f32>()).sum();
            on / (tiles.len() * config.tile_size * config.tile_size) as f32
        };
        println!(
            "{split:>5}: {:3} tiles, {:4.1}% without optical, building density t=1 {:.3} -> t={} {:.3}",
            ds.len(),
            100.0 * ds.missing_fraction(),
            density(1),
            config.timestamps_per_site,
            density(config.timestamps_per_site as u32)
        );
    }

    // Optical is a known function of SAR and label plus noise of this std.
    let train = load_dataset(&out, "train")?;
    let s = train.iter().find(|s| s.optical_available).expect("some optical image");
    let clean = optical_response(&s.sar, &s.label);
    let optical = s.optical.as_ref().unwrap();
    let n = clean.data.len() as f32;
    let rms = (clean.data.iter().zip(&optical.data).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / n).sqrt();
    println!(
        "optical vs oracle response: rms {rms:.4} (noise std {})",
        config.cross_modal_noise
    );
    Ok(())
}
