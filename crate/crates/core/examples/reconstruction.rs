//! Optical features reconstructed from SAR. With noiseless optical data the
//! reconstruction gap shrinks during training, and the SAR-path prediction
//! on a tile without optical data approaches the fused one.

use sarfuse::data::Dataset;
use sarfuse::evaluation::{confusion, mean_similarity};
use sarfuse::experiment::desk_train_config;
use sarfuse::models::{ForwardMode, Variant};
use sarfuse::nn::AdamW;
use sarfuse::simulator::{generate_splits, SimConfig};
use sarfuse::training::{init_model, prepare_epoch, train_step, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        num_sites: 14,
        timestamps_per_site: 8,
        cross_modal_noise: 0.0,
        ..Default::default()
    };
    let mut splits = generate_splits(&sim)?;
    let train = Dataset::from_samples("train", splits.remove("train").unwrap());
    let val = Dataset::from_samples("val", splits.remove("val").unwrap());

    let config = TrainConfig {
        variant: Variant::Proposed,
        max_epochs: 10,
        ..desk_train_config()
    };
    let mut model = init_model(&config)?;
    let mut optimizer = AdamW::new(config.optimizer());
    println!("epoch  0: val similarity {:.5}", mean_similarity(&model, &val)?.unwrap());
    for epoch in 1..=config.max_epochs {
        let mut loss = 0.0;
        for batch in prepare_epoch(&train, &config, epoch)?.chunks(config.batch_size) {
            loss += train_step(&mut model, &mut optimizer, batch, &config.loss)?.0;
        }
        println!(
            "epoch {epoch:2}: train loss {:.4}, val similarity {:.5}",
            loss / train.len() as f64,
            mean_similarity(&model, &val)?.unwrap()
        );
    }

    let tile = val.iter().find(|s| s.optical_available).expect("a tile with optical");
    let out = model.forward(tile, ForwardMode::Auto)?;
    for (name, pred) in [("fused", out.p_fused.as_ref().unwrap()), ("SAR path", out.p_sar_path.as_ref().unwrap())] {
        let (f1, _) = confusion(pred, &tile.label, 0.5)?.f1_iou();
        println!("{name:>8} prediction F1 {f1:.4}");
    }
    Ok(())
}
