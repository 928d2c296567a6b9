//! The composite loss on hand-made outputs: one sample per loss case, and the
//! power Jaccard term against a few predictions.

use sarfuse::data::Raster;
use sarfuse::losses::{batch_loss, power_jaccard, sample_loss, LossConfig};
use sarfuse::models::ForwardOutput;

fn full(c: usize, v: f32) -> Raster {
    Raster::new(c, 4, 4, vec![v; c * 16]).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = LossConfig::default();
    let mut label = Raster::zeros(1, 4, 4);
    for y in 1..3 {
        for x in 1..3 {
            label.set(0, y, x, 1.0);
        }
    }

    for (name, pred) in [("label itself", label.clone()), ("all 0.5", full(1, 0.5)), ("inverted", {
        let mut p = label.clone();
        p.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        p
    })] {
        println!("power Jaccard, {name:>12}: {:.4}", power_jaccard(&pred, &label, &config)?);
    }

    let multi = ForwardOutput {
        p_fused: Some(label.clone()),
        p_sar_path: Some(full(1, 0.5)),
        f_s1: full(2, 1.0),
        f_s2: Some(full(2, 1.0)),
        f_s2_hat: Some(full(2, 0.0)),
    };
    let missing = ForwardOutput {
        p_fused: None,
        p_sar_path: Some(full(1, 0.5)),
        f_s1: full(2, 1.0),
        f_s2: None,
        f_s2_hat: Some(full(2, 0.0)),
    };
    let reports = [sample_loss(&multi, &label, &config)?, sample_loss(&missing, &label, &config)?];
    for r in &reports {
        println!(
            "{:?}: fused {:?}, SAR path {:?}, similarity {:?}, total {:.4}",
            r.case, r.supervised_fused, r.supervised_sar_path, r.similarity, r.total
        );
    }
    println!("batch total {:.4} (phi = {})", batch_loss(&reports)?, config.phi);
    Ok(())
}
