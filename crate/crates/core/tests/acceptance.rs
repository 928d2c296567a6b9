//! Acceptance criteria 1 to 11. Each test writes one `PASS`/`FAIL` line to
//! stderr (unaffected by output capture) before asserting.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sarfuse::data::{zero_fill_optical, Dataset, Raster, Sample};
use sarfuse::evaluation::{
    confusion, evaluate, f1_iou, mean_similarity, predict_tile, Averaging, ConfusionCounts, EvalOptions, EvalTable,
    Stratum,
};
use sarfuse::experiment::{run_bench, DatasetSpec, ExperimentPlan};
use sarfuse::losses::{
    batch_loss, feature_similarity, power_jaccard, power_jaccard_grad, sample_loss, LossCase, LossConfig,
};
use sarfuse::models::{build_model, BackboneConfig, ForwardMode, ForwardOutput, ModelBundle, Variant};
use sarfuse::nn::AdamW;
use sarfuse::simulator::{generate_dataset, generate_splits, SimConfig};
use sarfuse::training::{init_model, prepare_epoch, train_step, RunRecord, TrainConfig};

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let mark = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} {mark} {name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_raster(r: &mut impl Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> Raster {
    Raster::new(c, h, w, (0..c * h * w).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_mask(r: &mut impl Rng, h: usize, w: usize, density: f64) -> Raster {
    Raster::new(1, h, w, (0..h * w).map(|_| if r.gen_bool(density) { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn random_sample(r: &mut impl Rng, size: usize, available: bool) -> Sample {
    Sample {
        sar: random_raster(r, 2, size, size, 0.0, 1.5),
        optical: available.then(|| random_raster(r, 4, size, size, 0.0, 1.0)),
        label: random_mask(r, size, size, 0.3),
        optical_available: available,
        site_id: "site_000".into(),
        timestamp_index: 1,
    }
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        base_width: 4,
        feature_channels: 4,
        ..Default::default()
    }
}

#[test]
fn criterion_01_metric_oracle_equivalence() {
    let started = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut count_mismatches = 0;
    for _ in 0..500 {
        let pred = random_raster(&mut r, 1, 16, 16, 0.0, 1.0);
        let density = r.gen_range(0.0..0.6);
        let label = random_mask(&mut r, 16, 16, density);
        let threshold = *[0.5f32, 0.3, 0.7].get(r.gen_range(0..3)).unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                let p = pred.get(0, y, x) >= threshold;
                let t = label.get(0, y, x) == 1.0;
                if p && t {
                    tp += 1;
                } else if p {
                    fp += 1;
                } else if t {
                    fn_ += 1;
                } else {
                    tn += 1;
                }
            }
        }
        let c = confusion(&pred, &label, threshold).unwrap();
        if c != (ConfusionCounts { tp, fp, fn_, tn }) {
            count_mismatches += 1;
        }
        let (f1, iou) = f1_iou(&c);
        let (ef1, eiou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
            (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
        };
        worst = worst.max((f1 - ef1).abs()).max((iou - eiou).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = count_mismatches == 0 && worst <= 1e-12 && secs < 10.0;
    verdict(
        1,
        "metric oracle equivalence",
        ok,
        &format!("500 pairs, {count_mismatches} count mismatches, max metric diff {worst:.1e}, {secs:.2} s"),
    );
    assert!(ok);
}

#[test]
fn criterion_02_f1_iou_identity() {
    let mut worst = 0.0f64;
    let mut pairs = 0;
    let mut check = |f1: f64, iou: f64| {
        worst = worst.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
        pairs += 1;
    };
    let mut r = rng(2);
    for _ in 0..2000 {
        let c = ConfusionCounts {
            tp: r.gen_range(0..5000),
            fp: r.gen_range(0..5000),
            fn_: r.gen_range(0..5000),
            tn: r.gen_range(0..5000),
        };
        let (f1, iou) = f1_iou(&c);
        check(f1, iou);
    }
    // Every pooled metric pair that evaluation emits for untrained models.
    let sim = SimConfig {
        num_sites: 6,
        timestamps_per_site: 4,
        dropout_rate: 0.3,
        ..Default::default()
    };
    let test = Dataset::from_samples("test", generate_splits(&sim).unwrap().remove("train").unwrap());
    let mut table = EvalTable::new();
    for (k, v) in Variant::ALL.into_iter().enumerate() {
        let bundle = build_model(v, &small_backbone(), &mut rng(20 + k as u64)).unwrap();
        for threshold in [0.3f32, 0.5, 0.7] {
            let opts = EvalOptions {
                threshold,
                averaging: Averaging::Pooled,
                ..Default::default()
            };
            let m = evaluate(&bundle, &test, &opts).unwrap();
            for s in Stratum::ALL {
                if let Some(x) = m.get(s) {
                    check(x.f1, x.iou);
                }
            }
            table.add_run(v, threshold.to_bits() as u64, &m);
        }
    }
    for e in table.entries() {
        check(e.f1, e.iou);
    }
    let ok = worst <= 1e-12;
    verdict(2, "F1/IoU identity", ok, &format!("{pairs} pairs, max deviation {worst:.1e}"));
    assert!(ok);
}

#[test]
fn criterion_03_power_jaccard_gradient() {
    let started = Instant::now();
    let config = LossConfig::default();
    let h = 1e-4f64;
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let pred = random_raster(&mut r, 1, 8, 8, 0.05, 0.95);
        let density = r.gen_range(0.1..0.7);
        let label = random_mask(&mut r, 8, 8, density);
        let (_, grad) = power_jaccard_grad(&pred, &label, &config).unwrap();
        for i in 0..pred.data.len() {
            let mut plus = pred.clone();
            let mut minus = pred.clone();
            plus.data[i] = (pred.data[i] as f64 + h) as f32;
            minus.data[i] = (pred.data[i] as f64 - h) as f32;
            // The perturbation actually applied after rounding to f32.
            let step = plus.data[i] as f64 - minus.data[i] as f64;
            let fd = (power_jaccard(&plus, &label, &config).unwrap() - power_jaccard(&minus, &label, &config).unwrap())
                / step;
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst <= 1e-4 && secs < 30.0;
    verdict(
        3,
        "power Jaccard gradient check",
        ok,
        &format!("50 rasters of 8x8, max relative error {worst:.2e}, {secs:.2} s"),
    );
    assert!(ok);
}

/// Forward outputs of the shape each loss case expects, with random content.
fn random_output(r: &mut impl Rng, case: LossCase, size: usize, channels: usize) -> ForwardOutput {
    let prob = |r: &mut dyn rand::RngCore| {
        Raster::new(1, size, size, (0..size * size).map(|_| r.gen_range(0.0f32..=1.0)).collect()).unwrap()
    };
    let p1 = prob(r);
    let p2 = prob(r);
    let f = |r: &mut dyn rand::RngCore| {
        Raster::new(
            channels,
            size,
            size,
            (0..channels * size * size).map(|_| r.gen_range(0.0f32..4.0)).collect(),
        )
        .unwrap()
    };
    let f_s1 = f(r);
    let f_s2 = f(r);
    let f_s2_hat = f(r);
    match case {
        LossCase::MultiModal => ForwardOutput {
            p_fused: Some(p1),
            p_sar_path: Some(p2),
            f_s1,
            f_s2: Some(f_s2),
            f_s2_hat: Some(f_s2_hat),
        },
        LossCase::MissingModality => ForwardOutput {
            p_fused: None,
            p_sar_path: Some(p2),
            f_s1,
            f_s2: None,
            f_s2_hat: Some(f_s2_hat),
        },
        LossCase::FusedOnly => ForwardOutput {
            p_fused: Some(p1),
            p_sar_path: None,
            f_s1,
            f_s2: Some(f_s2),
            f_s2_hat: None,
        },
    }
}

#[test]
fn criterion_04_loss_dispatch_and_additivity() {
    let config = LossConfig::default();
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut bad_missing = 0;
    let mut missing_seen = 0;
    for _ in 0..100 {
        let n = r.gen_range(1..=12);
        let mut reports = Vec::new();
        let mut independent = 0.0;
        for _ in 0..n {
            let case = match r.gen_range(0..3) {
                0 => LossCase::MultiModal,
                1 => LossCase::MissingModality,
                _ => LossCase::FusedOnly,
            };
            let out = random_output(&mut r, case, 8, 3);
            let label = random_mask(&mut r, 8, 8, 0.3);
            let rep = sample_loss(&out, &label, &config).unwrap();
            assert_eq!(rep.case, case);
            let pj = |p: &Option<Raster>| p.as_ref().map_or(0.0, |p| power_jaccard(p, &label, &config).unwrap());
            independent += match case {
                LossCase::MultiModal => {
                    pj(&out.p_fused)
                        + pj(&out.p_sar_path)
                        + config.phi
                            * feature_similarity(out.f_s2.as_ref().unwrap(), out.f_s2_hat.as_ref().unwrap()).unwrap()
                }
                LossCase::MissingModality => pj(&out.p_sar_path),
                LossCase::FusedOnly => pj(&out.p_fused),
            };
            if case == LossCase::MissingModality {
                missing_seen += 1;
                let terms = [rep.supervised_fused, rep.supervised_sar_path, rep.similarity];
                let present = terms.iter().flatten().count();
                if present != 1 || rep.supervised_sar_path != Some(rep.total) {
                    bad_missing += 1;
                }
            }
            reports.push(rep);
        }
        worst = worst.max((batch_loss(&reports).unwrap() - independent).abs());
    }
    let ok = worst <= 1e-9 && bad_missing == 0 && missing_seen > 0;
    verdict(
        4,
        "loss case dispatch and additivity",
        ok,
        &format!(
            "100 batches, max |batch - sum| {worst:.1e}, {bad_missing}/{missing_seen} missing-modality reports with other than one term"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_phi_linearity() {
    let lo = LossConfig {
        phi: 0.01,
        ..Default::default()
    };
    let hi = LossConfig { phi: 0.02, ..lo };
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let case = if k % 4 == 3 {
            LossCase::MissingModality
        } else {
            LossCase::MultiModal
        };
        let out = random_output(&mut r, case, 8, 4);
        let label = random_mask(&mut r, 8, 8, 0.4);
        let a = sample_loss(&out, &label, &lo).unwrap();
        let b = sample_loss(&out, &label, &hi).unwrap();
        let expected = 0.01 * a.similarity.unwrap_or(0.0);
        worst = worst.max((b.total - a.total - expected).abs());
    }
    let ok = worst <= 1e-9;
    verdict(5, "phi linearity", ok, &format!("200 outputs, max deviation {worst:.1e}"));
    assert!(ok);
}

#[test]
fn criterion_06_reconstruction_fixed_point() {
    let mut r = rng(6);
    let mut identical = 0;
    let total = 20;
    for k in 0..total {
        let bundle = build_model(Variant::Proposed, &small_backbone(), &mut rng(60 + k)).unwrap();
        let sample = random_sample(&mut r, 16, true);
        let out = bundle.forward(&sample, ForwardMode::Auto).unwrap();
        let f_s2 = out.f_s2.as_ref().unwrap();
        // The SAR path as computed by the model, then with the reconstruction overwritten.
        let sar_path = bundle.predict_from_features(&out.f_s1, out.f_s2_hat.as_ref());
        assert_eq!(sar_path.data, out.p_sar_path.as_ref().unwrap().data);
        let overwritten = bundle.predict_from_features(&out.f_s1, Some(f_s2));
        let fused = out.p_fused.as_ref().unwrap();
        let same_bits = overwritten
            .data
            .iter()
            .zip(&fused.data)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if same_bits && overwritten.data.len() == fused.data.len() {
            identical += 1;
        }
    }
    let ok = identical == total;
    verdict(
        6,
        "reconstruction fixed point",
        ok,
        &format!("{identical}/{total} models give bit-identical SAR-path and fused predictions"),
    );
    assert!(ok);
}

/// Mean squared value of the optical features over the multi-modal samples.
fn feature_energy(bundle: &ModelBundle, dataset: &Dataset) -> f64 {
    let values: Vec<f64> = dataset
        .iter()
        .filter(|s| s.optical_available)
        .map(|s| {
            let f = bundle.forward(s, ForwardMode::Auto).unwrap().f_s2.unwrap();
            f.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / f.data.len() as f64
        })
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_07_reconstruction_learnability() {
    let started = Instant::now();
    // Without speckle and optical noise the optical image is a deterministic
    // function of the SAR image.
    let sim = SimConfig {
        num_sites: 20,
        timestamps_per_site: 12,
        cross_modal_noise: 0.0,
        speckle_std: 0.0,
        seed: 7,
        ..Default::default()
    };
    let mut splits = generate_splits(&sim).unwrap();
    let train = Dataset::from_samples("train", splits.remove("train").unwrap());
    let val = Dataset::from_samples("val", splits.remove("val").unwrap());
    let config = TrainConfig {
        variant: Variant::Proposed,
        max_epochs: 20,
        patience: 19,
        ..sarfuse::experiment::desk_train_config()
    };
    let mut bundle = init_model(&config).unwrap();
    let initial = mean_similarity(&bundle, &val).unwrap().unwrap();
    let initial_energy = feature_energy(&bundle, &val);
    let mut optimizer = AdamW::new(config.optimizer());
    let mut trace = vec![initial];
    for epoch in 1..=config.max_epochs {
        for batch in prepare_epoch(&train, &config, epoch).unwrap().chunks(config.batch_size) {
            train_step(&mut bundle, &mut optimizer, batch, &config.loss).unwrap();
        }
        trace.push(mean_similarity(&bundle, &val).unwrap().unwrap());
    }
    let last = *trace.last().unwrap();
    let energy = feature_energy(&bundle, &val);
    let ratio = last / initial;
    let secs = started.elapsed().as_secs_f64();
    let ok = train.len() >= 128 && ratio < 0.1;
    let shown: Vec<String> = trace.iter().step_by(5).map(|v| format!("{v:.4}")).collect();
    verdict(
        7,
        "reconstruction learnability",
        ok,
        &format!(
            "{} train tiles, {} epochs, val similarity {initial:.4} -> {last:.4} (ratio {ratio:.3}, trace {}); \
             optical feature energy {initial_energy:.4} -> {energy:.4}, similarity relative to it {:.3} -> {:.3}; {secs:.0} s",
            train.len(),
            config.max_epochs,
            shown.join(" "),
            initial / initial_energy,
            last / energy,
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_ordering_reproduction() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan::desk(dir.path());
    let DatasetSpec::Synthetic(sim) = &plan.dataset else {
        unreachable!()
    };
    assert_eq!((sim.num_sites, sim.timestamps_per_site, sim.tile_size), (40, 10, 64));
    assert_eq!(sim.dropout_rate, 0.12);
    assert_eq!(plan.train.num_runs, 3);
    let outcome = run_bench(&plan, false).unwrap();
    let orderings = outcome.orderings.expect("all three variants ran");
    let secs = started.elapsed().as_secs_f64();
    for (label, c) in ["a", "b", "c", "c"].iter().zip(&orderings.checks) {
        verdict(
            8,
            &format!("ordering ({label}) {}", c.name),
            c.passed,
            &format!(
                "per-seed wins {}/{}, mean F1 {:.4} vs {:.4}",
                c.wins,
                c.per_seed.len(),
                c.mean_better,
                c.mean_worse
            ),
        );
    }
    let cells = Variant::ALL.len() * Stratum::ALL.len();
    let complete = Variant::ALL
        .iter()
        .flat_map(|&v| Stratum::ALL.map(|s| (v, s)))
        .filter(|&(v, s)| outcome.table.aggregate(v, s).is_some_and(|a| a.runs == 3))
        .count();
    verdict(
        8,
        "variant orderings",
        orderings.passed && complete == cells,
        &format!("{complete}/{cells} report cells with 3 runs, {secs:.0} s"),
    );
    assert_eq!(complete, cells);
    assert!(orderings.passed);
}

fn read_record(dir: &Path) -> RunRecord {
    let text = std::fs::read_to_string(dir.join("seed_3").join("record.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn criterion_09_determinism() {
    let exe = env!("CARGO_BIN_EXE_sarfuse");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let sim = SimConfig {
        num_sites: 6,
        timestamps_per_site: 4,
        seed: 9,
        ..Default::default()
    };
    generate_dataset(&sim, &data).unwrap();
    let config = TrainConfig {
        backbone: small_backbone(),
        learning_rate: 1e-3,
        max_epochs: 4,
        patience: 2,
        num_runs: 1,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    };
    let config_path = dir.path().join("train.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
    let mut records = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(exe)
            .args(["train", "--config"])
            .arg(&config_path)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .env_remove("SARFUSE_SEED")
            .stdout(Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        records.push(read_record(&out));
    }
    let diff = (records[0].best_val_f1 - records[1].best_val_f1).abs();
    let ok = diff <= 1e-6 && records[0].best_epoch == records[1].best_epoch;
    verdict(
        9,
        "determinism",
        ok,
        &format!(
            "best val F1 {:.6} vs {:.6} (diff {diff:.1e}), best epoch {} vs {}",
            records[0].best_val_f1, records[1].best_val_f1, records[0].best_epoch, records[1].best_epoch
        ),
    );
    assert!(ok);
}

fn bits(r: &Raster) -> Vec<u32> {
    r.data.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_10_zero_fill_semantics() {
    let mut r = rng(10);
    let mut identical = 0;
    let total = 20;
    for k in 0..total {
        let bundle = build_model(Variant::DsZerofill, &small_backbone(), &mut rng(100 + k)).unwrap();
        let missing = random_sample(&mut r, 16, false);
        let mut zeros = missing.clone();
        zeros.optical = Some(Raster::zeros(4, 16, 16));
        zeros.optical_available = true;
        let a = bundle.forward(&missing, ForwardMode::Auto).unwrap();
        let b = bundle.forward(&zeros, ForwardMode::Auto).unwrap();
        let c = predict_tile(&bundle, &zero_fill_optical(&missing), ForwardMode::Auto).unwrap();
        if bits(a.prediction()) == bits(b.prediction()) && bits(&c) == bits(a.prediction()) {
            identical += 1;
        }
    }
    let ok = identical == total;
    verdict(
        10,
        "zero-fill semantics",
        ok,
        &format!("{identical}/{total} missing samples match their manually zero-filled copy"),
    );
    assert!(ok);
}

fn check_shapes(bundle: &ModelBundle, sample: &Sample) -> Result<(), String> {
    let (h, w) = (sample.height(), sample.width());
    let out = bundle.forward(sample, ForwardMode::Auto).map_err(|e| e.to_string())?;
    let maps = [Some(&out.f_s1), out.f_s2.as_ref(), out.f_s2_hat.as_ref()];
    for m in maps.into_iter().flatten() {
        if (m.height, m.width) != (h, w) || m.channels != bundle.config.feature_channels {
            return Err(format!("feature map {}x{}x{}", m.channels, m.height, m.width));
        }
        if !m.is_finite() {
            return Err("non-finite feature".into());
        }
    }
    for p in [out.p_fused.as_ref(), out.p_sar_path.as_ref()].into_iter().flatten() {
        if (p.channels, p.height, p.width) != (1, h, w) {
            return Err(format!("prediction {}x{}x{}", p.channels, p.height, p.width));
        }
        if p.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("probability outside [0, 1] or NaN".into());
        }
    }
    Ok(())
}

#[test]
fn criterion_11_shapes_and_finiteness() {
    let started = Instant::now();
    let mut r = rng(11);
    let mut passes = 0;
    let mut failures = Vec::new();
    for patch in [64usize, 128] {
        for depth in [2usize, 3] {
            let config = BackboneConfig {
                depth,
                base_width: 8,
                feature_channels: 8,
                ..Default::default()
            };
            let bundles: Vec<ModelBundle> = Variant::ALL
                .iter()
                .map(|&v| build_model(v, &config, &mut rng(1100 + depth as u64)).unwrap())
                .collect();
            for k in 0..25 {
                let bundle = &bundles[k % 3];
                let available = r.gen_bool(0.7);
                let sample = random_sample(&mut r, patch, available);
                if let Err(e) = check_shapes(bundle, &sample) {
                    failures.push(format!("patch {patch} depth {depth} {}: {e}", bundle.variant));
                }
                passes += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = failures.is_empty() && passes == 100;
    verdict(
        11,
        "shape and finiteness suite",
        ok,
        &format!("{passes} forward passes over patch {{64, 128}} x depth {{2, 3}}, {} failures, {secs:.1} s", failures.len()),
    );
    assert!(ok, "{failures:?}");
}
