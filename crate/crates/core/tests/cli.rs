use std::borrow::BorrowMut;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sarfuse(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sarfuse"));
    c.args(args).env_remove("SARFUSE_SEED").env_remove("RUST_LOG");
    c
}

fn run(mut cmd: impl BorrowMut<Command>) -> Output {
    cmd.borrow_mut().output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to file contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn synth_writes_a_dataset_and_prints_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = run(sarfuse(&["synth", "--sites", "10", "--tiles", "24", "--dropout", "0.12", "--out", path(&d)]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(Path::new(printed.trim()).is_file());
    let total: usize = ["train", "val", "test"]
        .iter()
        .map(|s| sarfuse::data::load_dataset(&d, s).unwrap().len())
        .sum();
    assert_eq!(total, 240);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    for args in [
        vec!["synth", "--dropout", "1.5", "--out", path(&d)],
        vec!["synth", "--tile-size", "16", "--out", path(&d)],
        vec!["synth", "--sites", "ten", "--out", path(&d)],
        vec!["frobnicate"],
        vec!["train", "--data", path(&d), "--out", path(&d), "--variant", "nope"],
        vec!["evaluate", "--checkpoint", "x", "--data", "y", "--out", "z", "--threshold", "1.5"],
    ] {
        let out = run(&mut sarfuse(&args));
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = run(sarfuse(&["synth", "--out", path(&d)]).env("SARFUSE_SEED", "abc"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = run(&mut sarfuse(&["report", "--in", path(&missing), "--out", path(dir.path())]));
    assert_eq!(out.status.code(), Some(1));
    let out = run(&mut sarfuse(&[
        "evaluate",
        "--checkpoint",
        path(&missing),
        "--data",
        path(&missing),
        "--out",
        path(&dir.path().join("r")),
    ]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_reproducible_and_the_seed_variable_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        let out = run(&mut sarfuse(&["synth", "--sites", "4", "--tiles", "3", "--seed", "5", "--out", path(d)]));
        assert!(out.status.success());
    }
    assert_eq!(snapshot(&a), snapshot(&b));
    let out = run(sarfuse(&["synth", "--sites", "4", "--tiles", "3", "--out", path(&c)]).env("SARFUSE_SEED", "5"));
    assert!(out.status.success());
    assert_eq!(snapshot(&a), snapshot(&c));
    let config = dir.path().join("sim.json");
    fs::write(&config, r#"{"num_sites": 4, "timestamps_per_site": 3, "seed": 6}"#).unwrap();
    let e = dir.path().join("e");
    assert!(run(&mut sarfuse(&["synth", "--config", path(&config), "--out", path(&e)])).status.success());
    assert_ne!(snapshot(&a), snapshot(&e));
}

fn tiny_train_config(dir: &Path) -> PathBuf {
    let p = dir.join("train.json");
    fs::write(
        &p,
        r#"{"backbone": {"base_width": 4, "feature_channels": 4}, "learning_rate": 0.001,
            "max_epochs": 2, "patience": 1, "num_runs": 2, "batch_size": 8}"#,
    )
    .unwrap();
    p
}

#[test]
fn train_evaluate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&mut sarfuse(&["synth", "--sites", "5", "--tiles", "3", "--dropout", "0.3", "--out", path(&data)]))
        .status
        .success());
    let config = tiny_train_config(dir.path());
    let results = dir.path().join("results");
    for variant in ["proposed", "unimodal-sar"] {
        let runs = dir.path().join(variant);
        let out = run(&mut sarfuse(&[
            "train",
            "--config",
            path(&config),
            "--variant",
            variant,
            "--data",
            path(&data),
            "--out",
            path(&runs),
        ]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(runs.join("seed_0/model.ckpt").is_file() && runs.join("seed_1/model.ckpt").is_file());
        let out = run(&mut sarfuse(&[
            "evaluate",
            "--checkpoint",
            path(&runs),
            "--data",
            path(&data),
            "--out",
            path(&results),
        ]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let table = sarfuse::evaluation::read_table_csv(&results.join("results.csv")).unwrap();
    assert_eq!(table.entries().len(), 2 * 2 * 3);
    let report_dir = dir.path().join("report");
    let out = run(&mut sarfuse(&["report", "--in", path(&results), "--out", path(&report_dir)]));
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("unimodal-sar"));
    for f in ["results.csv", "results.md", "results.svg"] {
        assert!(report_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn single_variant_bench_skips_orderings_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    fs::write(
        &plan,
        r#"{"dataset": {"synthetic": {"num_sites": 5, "timestamps_per_site": 3}},
            "variants": ["proposed", "ds-zerofill", "unimodal-sar"],
            "train": {"backbone": {"base_width": 4, "feature_channels": 4}, "learning_rate": 0.001,
                      "max_epochs": 2, "patience": 1, "num_runs": 1, "batch_size": 8},
            "out": "ignored"}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("bench");
    let args = ["bench", "--plan", path(&plan), "--variants", "proposed", "--out", path(&out_dir)];
    let out = run(&mut sarfuse(&args));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("ordering checks skipped"), "{stdout}");
    assert!(!out_dir.join("ds-zerofill").exists());

    let record = out_dir.join("proposed/seed_0/record.json");
    let before = fs::read(&record).unwrap();
    let modified = fs::metadata(&record).unwrap().modified().unwrap();
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let out = run(&mut sarfuse(&resumed));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&record).unwrap(), before);
    assert_eq!(fs::metadata(&record).unwrap().modified().unwrap(), modified);
}

#[test]
fn bench_stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let fake = dir.path().join("data");
    fs::create_dir_all(&fake).unwrap();
    fs::write(fake.join(sarfuse::data::MANIFEST_FILE), "{ not json").unwrap();
    let out = run(&mut sarfuse(&[
        "bench",
        "--data",
        path(&fake),
        "--variants",
        "unimodal-sar",
        "--out",
        path(&dir.path().join("b")),
    ]));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("stage `train unimodal-sar`"), "{stderr}");
}
