//! End-to-end comparison of the variants on one dataset.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/                 synthesised dataset (when the plan asks for one)
//! <variant>/seed_<N>/   training runs
//! <variant>/eval.csv    test-split results of that variant
//! report/               results.csv, results.md, results.svg
//! orderings.json        outcome of the ordering checks
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, read_table_csv, report, write_table_csv, EvalOptions, EvalTable, ReportFiles, Stratum};
use crate::models::{load_checkpoint, BackboneConfig, Variant};
use crate::simulator::{generate_dataset, SimConfig};
use crate::training::{run_experiment, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// An existing dataset directory.
    Path(PathBuf),
    /// Synthesised into `<out>/data`.
    Synthetic(SimConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: DatasetSpec,
    pub variants: Vec<Variant>,
    /// Shared settings; `variant` is overridden per entry of `variants`.
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("the plan lists no variants".into()));
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return Err(Error::Config("the plan lists a variant twice".into()));
        }
        if let DatasetSpec::Synthetic(sim) = &self.dataset {
            sim.validate()?;
        }
        self.eval.validate()?;
        self.train.validate()
    }

    pub fn variant_dir(&self, variant: Variant) -> PathBuf {
        self.out.join(variant.as_str())
    }

    /// The single-core desk bench: the default synthetic dataset with heavy
    /// speckle, all three variants, three seeds, a narrow backbone and a
    /// short schedule.
    pub fn desk(out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SimConfig {
                speckle_std: DESK_SPECKLE,
                ..Default::default()
            }),
            variants: Variant::ALL.to_vec(),
            train: desk_train_config(),
            out: out.into(),
            eval: EvalOptions::default(),
        }
    }
}

/// With the default speckle SAR alone nearly solves the synthetic task and
/// every variant saturates.
pub const DESK_SPECKLE: f64 = 2.0;

/// Training settings of [`ExperimentPlan::desk`].
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        backbone: BackboneConfig {
            base_width: 8,
            feature_channels: 8,
            ..Default::default()
        },
        learning_rate: 1e-3,
        max_epochs: 25,
        patience: 6,
        num_runs: 3,
        ..Default::default()
    }
}

/// One ordering between two variants on one stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub better: Variant,
    pub worse: Variant,
    pub stratum: Stratum,
    /// Per-seed F1 of (better, worse), seeds paired by position.
    pub per_seed: Vec<(u64, f64, f64)>,
    /// Seeds on which `better` is strictly ahead.
    pub wins: usize,
    pub mean_better: f64,
    pub mean_worse: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub checks: Vec<OrderingCheck>,
    pub passed: bool,
}

/// Per-seed strict win needed on this many seeds: two of three, or a
/// majority in general.
pub fn required_wins(seeds: usize) -> usize {
    seeds / 2 + 1
}

fn per_seed(table: &EvalTable, a: Variant, b: Variant, stratum: Stratum) -> Vec<(u64, f64, f64)> {
    table
        .cells(a, stratum)
        .filter_map(|e| table.get(b, stratum, e.seed).map(|o| (e.seed, e.f1, o.f1)))
        .collect()
}

/// Checks, using F1:
///
/// * proposed beats unimodal-sar on the multi-modal stratum (per seed, majority)
/// * proposed beats ds-zerofill on the missing-modality stratum (per seed, majority)
/// * proposed's mean on all tiles is at least each baseline's
///
/// Returns `None` unless all three variants are in the table.
pub fn check_orderings(table: &EvalTable) -> Option<OrderingReport> {
    let have = table.variants();
    if !Variant::ALL.iter().all(|v| have.contains(v)) {
        return None;
    }
    let paired = |name: &str, worse: Variant, stratum: Stratum| {
        let rows = per_seed(table, Variant::Proposed, worse, stratum);
        let wins = rows.iter().filter(|r| r.1 > r.2).count();
        let n = rows.len().max(1) as f64;
        let mean_better = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_worse = rows.iter().map(|r| r.2).sum::<f64>() / n;
        OrderingCheck {
            name: name.into(),
            better: Variant::Proposed,
            worse,
            stratum,
            passed: !rows.is_empty() && wins >= required_wins(rows.len()),
            per_seed: rows,
            wins,
            mean_better,
            mean_worse,
        }
    };
    let mean = |v: Variant| table.aggregate(v, Stratum::All).map(|a| a.f1_mean);
    let on_all = |name: &str, worse: Variant| {
        let rows = per_seed(table, Variant::Proposed, worse, Stratum::All);
        let (mb, mw) = (mean(Variant::Proposed).unwrap_or(f64::NAN), mean(worse).unwrap_or(f64::NAN));
        OrderingCheck {
            name: name.into(),
            better: Variant::Proposed,
            worse,
            stratum: Stratum::All,
            wins: rows.iter().filter(|r| r.1 > r.2).count(),
            per_seed: rows,
            mean_better: mb,
            mean_worse: mw,
            passed: mb >= mw,
        }
    };
    let checks = vec![
        paired("multi-modal: proposed > unimodal-sar", Variant::UnimodalSar, Stratum::MultiModal),
        paired("missing-modality: proposed > ds-zerofill", Variant::DsZerofill, Stratum::MissingModality),
        on_all("all: proposed >= ds-zerofill", Variant::DsZerofill),
        on_all("all: proposed >= unimodal-sar", Variant::UnimodalSar),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Some(OrderingReport { checks, passed })
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub table: EvalTable,
    pub report: ReportFiles,
    /// `None` when fewer than three variants ran.
    pub orderings: Option<OrderingReport>,
}

/// Error with the name of the stage that failed.
fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Internal(format!("stage `{name}` failed: {e}")))
}

/// Evaluates every seed checkpoint of one variant on the test split.
pub fn evaluate_runs(checkpoints: &[PathBuf], data_root: &Path, split: &str, options: &EvalOptions) -> Result<EvalTable> {
    let dataset = load_dataset(data_root, split)?;
    let mut table = EvalTable::new();
    for path in checkpoints {
        let (bundle, meta) = load_checkpoint(path)?;
        let metrics = evaluate(&bundle, &dataset, options)?;
        table.add_run(meta.variant, meta.seed, &metrics);
    }
    Ok(table)
}

/// Synthesises (or reuses) the dataset, trains and evaluates every variant,
/// writes the report and checks the orderings. With `resume`, finished
/// runs, evaluations and datasets are reused.
pub fn run_bench(plan: &ExperimentPlan, resume: bool) -> Result<BenchOutcome> {
    plan.validate()?;
    fs::create_dir_all(&plan.out).map_err(|e| Error::io(&plan.out, e))?;
    let data_root = match &plan.dataset {
        DatasetSpec::Path(p) => p.clone(),
        DatasetSpec::Synthetic(sim) => {
            let root = plan.out.join("data");
            let reuse = resume && DatasetManifest::read(&root).is_ok();
            if !reuse {
                info!("synthesising dataset into {}", root.display());
                stage("synth", generate_dataset(sim, &root))?;
            }
            root
        }
    };
    if !data_root.join(MANIFEST_FILE).is_file() {
        return Err(Error::Config(format!("no dataset manifest under {}", data_root.display())));
    }

    let mut table = EvalTable::new();
    for &variant in &plan.variants {
        let dir = plan.variant_dir(variant);
        let eval_file = dir.join("eval.csv");
        let config = TrainConfig { variant, ..plan.train };
        let records = stage(&format!("train {variant}"), run_experiment(&config, &data_root, &dir, resume))?;
        let cached = if resume { read_table_csv(&eval_file).ok() } else { None };
        let expected: Vec<u64> = records.iter().map(|r| r.seed).collect();
        let part = match cached.filter(|t| t.seeds(variant) == expected) {
            Some(t) => t,
            None => {
                let checkpoints: Vec<PathBuf> = records.iter().map(|r| r.checkpoint.clone()).collect();
                let t = stage(
                    &format!("evaluate {variant}"),
                    evaluate_runs(&checkpoints, &data_root, "test", &plan.eval),
                )?;
                stage("write results", write_table_csv(&t, &eval_file))?;
                t
            }
        };
        table.merge(&part);
    }
    let files = stage("report", report(&table, &plan.out.join("report")))?;
    let orderings = check_orderings(&table);
    if let Some(o) = &orderings {
        let path = plan.out.join("orderings.json");
        let text = serde_json::to_string_pretty(o).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(BenchOutcome {
        table,
        report: files,
        orderings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{ConfusionCounts, EvalEntry};

    fn entry(variant: Variant, stratum: Stratum, seed: u64, f1: f64) -> EvalEntry {
        EvalEntry {
            variant,
            stratum,
            seed,
            f1,
            iou: f1 / (2.0 - f1),
            counts: ConfusionCounts::default(),
        }
    }

    fn table(rows: &[(Variant, Stratum, [f64; 3])]) -> EvalTable {
        let mut t = EvalTable::new();
        for (v, s, f1s) in rows {
            for (seed, f1) in f1s.iter().enumerate() {
                t.insert(entry(*v, *s, seed as u64, *f1));
            }
        }
        t
    }

    #[test]
    fn majority_of_seeds() {
        assert_eq!(required_wins(3), 2);
        assert_eq!(required_wins(5), 3);
        assert_eq!(required_wins(1), 1);
    }

    #[test]
    fn orderings_follow_the_per_seed_and_mean_rules() {
        use Stratum::*;
        use Variant::*;
        let rows = [
            (Proposed, All, [0.5, 0.5, 0.5]),
            (DsZerofill, All, [0.45, 0.5, 0.4]),
            (UnimodalSar, All, [0.4, 0.4, 0.4]),
            (Proposed, MultiModal, [0.6, 0.3, 0.6]),
            (UnimodalSar, MultiModal, [0.4, 0.4, 0.4]),
            (DsZerofill, MultiModal, [0.6, 0.6, 0.6]),
            (Proposed, MissingModality, [0.3, 0.3, 0.1]),
            (DsZerofill, MissingModality, [0.2, 0.2, 0.2]),
            (UnimodalSar, MissingModality, [0.4, 0.4, 0.4]),
        ];
        let report = check_orderings(&table(&rows)).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checks[0].wins, 2);

        let mut bad = rows;
        bad[6].2 = [0.1, 0.1, 0.3];
        let report = check_orderings(&table(&bad)).unwrap();
        assert!(!report.passed);
        assert!(!report.checks[1].passed);
    }

    #[test]
    fn orderings_need_all_three_variants() {
        let t = table(&[(Variant::Proposed, Stratum::All, [0.5; 3])]);
        assert!(check_orderings(&t).is_none());
    }

    #[test]
    fn plan_validation() {
        let plan = ExperimentPlan {
            dataset: DatasetSpec::Path("x".into()),
            variants: vec![],
            train: TrainConfig::default(),
            out: "o".into(),
            eval: EvalOptions::default(),
        };
        assert!(plan.validate().is_err());
        let twice = ExperimentPlan {
            variants: vec![Variant::Proposed, Variant::Proposed],
            ..plan.clone()
        };
        assert!(twice.validate().is_err());
        let ok = ExperimentPlan {
            variants: vec![Variant::Proposed],
            ..plan
        };
        assert!(ok.validate().is_ok());
    }
}
