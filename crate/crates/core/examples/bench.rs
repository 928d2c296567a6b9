//! The desk-scale comparison of the three variants on synthetic data (about
//! half an hour on one core).
//!
//! ```text
//! cargo run --release --example bench -- [out_dir]
//! ```
//!
//! Re-running with the same output directory resumes finished runs.

use std::path::PathBuf;

use sarfuse::experiment::{run_bench, ExperimentPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/bench".into()));
    let outcome = run_bench(&ExperimentPlan::desk(out), true)?;
    print!("{}", std::fs::read_to_string(&outcome.report.markdown)?);
    let orderings = outcome.orderings.expect("all variants ran");
    for c in &orderings.checks {
        println!(
            "{} {} (per-seed wins {}/{}, means {:.4} vs {:.4})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.wins,
            c.per_seed.len(),
            c.mean_better,
            c.mean_worse
        );
    }
    Ok(())
}
