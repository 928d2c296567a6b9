//! Stratified evaluation and cross-seed aggregation.

mod metrics;
mod report;

pub use metrics::{confusion, f1_iou, ConfusionCounts};
pub use report::{read_table_csv, render_markdown, report, write_table_csv, ReportFiles};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Raster, Sample};
use crate::error::{Error, Result};
use crate::losses::feature_similarity;
use crate::models::{ForwardMode, ModelBundle, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stratum {
    All,
    MultiModal,
    MissingModality,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::MultiModal, Stratum::MissingModality];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::MultiModal => "multi-modal",
            Stratum::MissingModality => "missing-modality",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stratum::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown stratum `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Metrics from counts summed over every tile of the stratum.
    #[default]
    Pooled,
    /// Metrics per site from that site's summed counts, then averaged.
    PerSite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub threshold: f32,
    pub averaging: Averaging,
    /// Drop tiles with no positive pixel in prediction or label.
    pub exclude_degenerate: bool,
    pub mode: ForwardMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            averaging: Averaging::Pooled,
            exclude_degenerate: false,
            mode: ForwardMode::Auto,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Argument(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub iou: f64,
    pub tiles: usize,
}

/// Per-stratum results; a stratum without tiles is `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StratifiedMetrics {
    pub all: Option<StratumMetrics>,
    pub multi_modal: Option<StratumMetrics>,
    pub missing_modality: Option<StratumMetrics>,
}

impl StratifiedMetrics {
    pub fn get(&self, stratum: Stratum) -> Option<&StratumMetrics> {
        match stratum {
            Stratum::All => self.all.as_ref(),
            Stratum::MultiModal => self.multi_modal.as_ref(),
            Stratum::MissingModality => self.missing_modality.as_ref(),
        }
    }
}

/// Full-tile prediction: reflect-pads to the network's size multiple and
/// crops the prediction back.
pub fn predict_tile(bundle: &ModelBundle, sample: &Sample, mode: ForwardMode) -> Result<Raster> {
    let m = bundle.config.size_multiple();
    let (h, w) = (sample.height(), sample.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(bundle.forward(sample, mode)?.prediction().clone());
    }
    let padded = Sample {
        sar: sample.sar.pad_reflect(ph, pw),
        optical: sample.optical.as_ref().map(|o| o.pad_reflect(ph, pw)),
        label: sample.label.pad_reflect(ph, pw),
        ..sample.clone()
    };
    Ok(bundle.forward(&padded, mode)?.prediction().window(0, 0, h, w))
}

fn stratum_metrics(tiles: &[(&str, ConfusionCounts)], averaging: Averaging) -> Option<StratumMetrics> {
    if tiles.is_empty() {
        return None;
    }
    let counts: ConfusionCounts = tiles.iter().map(|t| t.1).sum();
    let (f1, iou) = match averaging {
        Averaging::Pooled => f1_iou(&counts),
        Averaging::PerSite => {
            let mut sites: BTreeMap<&str, ConfusionCounts> = BTreeMap::new();
            for (site, c) in tiles {
                *sites.entry(site).or_default() += *c;
            }
            let n = sites.len() as f64;
            let (sf, si) = sites
                .values()
                .map(f1_iou)
                .fold((0.0, 0.0), |(a, b), (f, i)| (a + f, b + i));
            (sf / n, si / n)
        }
    };
    Some(StratumMetrics {
        counts,
        f1,
        iou,
        tiles: tiles.len(),
    })
}

/// Evaluates every tile and reports the three strata, split on the
/// availability flag.
pub fn evaluate(bundle: &ModelBundle, dataset: &Dataset, options: &EvalOptions) -> Result<StratifiedMetrics> {
    options.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument(format!("split `{}` is empty", dataset.split)));
    }
    let mut multi = Vec::new();
    let mut missing = Vec::new();
    for sample in dataset {
        let pred = predict_tile(bundle, sample, options.mode)?;
        let c = confusion(&pred, &sample.label, options.threshold)?;
        if options.exclude_degenerate && c.is_degenerate() {
            continue;
        }
        if sample.optical_available {
            multi.push((sample.site_id.as_str(), c));
        } else {
            missing.push((sample.site_id.as_str(), c));
        }
    }
    let all: Vec<_> = multi.iter().chain(&missing).copied().collect();
    Ok(StratifiedMetrics {
        all: stratum_metrics(&all, options.averaging),
        multi_modal: stratum_metrics(&multi, options.averaging),
        missing_modality: stratum_metrics(&missing, options.averaging),
    })
}

/// Mean feature similarity between the optical features and their
/// reconstruction over the samples that have an optical image. `None` for
/// variants without a reconstruction network or when no sample qualifies.
pub fn mean_similarity(bundle: &ModelBundle, dataset: &Dataset) -> Result<Option<f64>> {
    if bundle.reconstruction_net.is_none() {
        return Ok(None);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for sample in dataset.iter().filter(|s| s.optical_available) {
        let out = bundle.forward(sample, ForwardMode::Auto)?;
        if let (Some(f2), Some(f2_hat)) = (&out.f_s2, &out.f_s2_hat) {
            sum += feature_similarity(f2, f2_hat)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// One evaluated (variant, stratum, seed) cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub variant: Variant,
    pub stratum: Stratum,
    pub seed: u64,
    pub f1: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed results of several variants. Entries are kept sorted by
/// (variant, stratum, seed); adding an existing key replaces it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    entries: Vec<EvalEntry>,
}

impl EvalTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[EvalEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: EvalEntry) {
        let key = |e: &EvalEntry| (e.variant, e.stratum, e.seed);
        match self.entries.binary_search_by_key(&key(&entry), key) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
    }

    pub fn add_run(&mut self, variant: Variant, seed: u64, metrics: &StratifiedMetrics) {
        for stratum in Stratum::ALL {
            if let Some(m) = metrics.get(stratum) {
                self.insert(EvalEntry {
                    variant,
                    stratum,
                    seed,
                    f1: m.f1,
                    iou: m.iou,
                    counts: m.counts,
                });
            }
        }
    }

    pub fn merge(&mut self, other: &EvalTable) {
        for e in &other.entries {
            self.insert(*e);
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = self.entries.iter().map(|e| e.variant).collect();
        v.dedup();
        v
    }

    pub fn seeds(&self, variant: Variant) -> Vec<u64> {
        let mut s: Vec<u64> = self
            .entries
            .iter()
            .filter(|e| e.variant == variant)
            .map(|e| e.seed)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn cells(&self, variant: Variant, stratum: Stratum) -> impl Iterator<Item = &EvalEntry> {
        self.entries
            .iter()
            .filter(move |e| e.variant == variant && e.stratum == stratum)
    }

    pub fn get(&self, variant: Variant, stratum: Stratum, seed: u64) -> Option<&EvalEntry> {
        self.cells(variant, stratum).find(|e| e.seed == seed)
    }

    pub fn aggregate(&self, variant: Variant, stratum: Stratum) -> Option<Aggregate> {
        let (f1, iou): (Vec<f64>, Vec<f64>) = self.cells(variant, stratum).map(|e| (e.f1, e.iou)).unzip();
        if f1.is_empty() {
            return None;
        }
        let (f1_mean, f1_std) = mean_std(&f1);
        let (iou_mean, iou_std) = mean_std(&iou);
        Some(Aggregate {
            runs: f1.len(),
            f1_mean,
            f1_std,
            iou_mean,
            iou_std,
        })
    }
}
