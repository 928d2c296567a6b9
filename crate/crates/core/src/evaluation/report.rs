//! Result files.
//!
//! `results.csv` has the header `variant,stratum,seed,f1,iou,tp,fp,fn,tn`.
//! Each (variant, stratum, seed) gets one row; after the seeds of a
//! (variant, stratum) pair follow two aggregate rows whose `seed` column is
//! `mean` or `std` (population standard deviation), with the count columns
//! left empty. Floats are written in shortest round-trip form.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{EvalEntry, EvalTable, Stratum};
use crate::error::{Error, Result};
use crate::evaluation::ConfusionCounts;
use crate::models::Variant;

const HEADER: [&str; 9] = ["variant", "stratum", "seed", "f1", "iou", "tp", "fp", "fn", "tn"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_table_csv(table: &EvalTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for variant in table.variants() {
        for stratum in Stratum::ALL {
            let Some(agg) = table.aggregate(variant, stratum) else {
                continue;
            };
            for e in table.cells(variant, stratum) {
                let c = e.counts;
                w.write_record([
                    variant.to_string(),
                    stratum.to_string(),
                    e.seed.to_string(),
                    e.f1.to_string(),
                    e.iou.to_string(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    c.tn.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
            for (tag, f1, iou) in [
                ("mean", agg.f1_mean, agg.iou_mean),
                ("std", agg.f1_std, agg.iou_std),
            ] {
                let row = [variant.to_string(), stratum.to_string(), tag.into(), f1.to_string(), iou.to_string()];
                w.write_record(row.iter().map(String::as_str).chain(["", "", "", ""]))
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`write_table_csv`]. Aggregate rows are checked
/// against the per-seed rows.
pub fn read_table_csv(path: &Path) -> Result<EvalTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {}",
            path.display(),
            HEADER.join(",")
        )));
    }
    let bad = |line: usize, what: &str| Error::Format(format!("{} line {line}: {what}", path.display()));
    let mut table = EvalTable::new();
    let mut aggregates = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let variant: Variant = rec[0].parse().map_err(|_| bad(line, "unknown variant"))?;
        let stratum: Stratum = rec[1].parse().map_err(|_| bad(line, "unknown stratum"))?;
        let f1: f64 = rec[3].parse().map_err(|_| bad(line, "bad f1"))?;
        let iou: f64 = rec[4].parse().map_err(|_| bad(line, "bad iou"))?;
        match &rec[2] {
            tag @ ("mean" | "std") => aggregates.push((line, variant, stratum, tag == "mean", f1, iou)),
            seed => {
                let int = |j: usize| rec[j].parse::<u64>().map_err(|_| bad(line, "bad count"));
                table.insert(EvalEntry {
                    variant,
                    stratum,
                    seed: seed.parse().map_err(|_| bad(line, "bad seed"))?,
                    f1,
                    iou,
                    counts: ConfusionCounts {
                        tp: int(5)?,
                        fp: int(6)?,
                        fn_: int(7)?,
                        tn: int(8)?,
                    },
                });
            }
        }
    }
    for (line, variant, stratum, is_mean, f1, iou) in aggregates {
        let agg = table
            .aggregate(variant, stratum)
            .ok_or_else(|| bad(line, "aggregate row without per-seed rows"))?;
        let (ef, ei) = if is_mean {
            (agg.f1_mean, agg.iou_mean)
        } else {
            (agg.f1_std, agg.iou_std)
        };
        if (ef - f1).abs() > 1e-9 || (ei - iou).abs() > 1e-9 {
            return Err(bad(line, "aggregate does not match per-seed values"));
        }
    }
    Ok(table)
}

/// Markdown table with one row per variant and F1/IoU columns for each
/// stratum as `mean ± std`. The highest mean in each column is bold.
pub fn render_markdown(table: &EvalTable) -> String {
    let variants = table.variants();
    let columns: Vec<(Stratum, bool)> = Stratum::ALL.iter().flat_map(|&s| [(s, true), (s, false)]).collect();
    let value = |v: Variant, (s, is_f1): (Stratum, bool)| {
        table
            .aggregate(v, s)
            .map(|a| if is_f1 { (a.f1_mean, a.f1_std) } else { (a.iou_mean, a.iou_std) })
    };
    let best: Vec<Option<f64>> = columns
        .iter()
        .map(|&col| {
            variants
                .iter()
                .filter_map(|&v| value(v, col).map(|x| x.0))
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        })
        .collect();

    let mut out = String::from("| Variant |");
    for (s, is_f1) in &columns {
        out.push_str(&format!(" {} {} |", s, if *is_f1 { "F1" } else { "IoU" }));
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(columns.len()));
    out.push('\n');
    for &v in &variants {
        out.push_str(&format!("| {v} |"));
        for (j, &col) in columns.iter().enumerate() {
            match value(v, col) {
                Some((mean, std)) => {
                    let cell = format!("{mean:.3} ± {std:.3}");
                    if Some(mean) == best[j] {
                        out.push_str(&format!(" **{cell}** |"));
                    } else {
                        out.push_str(&format!(" {cell} |"));
                    }
                }
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out
}

fn render_chart(table: &EvalTable, path: &Path) -> Result<()> {
    let draw_err = |e: String| Error::Internal(format!("drawing {}: {e}", path.display()));
    let variants = table.variants();
    let root = SVGBackend::new(path, (900, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
    let panels = root.split_evenly((1, 2));
    let palette = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44)];
    let slot = 1.0 / (variants.len() as f64 + 1.0);
    for (panel, is_f1) in panels.iter().zip([true, false]) {
        let mut chart = ChartBuilder::on(panel)
            .caption(if is_f1 { "F1" } else { "IoU" }, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(0.0..3.0f64, 0.0..1.0f64)
            .map_err(|e| draw_err(e.to_string()))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(3)
            .x_label_formatter(&|x| {
                Stratum::ALL
                    .get(x.floor() as usize)
                    .map(|s| s.to_string())
                    .unwrap_or_default()
            })
            .draw()
            .map_err(|e| draw_err(e.to_string()))?;
        for (k, &v) in variants.iter().enumerate() {
            let color = palette[k % palette.len()];
            let mut bars = Vec::new();
            let mut whiskers = Vec::new();
            for (i, s) in Stratum::ALL.iter().enumerate() {
                let Some(a) = table.aggregate(v, *s) else { continue };
                let (mean, std) = if is_f1 { (a.f1_mean, a.f1_std) } else { (a.iou_mean, a.iou_std) };
                let x0 = i as f64 + slot * (k as f64 + 0.5);
                let xm = x0 + slot / 2.0;
                bars.push(Rectangle::new([(x0, 0.0), (x0 + slot, mean)], color.filled()));
                whiskers.push(PathElement::new(vec![(xm, mean - std), (xm, mean + std)], BLACK));
            }
            chart
                .draw_series(bars)
                .map_err(|e| draw_err(e.to_string()))?
                .label(v.to_string())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
            chart.draw_series(whiskers).map_err(|e| draw_err(e.to_string()))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| draw_err(e.to_string()))?;
    }
    root.present().map_err(|e| draw_err(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub chart: PathBuf,
}

/// Writes `results.csv`, `results.md` and `results.svg` into `out`.
pub fn report(table: &EvalTable, out: &Path) -> Result<ReportFiles> {
    if table.is_empty() {
        return Err(Error::Argument("report needs at least one evaluated run".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = ReportFiles {
        csv: out.join("results.csv"),
        markdown: out.join("results.md"),
        chart: out.join("results.svg"),
    };
    write_table_csv(table, &files.csv)?;
    fs::write(&files.markdown, render_markdown(table)).map_err(|e| Error::io(&files.markdown, e))?;
    render_chart(table, &files.chart)?;
    Ok(files)
}
