//! Before/after tables and grouped-bar plots over saved run reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{relative_improvement, EvalReport, ReportRow};
use crate::{Error, Result};

/// Baseline variant every other variant is compared against.
pub const BASELINE: &str = "none";

/// A report row with its relative improvement over the matching baseline
/// row (same algorithm and cutoff).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    #[serde(flatten)]
    pub row: ReportRow,
    pub recall_rel_imp: Option<f64>,
    pub ndcg_rel_imp: Option<f64>,
}

pub fn summarize(run: &str, report: &EvalReport) -> Vec<SummaryRow> {
    report
        .rows
        .iter()
        .map(|r| {
            let base = (r.variant != BASELINE)
                .then(|| report.find(&r.algo, BASELINE, r.cutoff))
                .flatten();
            SummaryRow {
                run: run.into(),
                row: r.clone(),
                recall_rel_imp: base.and_then(|b| relative_improvement(r.recall_mean, b.recall_mean)),
                ndcg_rel_imp: base.and_then(|b| relative_improvement(r.ndcg_mean, b.ndcg_mean)),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(
        "run,algo,variant,cutoff,recall_mean,recall_std,ndcg_mean,ndcg_std,recall_rel_imp,ndcg_rel_imp,n_users,seeds\n",
    );
    for s in rows {
        let r = &s.row;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            s.run,
            r.algo,
            r.variant,
            r.cutoff,
            r.recall_mean,
            r.recall_std,
            r.ndcg_mean,
            r.ndcg_std,
            opt(s.recall_rel_imp),
            opt(s.ndcg_rel_imp),
            r.n_users,
            r.seeds
        );
    }
    out
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(120, 120, 120),
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
];

/// Recall and NDCG panels; one group per cutoff, one bar per
/// (algorithm, variant).
pub fn plot_report(report: &EvalReport, title: &str, path: &Path) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let mut cutoffs: Vec<usize> = report.rows.iter().map(|r| r.cutoff).collect();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let mut series: Vec<(String, String)> = Vec::new();
    for r in &report.rows {
        let key = (r.algo.clone(), r.variant.clone());
        if !series.contains(&key) {
            series.push(key);
        }
    }
    if cutoffs.is_empty() {
        return Err(Error::InvalidArgument("report has no rows to plot".into()));
    }

    let root = SVGBackend::new(path, (1100, 460)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let root = root.titled(title, ("sans-serif", 20)).map_err(|e| plot_err(&e))?;
    let panels = root.split_evenly((1, 2));
    let width = 0.8 / series.len() as f64;
    for (panel, (name, pick)) in panels.iter().zip([
        ("Recall", (|r: &ReportRow| r.recall_mean) as fn(&ReportRow) -> f64),
        ("NDCG", |r: &ReportRow| r.ndcg_mean),
    ]) {
        let top = report.rows.iter().map(pick).fold(0.0f64, f64::max).max(1e-3) * 1.15;
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{name}@K"), ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(-0.5f64..cutoffs.len() as f64 - 0.5, 0.0..top)
            .map_err(|e| plot_err(&e))?;
        let labels = cutoffs.clone();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(cutoffs.len() * 2 + 1)
            .x_label_formatter(&|x| {
                let k = x.round();
                if (x - k).abs() < 1e-6 && k >= 0.0 {
                    labels.get(k as usize).map(|c| format!("@{c}")).unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .draw()
            .map_err(|e| plot_err(&e))?;
        for (b, (algo, variant)) in series.iter().enumerate() {
            let color = PALETTE[b % PALETTE.len()];
            let bars: Vec<Rectangle<(f64, f64)>> = cutoffs
                .iter()
                .enumerate()
                .filter_map(|(g, &k)| {
                    let row = report.find(algo, variant, k)?;
                    let x0 = g as f64 - 0.4 + b as f64 * width;
                    Some(Rectangle::new([(x0, 0.0), (x0 + width * 0.95, pick(row))], color.filled()))
                })
                .collect();
            chart
                .draw_series(bars)
                .map_err(|e| plot_err(&e))?
                .label(format!("{algo}/{variant}"))
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Writes `summary.csv`, `summary.json` and one `<run>_bars.svg` per run.
pub fn emit_report(runs: &[(String, EvalReport)], out: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    fs::create_dir_all(out)?;
    let rows: Vec<SummaryRow> = runs.iter().flat_map(|(name, r)| summarize(name, r)).collect();
    let mut written = vec![out.join("summary.csv"), out.join("summary.json")];
    fs::write(&written[0], summary_csv(&rows))?;
    fs::write(&written[1], serde_json::to_string_pretty(&rows)?)?;
    for (name, report) in runs {
        let path = out.join(format!("{name}_bars.svg"));
        plot_report(report, name, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Every `report.json` directly below `runs` (or in `runs` itself), named
/// after its directory and sorted by name.
pub fn collect_reports(runs: &Path) -> Result<Vec<(String, EvalReport)>> {
    let name_of = |p: &Path| p.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
    let mut found = Vec::new();
    if runs.join("report.json").is_file() {
        found.push(runs.to_path_buf());
    }
    for entry in fs::read_dir(runs)? {
        let p = entry?.path();
        if p.join("report.json").is_file() {
            found.push(p);
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|p| Ok((name_of(&p), EvalReport::from_json(&fs::read_to_string(p.join("report.json"))?)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(algo: &str, variant: &str, cutoff: usize, recall: f64, ndcg: f64) -> ReportRow {
        ReportRow {
            algo: algo.into(),
            variant: variant.into(),
            cutoff,
            recall_mean: recall,
            recall_std: 0.0,
            ndcg_mean: ndcg,
            ndcg_std: 0.0,
            n_users: 10,
            seeds: 3,
        }
    }

    #[test]
    fn single_report_is_one_csv_row() {
        let report = EvalReport {
            rows: vec![row("als", "none", 10, 0.3, 0.2)],
        };
        let rows = summarize("ml", &report);
        let csv = summary_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(rows[0].recall_rel_imp.is_none());
        assert!(csv.lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn deltas_follow_relative_improvement() {
        let report = EvalReport {
            rows: vec![
                row("als", "none", 10, 0.2810, 0.2),
                row("als", "full", 10, 0.3112, 0.3),
                row("svd", "full", 10, 0.3, 0.3),
            ],
        };
        let rows = summarize("ml", &report);
        assert!((rows[1].recall_rel_imp.unwrap() - relative_improvement(0.3112, 0.2810).unwrap()).abs() < 1e-15);
        assert!((rows[1].ndcg_rel_imp.unwrap() - 0.5).abs() < 1e-12);
        assert!(rows[2].recall_rel_imp.is_none());
    }

    #[test]
    fn emission_writes_non_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for k in [5, 10] {
            rows.push(row("als", "none", k, 0.1 * k as f64 / 10.0, 0.05));
            rows.push(row("als", "full", k, 0.12 * k as f64 / 10.0, 0.06));
        }
        let runs = vec![("ml100k".to_string(), EvalReport { rows })];
        let files = emit_report(&runs, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            assert!(fs::metadata(f).unwrap().len() > 0, "{f:?}");
        }
        let svg = fs::read_to_string(&files[2]).unwrap();
        assert!(svg.contains("<svg") && svg.contains("als/full"));
        assert!(emit_report(&[], dir.path()).is_err());
    }

    #[test]
    fn collects_run_directories() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            rows: vec![row("als", "none", 10, 0.3, 0.2)],
        };
        for name in ["b", "a"] {
            fs::create_dir(dir.path().join(name)).unwrap();
            fs::write(dir.path().join(name).join("report.json"), report.to_json()).unwrap();
        }
        let found = collect_reports(dir.path()).unwrap();
        assert_eq!(found.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(found[0].1, report);
    }
}
