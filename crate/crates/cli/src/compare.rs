//! Side-by-side table of several runs: one row per method (condition) per
//! run, top-1 / top-5 / macro-F1 columns per dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::artifacts::{find_summaries, Summary};
use crate::options::ConfigError;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub dataset: String,
    pub top1: f64,
    pub top5: f64,
    pub macro_f1: f64,
    pub warning: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub datasets: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn method_label(condition: &str, ratio: f64, hidden_count: usize) -> String {
    let mut label = condition.to_string();
    if ratio != 1.0 {
        label.push_str(&format!(" @ {}%", 100.0 * ratio));
    }
    if hidden_count > 0 {
        label.push_str(&format!(" ({hidden_count} hidden)"));
    }
    label
}

/// Averages each summary over seeds, keeping rows in first-appearance
/// order. Runs on another dataset than the first get a warning instead of
/// being rejected.
pub fn build_comparison(summaries: &[Summary]) -> Result<Comparison> {
    if summaries.len() < 2 {
        return Err(ConfigError(format!("compare needs at least 2 summaries, found {}", summaries.len())).into());
    }
    let mut datasets: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for summary in summaries {
        if summary.rows.is_empty() {
            bail!("{} has no rows", summary.path.display());
        }
        let mut groups: Vec<(String, String, [f64; 3], usize)> = Vec::new();
        for r in &summary.rows {
            let method = method_label(&r.condition, r.ratio, r.hidden_count);
            let i = match groups.iter().position(|g| g.0 == method && g.1 == r.dataset) {
                Some(i) => i,
                None => {
                    groups.push((method, r.dataset.clone(), [0.0; 3], 0));
                    groups.len() - 1
                }
            };
            let g = &mut groups[i];
            g.2[0] += r.top1;
            g.2[1] += r.top5;
            g.2[2] += r.macro_f1;
            g.3 += 1;
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
        }
        for (method, dataset, sums, n) in groups {
            let warning = if dataset != datasets[0] {
                format!("dataset {dataset} differs from {}", datasets[0])
            } else {
                String::new()
            };
            rows.push(ComparisonRow {
                method,
                dataset,
                top1: sums[0] / n as f64,
                top5: sums[1] / n as f64,
                macro_f1: sums[2] / n as f64,
                warning,
            });
        }
    }
    Ok(Comparison { datasets, rows })
}

impl Comparison {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["method".to_string()];
        for d in &self.datasets {
            for m in ["top1", "top5", "macro_f1"] {
                h.push(format!("{d}_{m}"));
            }
        }
        h.push("warning".into());
        h
    }

    /// Cells as percentages with two decimals; other datasets' cells are
    /// empty.
    pub fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.method.clone()];
                for d in &self.datasets {
                    if *d == r.dataset {
                        cells.extend([r.top1, r.top5, r.macro_f1].map(|v| format!("{:.2}", 100.0 * v)));
                    } else {
                        cells.extend(std::iter::repeat_n(String::new(), 3));
                    }
                }
                cells.push(r.warning.clone());
                cells
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let cells = self.cells();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|row| row[c].chars().count())
                    .chain([header[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, &w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for row in &cells {
            line(&mut out, row);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for row in self.cells() {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `comparison.csv` and `comparison.txt` under `out_dir`.
pub fn compare_runs(results: &[PathBuf], out_dir: &Path) -> Result<Comparison> {
    let summaries = find_summaries(results)?;
    let comparison = build_comparison(&summaries)?;
    fs::create_dir_all(out_dir)?;
    comparison.write_csv(&out_dir.join("comparison.csv"))?;
    fs::write(out_dir.join("comparison.txt"), comparison.to_text())?;
    Ok(comparison)
}
