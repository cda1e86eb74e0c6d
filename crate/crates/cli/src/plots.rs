//! Static SVG figures from summary rows: accuracy against training-data ratio,
//! and grouped bars per hidden-class count for zero-shot runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

use crate::artifacts::{find_summaries, SummaryRow};

/// Condition labels written by zero-shot runs.
pub const ZERO_SHOT_CONDITIONS: [&str; 4] = ["IMU-only", "IMU*+RGB", "RGB-only", "RGB*+IMU"];

pub fn is_zero_shot(condition: &str) -> bool {
    ZERO_SHOT_CONDITIONS.contains(&condition)
}

const SIZE: (u32, u32) = (800, 520);

/// Series in first-appearance order, each a sorted list of
/// (x, mean y over seeds).
type Series = Vec<(String, Vec<(f64, f64)>)>;

fn mean_series(rows: &[&SummaryRow], x: impl Fn(&SummaryRow) -> f64, y: impl Fn(&SummaryRow) -> f64) -> Series {
    let mut order: Vec<String> = Vec::new();
    // x is keyed by its bit pattern; every value here is finite
    let mut acc: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let i = match order.iter().position(|c| *c == r.condition) {
            Some(i) => i,
            None => {
                order.push(r.condition.clone());
                order.len() - 1
            }
        };
        let e = acc.entry((i, x(r).to_bits())).or_insert((0.0, 0));
        e.0 += y(r);
        e.1 += 1;
    }
    order
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let mut pts: Vec<(f64, f64)> = acc
                .iter()
                .filter(|((j, _), _)| *j == i)
                .map(|(&(_, xb), &(sum, n))| (f64::from_bits(xb), sum / n as f64))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (name, pts)
        })
        .collect()
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("drawing plot: {e}")
}

fn color(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 6] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    COLORS[i % COLORS.len()]
}

fn ratio_plot(path: &Path, series: &Series) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Top-1 accuracy vs. training data ratio", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..105f64, 0f64..100f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("Training data (%)")
        .y_desc("Top-1 accuracy (%)")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = color(i);
        let pts: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (100.0 * x, 100.0 * y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), c.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, c.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerLeft)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn bar_chart(path: &Path, title: &str, y_desc: &str, series: &Series) -> Result<()> {
    let mut groups: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)).collect();
    groups.sort_by(f64::total_cmp);
    groups.dedup();
    let n = groups.len();
    let width = 0.8 / series.len().max(1) as f64;

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0f64..100f64)
        .map_err(plot_err)?;
    let labels = groups.clone();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(2) * 2 + 1)
        .x_label_formatter(&|v: &f64| {
            let i = v.round();
            if (v - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                format!("{}", labels[i as usize])
            } else {
                String::new()
            }
        })
        .x_desc("Hidden classes")
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (j, (name, pts)) in series.iter().enumerate() {
        let c = color(j);
        let offset = -0.4 + width * j as f64;
        let bars = pts.iter().map(|&(x, y)| {
            let g = groups.iter().position(|&v| v == x).expect("collected above") as f64;
            Rectangle::new([(g + offset, 0.0), (g + offset + width * 0.95, 100.0 * y)], c.filled())
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], c.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `ratio_accuracy.svg` when the results hold ratio rows and
/// `zero_shot_accuracy.svg` plus `zero_shot_f1.svg` when they hold zero-shot
/// rows. Returns the written paths. Nothing is written if there are no rows.
pub fn emit_plots(results: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let summaries = find_summaries(results)?;
    let rows: Vec<SummaryRow> = summaries.into_iter().flat_map(|s| s.rows).collect();
    if rows.is_empty() {
        bail!("no result rows found under {results:?}; nothing to plot");
    }
    let (zero, ratio): (Vec<&SummaryRow>, Vec<&SummaryRow>) = rows.iter().partition(|r| is_zero_shot(&r.condition));
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if !ratio.is_empty() {
        let path = out_dir.join("ratio_accuracy.svg");
        ratio_plot(&path, &mean_series(&ratio, |r| r.ratio, |r| r.top1))?;
        written.push(path);
    }
    if !zero.is_empty() {
        let hidden = |r: &SummaryRow| r.hidden_count as f64;
        let path = out_dir.join("zero_shot_accuracy.svg");
        bar_chart(
            &path,
            "Zero-shot top-1 accuracy",
            "Top-1 accuracy (%)",
            &mean_series(&zero, hidden, |r| r.top1),
        )?;
        written.push(path);
        let path = out_dir.join("zero_shot_f1.svg");
        bar_chart(
            &path,
            "Zero-shot macro-F1",
            "Macro-F1 (%)",
            &mean_series(&zero, hidden, |r| r.macro_f1),
        )?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(condition: &str, ratio: f64, seed: u64, top1: f64) -> SummaryRow {
        SummaryRow {
            dataset: "SYNTHETIC".into(),
            condition: condition.into(),
            ratio,
            hidden_count: 0,
            seed,
            top1,
            top5: 1.0,
            macro_f1: top1,
        }
    }

    #[test]
    fn series_average_over_seeds_in_ratio_order() {
        let rows = [
            row("FUSED", 1.0, 0, 0.5),
            row("IMU", 0.5, 0, 0.2),
            row("FUSED", 0.5, 0, 0.6),
            row("FUSED", 1.0, 1, 1.0),
        ];
        let refs: Vec<&SummaryRow> = rows.iter().collect();
        let s = mean_series(&refs, |r| r.ratio, |r| r.top1);
        assert_eq!(s[0].0, "FUSED");
        assert_eq!(s[0].1, vec![(0.5, 0.6), (1.0, 0.75)]);
        assert_eq!(s[1], ("IMU".to_string(), vec![(0.5, 0.2)]));
    }
}
