use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::artifact_path;
use super::metrics::MetricsTable;
use crate::error::{Error, Result};

type SeriesKey = (String, String, String);

/// `(kind, metric, condition) → [(x, mean, std, n)]`, x ascending.
fn aggregate(table: &MetricsTable) -> BTreeMap<SeriesKey, Vec<(f64, f64, f64, usize)>> {
    let mut groups: BTreeMap<SeriesKey, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in &table.rows {
        groups
            .entry((r.kind.clone(), r.metric.clone(), r.condition.clone()))
            .or_default()
            .entry(r.x.to_bits())
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|(k, by_x)| {
            let mut pts: Vec<(f64, f64, f64, usize)> = by_x
                .into_iter()
                .map(|(xb, vs)| {
                    let n = vs.len();
                    let mean = vs.iter().sum::<f64>() / n as f64;
                    let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    (f64::from_bits(xb), mean, var.sqrt(), n)
                })
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, pts)
        })
        .collect()
}

/// Plain-text table of means and standard deviations over seeds.
pub fn render_summary(table: &MetricsTable) -> String {
    if table.is_empty() {
        return "no data\n".to_string();
    }
    let mut out = String::new();
    for (k, v) in &table.provenance {
        let _ = writeln!(out, "{k}: {v}");
    }
    let _ = writeln!(
        out,
        "{:<20} {:<16} {:<16} {:>8} {:>10} {:>10} {:>4}",
        "kind", "metric", "condition", "x", "mean", "std", "n"
    );
    for ((kind, metric, cond), pts) in aggregate(table) {
        for (x, mean, std, n) in pts {
            let _ = writeln!(
                out,
                "{kind:<20} {metric:<16} {cond:<16} {x:>8} {mean:>10.4} {std:>10.4} {n:>4}"
            );
        }
    }
    out
}

pub struct ReportFiles {
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Pipeline(format!("plot rendering failed: {e}"))
}

fn plot(
    path: &Path,
    title: &str,
    x_desc: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let ys = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1));
    let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), y| (a.min(y), b.max(y)));
    let pad = |lo: f64, hi: f64| {
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0.min(0.0), y1);

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, y0..y1 * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

type Series = (String, Vec<(f64, f64)>);

/// Write `summary-{hash}.txt` and one SVG per `(kind, metric)` into `dir`.
/// An empty table produces a summary reading "no data" and no plots.
pub fn render_report(table: &MetricsTable, dir: &Path, config_hash: &str) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = artifact_path(dir, "summary", config_hash, "txt");
    std::fs::write(&summary, render_summary(table)).map_err(|e| Error::io(&summary, e))?;
    let mut by_plot: BTreeMap<(String, String), Vec<Series>> = BTreeMap::new();
    for ((kind, metric, cond), pts) in aggregate(table) {
        by_plot
            .entry((kind, metric))
            .or_default()
            .push((cond, pts.iter().map(|p| (p.0, p.1)).collect()));
    }
    let mut plots = Vec::new();
    for ((kind, metric), series) in by_plot {
        let path = artifact_path(dir, &format!("{kind}-{metric}"), config_hash, "svg");
        let x_desc = match kind.as_str() {
            "gradient_trends" | "evolution" => "task",
            "scratch_compare" => "epoch",
            "sample_sweep" => "samples per class",
            "open_world" => "lambda_open",
            "position_ablation" => "first layer",
            _ => "x",
        };
        plot(&path, &format!("{kind}: {metric}"), x_desc, &series)?;
        plots.push(path);
    }
    Ok(ReportFiles { summary, plots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_reports_no_data() {
        let t = MetricsTable::new();
        assert_eq!(render_summary(&t), "no data\n");
        let dir = std::env::temp_dir().join(format!("lg-report-empty-{}", std::process::id()));
        let files = render_report(&t, &dir, "h").unwrap();
        assert!(files.plots.is_empty());
        assert_eq!(
            std::fs::read_to_string(&files.summary).unwrap(),
            "no data\n"
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn report_aggregates_over_seeds_and_plots() {
        let mut t = MetricsTable::new();
        for seed in 0..3 {
            for x in 1..=4 {
                t.push(
                    "scratch_compare",
                    seed,
                    "individual",
                    x as f64,
                    "query_accuracy",
                    0.5 + 0.1 * x as f64,
                );
                t.push(
                    "scratch_compare",
                    seed,
                    "scratch",
                    x as f64,
                    "query_accuracy",
                    0.2 * seed as f64,
                );
            }
        }
        let s = render_summary(&t);
        assert!(s.contains("individual"));
        let line = s
            .lines()
            .find(|l| l.contains("scratch ") && l.contains(" 1 "))
            .unwrap_or("");
        assert!(line.contains("0.2000"), "{s}");
        let dir = std::env::temp_dir().join(format!("lg-report-{}", std::process::id()));
        let files = render_report(&t, &dir, "h").unwrap();
        assert_eq!(files.plots.len(), 1);
        let svg = std::fs::read_to_string(&files.plots[0]).unwrap();
        assert!(svg.starts_with("<svg"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
