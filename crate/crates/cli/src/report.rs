//! Static rendering of a pretraining metrics log.

use std::path::Path;

use plotters::prelude::*;

use modmae::training::pretrain::{read_metrics, StepMetrics};

use crate::error::CliError;

pub const CURVES_FILE: &str = "loss_curves.svg";
pub const SUMMARY_FILE: &str = "summary.md";

type Series = (&'static str, fn(&StepMetrics) -> f64);

const SERIES: [Series; 6] = [
    ("l_total", |m| m.l_total),
    ("l_mae", |m| m.l_mae),
    ("l_var", |m| m.l_var),
    ("l_cov", |m| m.l_cov),
    ("lr", |m| m.lr),
    ("grad_norm", |m| m.grad_norm),
];

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("plot: {e}"))
}

fn draw(metrics: &[StepMetrics], path: &Path) -> Result<(), CliError> {
    let root = SVGBackend::new(path, (1200, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((3, 2));
    let x_max = metrics.last().map_or(1, |m| m.step).max(1);
    let x_min = metrics.first().map_or(0, |m| m.step).min(x_max - 1);
    for (panel, (name, get)) in panels.iter().zip(SERIES) {
        let ys: Vec<f64> = metrics.iter().map(get).collect();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
        let pad = 0.05 * (hi - lo);
        let mut chart = ChartBuilder::on(panel)
            .caption(name, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(x_min..x_max, (lo - pad)..(hi + pad))
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(metrics.iter().map(|m| (m.step, get(m))), &BLUE))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Markdown table of first, last, minimum and mean value per series.
pub fn summary(metrics: &[StepMetrics]) -> String {
    let mut out = format!("steps: {}\n\n| series | first | last | min | mean |\n|---|---|---|---|---|\n", metrics.len());
    for (name, get) in SERIES {
        let ys: Vec<f64> = metrics.iter().map(get).collect();
        let (Some(first), Some(last)) = (ys.first(), ys.last()) else {
            continue;
        };
        let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        out.push_str(&format!("| {name} | {first:.6e} | {last:.6e} | {min:.6e} | {mean:.6e} |\n"));
    }
    out
}

/// Write the curves and the summary into `out_dir`; returns the summary.
pub fn render(metrics_path: &Path, out_dir: &Path) -> Result<String, CliError> {
    let metrics = read_metrics(metrics_path)?;
    if metrics.is_empty() {
        return Err(CliError::Failed(format!("{} holds no metrics", metrics_path.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| modmae::Error::Io { path: out_dir.into(), source: e })?;
    draw(&metrics, &out_dir.join(CURVES_FILE))?;
    let text = summary(&metrics);
    modmae::corpus::write_atomic(&out_dir.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(text)
}
