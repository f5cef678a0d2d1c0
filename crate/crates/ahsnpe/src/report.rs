//! CSV tables and minimal SVG plots from run artifacts. Every number is
//! printed with f64's Display (shortest round-trip form), so parsing a CSV
//! back yields the exact values written; emission is a pure function of its
//! inputs and therefore byte-identical across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::diagnostics::{mahalanobis, PosteriorSummary, PpcResult, QUANTILE_LEVELS};
use crate::driver::RoundRecord;
use crate::error::{Error, Result};

/// Everything a report can draw on. Only `history` is required.
#[derive(Clone, Copy, Default)]
pub struct ReportInputs<'a> {
    pub history: &'a [RoundRecord],
    /// Posterior samples for the group mean, one row per draw.
    pub group_samples: Option<&'a DMatrix<f64>>,
    /// Per-observation posterior summaries, in observation order.
    pub local_summaries: &'a [PosteriorSummary],
    /// Per-observation posterior predictive checks, in observation order.
    pub ppc: &'a [PpcResult],
    /// Reference sample cloud (for example an MCMC posterior); when given,
    /// the convergence table adds each round's Mahalanobis distance to it.
    pub reference_samples: Option<&'a DMatrix<f64>>,
    /// MAP group covariance to tabulate.
    pub sigma_g_map: Option<&'a DMatrix<f64>>,
}

/// Writes CSV tables and SVG plots under `out_dir` and returns the paths
/// written. Wall-clock fields are deliberately excluded so outputs are
/// deterministic.
pub fn emit_reports(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.history.is_empty() {
        return Err(Error::NothingToReport("run history is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    written.push(write_text(out_dir, "convergence.csv", &convergence_csv(inputs)?)?);
    written.push(write_text(out_dir, "convergence.svg", &convergence_svg(inputs.history))?);

    if let Some(samples) = inputs.group_samples {
        written.push(write_text(
            out_dir,
            "group_posterior_samples.csv",
            &matrix_csv(samples, "theta"),
        )?);
        for j in 0..samples.ncols() {
            let values: Vec<f64> = samples.column(j).iter().copied().collect();
            let svg = density_svg(&format!("group posterior, coordinate {j}"), &values);
            written.push(write_text(out_dir, &format!("group_density_{j}.svg"), &svg)?);
        }
    }

    if !inputs.local_summaries.is_empty() {
        written.push(write_text(
            out_dir,
            "local_posterior_means.csv",
            &local_summaries_csv(inputs.local_summaries),
        )?);
    }

    if !inputs.ppc.is_empty() {
        written.push(write_text(out_dir, "ppc.csv", &ppc_csv(inputs.ppc))?);
    }

    if let Some(m) = inputs.sigma_g_map {
        written.push(write_text(out_dir, "sigma_g_map.csv", &matrix_csv(m, "col"))?);
    }

    Ok(written)
}

fn write_text(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Shortest representation that parses back to the same f64.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn csv_line(cells: &[String]) -> String {
    let mut line = cells.join(",");
    line.push('\n');
    line
}

fn convergence_csv(inputs: &ReportInputs) -> Result<String> {
    let d = inputs.history[0].theta_g.len();
    let mut header: Vec<String> = vec!["round".into(), "rel_change".into(), "dataset_size".into()];
    header.extend((0..d).map(|j| format!("theta_g_{j}")));
    if inputs.reference_samples.is_some() {
        header.push("mahalanobis_ref".into());
    }
    let mut out = csv_line(&header);
    for r in inputs.history {
        let mut cells = vec![
            r.round.to_string(),
            fmt_opt(r.rel_change),
            r.dataset_size.to_string(),
        ];
        cells.extend(r.theta_g.iter().map(|&v| fmt(v)));
        if let Some(reference) = inputs.reference_samples {
            cells.push(fmt(mahalanobis(&r.theta_g, reference)?));
        }
        out.push_str(&csv_line(&cells));
    }
    Ok(out)
}

fn matrix_csv(m: &DMatrix<f64>, col_prefix: &str) -> String {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{col_prefix}_{j}")).collect();
    let mut out = csv_line(&header);
    for i in 0..m.nrows() {
        let cells: Vec<String> = (0..m.ncols()).map(|j| fmt(m[(i, j)])).collect();
        out.push_str(&csv_line(&cells));
    }
    out
}

fn quantile_label(level: f64) -> String {
    format!("q{}", level * 100.0)
}

fn local_summaries_csv(summaries: &[PosteriorSummary]) -> String {
    let d = summaries.first().map_or(0, |s| s.mean.len());
    let mut header: Vec<String> = vec!["observation".into(), "n_samples".into()];
    for j in 0..d {
        header.push(format!("mean_{j}"));
        for level in QUANTILE_LEVELS {
            header.push(format!("{}_{j}", quantile_label(level)));
        }
    }
    let mut out = csv_line(&header);
    for (i, s) in summaries.iter().enumerate() {
        let mut cells = vec![i.to_string(), s.n_samples.to_string()];
        for j in 0..d {
            cells.push(fmt(s.mean[j]));
            for k in 0..QUANTILE_LEVELS.len() {
                cells.push(fmt(s.quantiles[j][k]));
            }
        }
        out.push_str(&csv_line(&cells));
    }
    out
}

fn ppc_csv(ppc: &[PpcResult]) -> String {
    let header = [
        "observation",
        "stat_index",
        "observed",
        "predictive_mean",
        "predictive_sd",
        "z",
    ];
    let mut out = csv_line(&header.map(String::from));
    for (i, r) in ppc.iter().enumerate() {
        for j in 0..r.observed.len() {
            let cells = vec![
                i.to_string(),
                j.to_string(),
                fmt(r.observed[j]),
                fmt(r.predictive_mean[j]),
                fmt_opt(r.predictive_sd.as_ref().map(|v| v[j])),
                fmt_opt(r.z_scores.as_ref().map(|v| v[j])),
            ];
            out.push_str(&csv_line(&cells));
        }
    }
    out
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data points into the plot rectangle and renders a polyline with
/// labeled extent. Degenerate ranges (single point, constant series) get a
/// unit-wide window around the value.
fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if points.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y_min) / (y_max - y_min) * (SVG_H - 2.0 * MARGIN);

    let mut path = String::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        let _ = write!(path, "{}{:.2},{:.2}", if i == 0 { "" } else { " " }, sx(x), sy(y));
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="monospace" font-size="14" text-anchor="middle">{}</text>"#,
        SVG_W / 2.0,
        xml_escape(title)
    );
    // Axes.
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN
    );
    for (x, y, anchor, label) in [
        (MARGIN, SVG_H - MARGIN + 16.0, "middle", fmt(x_min)),
        (SVG_W - MARGIN, SVG_H - MARGIN + 16.0, "middle", fmt(x_max)),
        (MARGIN - 6.0, SVG_H - MARGIN, "end", fmt(y_min)),
        (MARGIN - 6.0, MARGIN, "end", fmt(y_max)),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="monospace" font-size="11" text-anchor="{anchor}">{}</text>"#,
            xml_escape(&label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="12" text-anchor="middle">{}</text>"#,
        SVG_W / 2.0,
        SVG_H - 18.0,
        xml_escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" font-family="monospace" font-size="12" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0,
        xml_escape(ylabel)
    );
    if !path.is_empty() {
        let _ = writeln!(s, r#"<polyline points="{path}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#);
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// Relative change per round; rounds without a change (the first) are
/// skipped rather than plotted as zero.
fn convergence_svg(history: &[RoundRecord]) -> String {
    let points: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|r| r.rel_change.map(|c| (r.round as f64, c)))
        .collect();
    line_plot_svg("relative change of theta_g by round", "round", "mean relative change", &points)
}

/// Histogram density (40 bins) rendered as a polyline through bin centers.
fn density_svg(title: &str, values: &[f64]) -> String {
    const BINS: usize = 40;
    if values.is_empty() {
        return line_plot_svg(title, "value", "density", &[]);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return line_plot_svg(title, "value", "density", &[(min, 1.0)]);
    }
    let width = (max - min) / BINS as f64;
    let mut counts = [0usize; BINS];
    for &v in values {
        let b = (((v - min) / width) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    let norm = values.len() as f64 * width;
    let points: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| (min + (b as f64 + 0.5) * width, c as f64 / norm))
        .collect();
    line_plot_svg(title, "value", "density", &points)
}
