use std::fmt::Write as _;
use std::path::Path;

use super::config::{ExperimentConfig, Metric, Series};
use super::run::{ExperimentRun, ResultRow};
use crate::error::Result;

pub const RESULTS_HEADER: [&str; 6] = ["estimator", "noise", "samples", "metric", "seconds", "seed"];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// `estimator,noise,samples,metric,seconds,seed`, one line per row. Floats use
/// the shortest representation that reads back to the same value.
pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.series.method.name().to_string(),
            r.series.noise_name().to_string(),
            r.samples.to_string(),
            r.metric.to_string(),
            r.seconds.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Every metric for every row.
pub fn write_metrics_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["estimator", "noise", "samples"];
    header.extend(Metric::ALL.map(Metric::name));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.series.method.name().to_string(),
            r.series.noise_name().to_string(),
            r.samples.to_string(),
        ];
        rec.extend(r.all_metrics.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Measured wall-clock times: setup stages, then one line per row.
pub fn write_timings_csv(run: &ExperimentRun, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "noise", "samples", "seconds"])?;
    for (stage, secs) in &run.stages {
        w.write_record([stage.as_str(), "", "", &secs.to_string()])?;
    }
    for r in &run.rows {
        w.write_record([
            r.series.method.name(),
            r.series.noise_name(),
            &r.samples.to_string(),
            &r.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Log-log error against samples per case, one polyline per series.
/// Deterministic series are drawn flat across the sample range.
pub fn accuracy_svg(rows: &[ResultRow], metric: Metric) -> String {
    let (width, height) = (720.0, 460.0);
    let (left, right, top, bottom) = (80.0, 190.0, 30.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        if !series.contains(&r.series) {
            series.push(r.series);
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.samples as f64).log10()).collect();
    let ys: Vec<f64> = rows.iter().filter(|r| r.metric > 0.0).map(|r| r.metric.log10()).collect();
    let bounds = |v: &[f64], pad: bool| -> (f64, f64) {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let (lo, hi) = if pad { (lo.floor(), hi.ceil()) } else { (lo, hi) };
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = bounds(&xs, false);
    let (y0, y1) = bounds(&ys, true);
    let px = |lx: f64| left + (lx - x0) / (x1 - x0) * plot_w;
    let py = |ly: f64| top + (y1 - ly) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#000"/>"##
    );
    for d in (y0 as i64)..=(y1 as i64) {
        let y = py(d as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    let mut seen = Vec::new();
    for r in rows {
        if !seen.contains(&r.samples) {
            seen.push(r.samples);
            let x = px((r.samples as f64).log10());
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                top + plot_h,
                top + plot_h + 18.0,
                r.samples
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">samples per case</text>"#,
        left + plot_w / 2.0,
        height - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        metric.name()
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.series == *ser && r.metric > 0.0)
            .map(|r| (px((r.samples as f64).log10()), py(r.metric.log10())))
            .collect();
        if ser.noise.is_none() && pts.len() == 1 {
            pts = vec![(px(x0), pts[0].1), (px(x1), pts[0].1)];
        }
        let dash = if ser.noise.is_none() { r#" stroke-dasharray="6 4""# } else { "" };
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            ser.label()
        );
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + plot_w + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 25.0,
            lx + 32.0,
            ly + 4.0,
            ser.label()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes results.csv, metrics.csv, timings.csv and accuracy.svg into the
/// configured output directory.
pub fn emit_outputs(run: &ExperimentRun, config: &ExperimentConfig) -> Result<()> {
    let out = &config.out;
    std::fs::create_dir_all(out)?;
    write_results_csv(&run.rows, &out.join("results.csv"))?;
    write_metrics_csv(&run.rows, &out.join("metrics.csv"))?;
    write_timings_csv(run, &out.join("timings.csv"))?;
    std::fs::write(out.join("accuracy.svg"), accuracy_svg(&run.rows, config.metric))?;
    Ok(())
}
