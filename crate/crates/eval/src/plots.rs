//! SVG figures and CSV tables.
//!
//! `reports.csv` has one row per evaluated run:
//! `label,seed,mode,e_ate_m,matched,unmatched`. `errors.csv` has one row per
//! associated keyframe: `label,timestamp_s,error_m`. `grid.csv` has
//! `sequence,run,e_ate_m` with an empty value for failed runs. Empty fields
//! mean "not available".

use crate::aggregate::Summary;
use crate::report::EvalReport;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const REPORTS_CSV: &str = "reports.csv";
pub const ERRORS_CSV: &str = "errors.csv";
pub const GRID_CSV: &str = "grid.csv";
pub const GRID_SVG: &str = "grid.svg";

fn csv_err(path: &Path, e: csv::Error) -> std::io::Error {
    std::io::Error::other(format!("{}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

/// Keeps file names portable.
fn sanitize(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "run".to_string()
    } else {
        s
    }
}

/// Top-down (x, y) overlay of the aligned estimate and the reference.
pub fn trajectory_svg(report: &EvalReport) -> String {
    let pts: Vec<_> = report
        .errors
        .iter()
        .flat_map(|k| [(k.estimate.x, k.estimate.y), (k.reference.x, k.reference.y)])
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let size = 480.0;
    let margin = 20.0;
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let k = (size - 2.0 * margin) / span;
    let map = |x: f64, y: f64| (margin + (x - x0) * k, size - margin - (y - y0) * k);
    let polyline = |sel: &dyn Fn(&crate::report::KeyframeError) -> (f64, f64)| {
        report
            .errors
            .iter()
            .map(|e| {
                let (x, y) = sel(e);
                let (u, v) = map(x, y);
                format!("{u:.2},{v:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#,
        polyline(&|e| (e.reference.x, e.reference.y))
    );
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="crimson" stroke-width="1.5" points="{}"/>"#,
        polyline(&|e| (e.estimate.x, e.estimate.y))
    );
    let _ = writeln!(
        s,
        r#"<text x="{margin}" y="14" font-family="sans-serif" font-size="12">{} e_ate = {:.4} m</text>"#,
        xml_escape(&report.metadata.label),
        report.e_ate
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Green for small, red for large errors on a log scale between the smallest
/// and largest successful value. Failed runs are white.
fn grid_color(v: Option<f64>, lo: f64, hi: f64) -> String {
    let Some(v) = v else {
        return "#ffffff".to_string();
    };
    let t = if hi > lo && lo > 0.0 && v > 0.0 {
        ((v.ln() - lo.ln()) / (hi.ln() - lo.ln())).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = (40.0 + 200.0 * t).round() as u8;
    let g = (200.0 - 160.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}40")
}

pub fn grid_svg(summary: &Summary) -> String {
    let cell = 28.0;
    let label_w = 160.0;
    let cols = summary.sequences.iter().map(|s| s.runs.len()).max().unwrap_or(0);
    let values: Vec<f64> = summary
        .sequences
        .iter()
        .flat_map(|s| s.runs.iter().flatten().copied())
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = label_w + cell * cols as f64 + 10.0;
    let h = cell * summary.sequences.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#
    );
    for (i, seq) in summary.sequences.iter().enumerate() {
        let y = 5.0 + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            y + cell * 0.65,
            xml_escape(&seq.sequence)
        );
        for j in 0..cols {
            let v = seq.runs.get(j).copied().flatten();
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{}" stroke="gray"/>"#,
                label_w + cell * j as f64,
                grid_color(v, lo, hi)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the CSV tables, one trajectory overlay per report and, if a
/// summary is given, the run grid. Returns the files written.
pub fn emit_plots(reports: &[EvalReport], summary: Option<&Summary>, out_dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.metadata.label.clone(),
                opt(&r.metadata.seed),
                opt(&r.metadata.mode),
                r.e_ate.to_string(),
                r.errors.len().to_string(),
                r.unmatched.to_string(),
            ]
        })
        .collect();
    let path = out_dir.join(REPORTS_CSV);
    write_csv(
        &path,
        &["label", "seed", "mode", "e_ate_m", "matched", "unmatched"],
        &rows,
    )?;
    written.push(path);

    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|r| {
            r.errors
                .iter()
                .map(|e| vec![r.metadata.label.clone(), e.timestamp.to_string(), e.error.to_string()])
        })
        .collect();
    let path = out_dir.join(ERRORS_CSV);
    write_csv(&path, &["label", "timestamp_s", "error_m"], &rows)?;
    written.push(path);

    for (i, r) in reports.iter().enumerate() {
        let path = out_dir.join(format!("trajectory_{i:02}_{}.svg", sanitize(&r.metadata.label)));
        std::fs::write(&path, trajectory_svg(r))?;
        written.push(path);
    }

    if let Some(summary) = summary {
        let rows: Vec<Vec<String>> = summary
            .sequences
            .iter()
            .flat_map(|s| {
                s.runs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| vec![s.sequence.clone(), j.to_string(), opt(v)])
            })
            .collect();
        let path = out_dir.join(GRID_CSV);
        write_csv(&path, &["sequence", "run", "e_ate_m"], &rows)?;
        written.push(path);
        let path = out_dir.join(GRID_SVG);
        std::fs::write(&path, grid_svg(summary))?;
        written.push(path);
    }
    Ok(written)
}
