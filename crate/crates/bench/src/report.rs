//! CSV and SVG rendering of a [`CostReport`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use linattn_core::{Error, Result};

use crate::{CostReport, CostRow, Mechanism};

pub const CSV_HEADER: &str = "mechanism,N,dk,dv,analytic_ops,analytic_bytes,measured_ns,measured_peak_bytes";

fn measured_fields(row: &CostRow) -> (String, String) {
    let m = row.measured.as_ref();
    let ns = m.and_then(|m| m.median_ns()).map(|v| v.to_string());
    let peak = m.and_then(|m| m.peak_bytes()).map(|v| v.to_string());
    (ns.unwrap_or_default(), peak.unwrap_or_default())
}

/// Notes become `#` lines above the header; skipped measurements leave the
/// measured fields blank.
pub fn to_csv(report: &CostReport) -> String {
    let mut out = String::new();
    for note in &report.notes {
        for line in note.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let (ns, peak) = measured_fields(row);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.mechanism, row.dims.n, row.dims.dk, row.dims.dv, row.analytic_ops, row.analytic_bytes, ns, peak
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn color(m: Mechanism) -> &'static str {
    match m {
        Mechanism::Dot => "#c0504d",
        Mechanism::Kernel => "#4f81bd",
    }
}

/// Grouped bar chart of analytic ops and bytes on a log10 axis: one panel per
/// quantity, one group per N, one `<rect class="bar">` per row and panel.
pub fn to_svg(report: &CostReport) -> String {
    let mut ns: Vec<u64> = report.rows.iter().map(|r| r.dims.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let panels: [(&str, fn(&CostRow) -> u64); 2] =
        [("scalar ops", |r| r.analytic_ops), ("peak bytes", |r| r.analytic_bytes)];

    let (panel_w, panel_h, margin) = (420.0, 260.0, 50.0);
    let width = margin + panels.len() as f64 * (panel_w + margin);
    let height = panel_h + 2.0 * margin + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (p, (title, value)) in panels.iter().enumerate() {
        let x0 = margin + p as f64 * (panel_w + margin);
        let y0 = margin;
        let vals: Vec<f64> = report.rows.iter().map(|r| (value(r).max(1)) as f64).collect();
        let hi = vals.iter().fold(1.0f64, |a, &b| a.max(b)).log10().ceil().max(1.0);
        let lo = vals.iter().fold(f64::INFINITY, |a, &b| a.min(b)).log10().floor().min(hi - 1.0).max(0.0);
        let y_of = |v: f64| y0 + panel_h * (1.0 - (v.log10() - lo) / (hi - lo));

        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{} (log scale)</text>"#,
            x0 + panel_w / 2.0,
            y0 - 15.0,
            escape(title)
        );
        for e in lo as i32..=hi as i32 {
            let y = y_of(10f64.powi(e));
            let _ = writeln!(
                s,
                r##"<line x1="{x0}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
                x0 + panel_w,
                x0 - 4.0,
                y + 4.0
            );
        }
        let group_w = panel_w / ns.len().max(1) as f64;
        let bar_w = group_w * 0.8 / Mechanism::ALL.len() as f64;
        for (gi, &n) in ns.iter().enumerate() {
            let gx = x0 + gi as f64 * group_w + group_w * 0.1;
            for (row, &v) in report.rows.iter().zip(&vals).filter(|(r, _)| r.dims.n == n) {
                let slot = Mechanism::ALL.iter().position(|&m| m == row.mechanism).unwrap_or(0);
                let x = gx + slot as f64 * bar_w;
                let y = y_of(v).min(y0 + panel_h);
                let _ = writeln!(
                    s,
                    r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} N={} {}={}</title></rect>"#,
                    bar_w * 0.95,
                    y0 + panel_h - y,
                    color(row.mechanism),
                    row.mechanism,
                    n,
                    escape(title),
                    value(row)
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">N={n}</text>"#,
                gx + group_w * 0.4,
                y0 + panel_h + 15.0
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="black"/>"#,
            y0 + panel_h
        );
        let _ = writeln!(s, "</g>");
    }
    for (i, m) in Mechanism::ALL.iter().enumerate() {
        let x = margin + i as f64 * 110.0;
        let y = height - 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{y}">{m} attention</text>"#,
            y - 10.0,
            color(*m),
            x + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the CSV and, when asked, the SVG chart.
pub fn emit_report(report: &CostReport, csv_path: &Path, svg_path: Option<&Path>) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Contract("cannot emit an empty cost report".into()));
    }
    fs::write(csv_path, to_csv(report))?;
    if let Some(p) = svg_path {
        fs::write(p, to_svg(report))?;
    }
    Ok(())
}
