//! Metrics curves as SVG and CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

/// One metrics file: parsed records plus how many lines were unusable.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub records: Vec<serde_json::Map<String, Value>>,
    pub malformed: usize,
}

impl Series {
    pub fn parse(label: impl Into<String>, text: &str) -> Self {
        let mut records = Vec::new();
        let mut malformed = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(m)) if m.get("step").and_then(Value::as_f64).is_some() => records.push(m),
                _ => malformed += 1,
            }
        }
        Series {
            label: label.into(),
            records,
            malformed,
        }
    }

    pub fn points(&self, field: &str) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| Some((r.get("step")?.as_f64()?, r.get(field)?.as_f64()?)))
            .collect()
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{:.0}", v)
    } else if v.abs() >= 10.0 {
        format!("{:.1}", v)
    } else {
        format!("{:.3}", v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of labeled `(x, y)` series. Empty input still yields axes.
pub fn line_chart(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/></g>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            bottom + 16.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, (label, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(label),
            path.join(" ")
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<text class="legend" x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            right,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub const LOSS_FIELDS: [&str; 5] = ["total", "reward", "policy", "value", "consistency"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotSummary {
    pub rows: usize,
    pub malformed: usize,
    pub files: Vec<String>,
}

/// Writes `returns.svg`, `losses.svg` and `metrics.csv` into `out`.
pub fn plot(series: &[Series], out: &Path) -> std::io::Result<PlotSummary> {
    std::fs::create_dir_all(out)?;
    let returns: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|s| (s.label.clone(), s.points("mean")))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    std::fs::write(out.join("returns.svg"), line_chart("Evaluation return", "mean return", &returns))?;
    let mut losses = Vec::new();
    for s in series {
        for f in LOSS_FIELDS {
            let p = s.points(f);
            if !p.is_empty() {
                let label = if series.len() > 1 { format!("{} {f}", s.label) } else { f.to_string() };
                losses.push((label, p));
            }
        }
    }
    std::fs::write(out.join("losses.svg"), line_chart("Loss components", "loss", &losses))?;

    let mut columns: Vec<String> = Vec::new();
    for s in series {
        for r in &s.records {
            for (k, v) in r {
                if v.is_number() && !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    let mut header = vec!["series".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    let mut rows = 0;
    for s in series {
        for r in &s.records {
            let mut row = vec![s.label.clone()];
            row.extend(columns.iter().map(|c| r.get(c).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(PlotSummary {
        rows,
        malformed: series.iter().map(|s| s.malformed).sum(),
        files: vec!["returns.svg".into(), "losses.svg".into(), "metrics.csv".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metrics_give_valid_svg_with_axes() {
        let svg = line_chart("t", "y", &[]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"class="axes""#));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn overlaid_runs_are_labeled() {
        let a = Series::parse("run-a", "{\"step\":0,\"mean\":0.1}\n{\"step\":5,\"mean\":0.5}\n");
        let b = Series::parse("run-b", "{\"step\":0,\"mean\":-0.2}\n");
        let dir = tempfile::tempdir().unwrap();
        plot(&[a, b], dir.path()).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("returns.svg")).unwrap();
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert!(svg.contains(r#"data-label="run-a""#) && svg.contains(r#"data-label="run-b""#));
    }

    #[test]
    fn csv_rows_skip_malformed_lines() {
        let text = "{\"step\":0,\"total\":1.0}\nnot json\n{\"step\":1,\"total\":0.5}\n{\"nostep\":1}\n";
        let s = Series::parse("r", text);
        assert_eq!(s.malformed, 2);
        let dir = tempfile::tempdir().unwrap();
        let summary = plot(&[s], dir.path()).unwrap();
        assert_eq!(summary.rows, 2);
        assert_eq!(summary.malformed, 2);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
