//! Minimal SVG line plots: mean accuracy vs. sweep axis with one series
//! per variant and error bars of one standard deviation. Generated purely
//! from metrics rows so figures can be rebuilt from `metrics.csv` alone.

use gib_core::report::{summarize, MetricsRecord};
use std::collections::BTreeSet;
use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 56.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn map_x(v: f64, lo: f64, hi: f64) -> f64 {
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    MARGIN_L + (v - lo) / span * (WIDTH - MARGIN_L - MARGIN_R)
}

fn map_y(acc: f64) -> f64 {
    // accuracy axis fixed to [0, 1]
    HEIGHT - MARGIN_B - acc * (HEIGHT - MARGIN_T - MARGIN_B)
}

/// Render one figure from records (any mix of variants, one axis).
pub fn render_figure(records: &[MetricsRecord], title: &str) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        xml_escape(title)
    );

    if records.is_empty() {
        let _ = writeln!(svg, "</svg>");
        return svg;
    }

    let axis_name = records[0].axis_name.clone();
    let mut axis_values: Vec<f64> = records.iter().map(|r| r.axis_value).collect();
    axis_values.sort_by(|a, b| a.partial_cmp(b).expect("finite axis values"));
    axis_values.dedup();
    let (lo, hi) = (axis_values[0], *axis_values.last().expect("nonempty"));

    // frame
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = map_y(0.0);
    let y1 = map_y(1.0);
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for tick in 0..=10 {
        let acc = tick as f64 / 10.0;
        let y = map_y(acc);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{:.1}</text>"#,
            x0 - 4.0,
            x0 - 8.0,
            y + 3.0,
            acc
        );
        if tick % 2 == 0 && tick > 0 {
            let _ = writeln!(
                svg,
                r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#dddddd" stroke-dasharray="3,3"/>"##
            );
        }
    }
    for &v in &axis_values {
        let x = map_x(v, lo, hi);
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 18.0,
            trim_number(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        xml_escape(&axis_name)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 18 {})">accuracy</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    // one series per variant, insertion-ordered by name
    let variants: BTreeSet<String> = records.iter().map(|r| r.variant.clone()).collect();
    for (vi, variant) in variants.iter().enumerate() {
        let color = PALETTE[vi % PALETTE.len()];
        let rows: Vec<MetricsRecord> = records
            .iter()
            .filter(|r| &r.variant == variant)
            .cloned()
            .collect();
        let summary = summarize(&rows);
        let points: Vec<(f64, f64, f64)> = summary
            .iter()
            .map(|s| (map_x(s.axis_value, lo, hi), map_y(s.mean_accuracy), s.stdev_accuracy))
            .collect();
        let path: Vec<String> = points.iter().map(|(x, y, _)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for ((x, y, stdev), point) in points.iter().zip(&summary) {
            let y_hi = map_y((point.mean_accuracy + stdev).min(1.0));
            let y_lo = map_y((point.mean_accuracy - stdev).max(0.0));
            let _ = writeln!(
                svg,
                r#"<line x1="{x}" y1="{y_lo}" x2="{x}" y2="{y_hi}" stroke="{color}"/><circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#
            );
        }
        let ly = MARGIN_T + 14.0 * vi as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="3" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            x1 - 150.0,
            ly - 2.0,
            x1 - 134.0,
            ly + 3.0,
            xml_escape(variant)
        );
    }
    let _ = writeln!(svg, "</svg>");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn trim_number(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}
