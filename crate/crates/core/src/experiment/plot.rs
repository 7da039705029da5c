//! Plot data rows and a dependency-free SVG line chart.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// One point of a figure's data file: `x,y,series`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (64.0, 24.0, 40.0, 56.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with one polyline per series, in first-appearance order.
/// Non-finite points are skipped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[PlotPoint]) -> String {
    let finite: Vec<&PlotPoint> = points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()).collect();
    let mut names: Vec<&str> = Vec::new();
    for p in &finite {
        if !names.contains(&p.series.as_str()) {
            names.push(&p.series);
        }
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &finite {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    y0 -= pad;
    y1 += pad;
    let (l, r, t, b) = MARGIN;
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * (W - l - r);
    let sy = |y: f64| H - b - (y - y0) / (y1 - y0) * (H - t - b);

    let mut s = String::new();
    let _ = writeln!(s, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"##);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(s, r##"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"##, W / 2.0, escape(title));
    let _ = writeln!(s, r##"<g stroke="#ddd">"##);
    for tx in ticks(x0, x1) {
        let _ = writeln!(s, r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}"/>"##, sx(tx), t, H - b);
    }
    for ty in ticks(y0, y1) {
        let _ = writeln!(s, r##"<line x1="{1:.1}" y1="{0:.1}" x2="{2:.1}" y2="{0:.1}"/>"##, sy(ty), l, W - r);
    }
    let _ = writeln!(s, "</g>");
    for tx in ticks(x0, x1) {
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##, sx(tx), H - b + 16.0, tx);
    }
    for ty in ticks(y0, y1) {
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##, l - 6.0, sy(ty) + 4.0, ty);
    }
    let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"##, W - l - r, H - t - b);
    let _ = writeln!(s, r##"<text x="{}" y="{}" text-anchor="middle">{}</text>"##, (l + W - r) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r##"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"##,
        (t + H - b) / 2.0,
        escape(y_label)
    );
    for (k, name) in names.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<&PlotPoint> = finite.iter().copied().filter(|p| p.series == *name).collect();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x));
        let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.y))).collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##, path.join(" "));
        for p in &pts {
            let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"##, sx(p.x), sy(p.y));
        }
        let ly = t + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r##"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/>"##, W - r - 120.0, ly - 4.0, W - r - 100.0);
        let _ = writeln!(s, r##"<text x="{}" y="{ly}">{}</text>"##, W - r - 94.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_polyline_per_series() {
        let pts: Vec<PlotPoint> = (0..4)
            .flat_map(|i| {
                ["meg", "raw_feature"].map(|s| PlotPoint { x: i as f64, y: (i * i) as f64, series: s.into() })
            })
            .chain([PlotPoint { x: 9.0, y: f64::INFINITY, series: "meg".into() }])
            .collect();
        let svg = line_chart_svg("a < b", "x", "y", &pts);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn ticks_cover_the_range() {
        let t = ticks(-10.0, 30.0);
        assert_eq!(t.first(), Some(&-10.0));
        assert_eq!(t.last(), Some(&30.0));
    }
}
