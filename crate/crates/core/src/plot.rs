//! Minimal static SVG charts for reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(
    out: &mut String,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    x_label: &str,
    y_label: &str,
    x_ticks: bool,
) {
    let (px0, px1, py0, py1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = write!(
        out,
        r#"<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>"#
    );
    let _ = write!(
        out,
        r#"<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let y = py0 + (py1 - py0) * f;
        let _ = write!(
            out,
            r##"<line x1="{px0}" y1="{y:.1}" x2="{px1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"##,
            px0 - 4.0,
            y + 4.0,
            y0 + (y1 - y0) * f
        );
        if x_ticks {
            let x = px0 + (px1 - px0) * f;
            let _ = write!(
                out,
                r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                py0 + 14.0,
                trim_number(x0 + (x1 - x0) * f)
            );
        }
    }
    let _ = write!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (px0 + px1) / 2.0,
        H - 8.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0,
        escape(y_label)
    );
}

fn trim_number(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Polyline chart; each series gets a legend entry labelled with `label`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| LEFT + (W - RIGHT - LEFT) * (x - xs.0) / (xs.1 - xs.0);
    let sy = |y: f64| H - BOTTOM - (H - BOTTOM - TOP) * (y - ys.0) / (ys.1 - ys.0);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, xs, ys, x_label, y_label, true);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let lx = W - RIGHT + 12.0;
        let _ = write!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}" class="series">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars starting from zero.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let (lo, hi) = extent(bars.iter().map(|b| b.1).chain([0.0]));
    let sy = |y: f64| H - BOTTOM - (H - BOTTOM - TOP) * (y - lo) / (hi - lo);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, (0.0, 1.0), (lo, hi), "", y_label, false);
    let slot = (W - RIGHT - LEFT) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let (a, b) = (sy(0.0), sy(*v));
        let _ = write!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            a.min(b),
            slot * 0.7,
            (a - b).abs(),
            PALETTE[i % PALETTE.len()],
            x + slot * 0.35,
            H - BOTTOM + 14.0,
            escape(label),
            x + slot * 0.35,
            a.min(b) - 3.0,
        );
    }
    out.push_str("</svg>\n");
    out
}
