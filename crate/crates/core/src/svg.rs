//! Minimal static SVG charts over the diagnostic tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::diagnostics::{ComparisonTable, SeriesRow};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame { x: (f64::INFINITY, f64::NEG_INFINITY), y: (f64::INFINITY, f64::NEG_INFINITY) };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x = (f.x.0.min(x), f.x.1.max(x));
            f.y = (f.y.0.min(y), f.y.1.max(y));
        }
        for r in [&mut f.x, &mut f.y] {
            if !r.0.is_finite() {
                *r = (0.0, 1.0);
            }
            if r.1 - r.0 < 1e-12 {
                *r = (r.0 - 0.5, r.1 + 0.5);
            }
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>
<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>
"#,
        W / 2.0,
        escape(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, v: f64| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{v:.3}</text>"#
        );
    };
    label(&mut s, PAD, H - PAD + 14.0, "start", f.x.0);
    label(&mut s, W - PAD, H - PAD + 14.0, "end", f.x.1);
    label(&mut s, PAD - 4.0, H - PAD, "end", f.y.0);
    label(&mut s, PAD - 4.0, PAD + 10.0, "end", f.y.1);
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per `(run, series)` over epochs.
pub fn trajectories(title: &str, rows: &[SeriesRow]) -> String {
    let mut lines: BTreeMap<(usize, &str), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        lines.entry((r.run, &r.series)).or_default().push((r.epoch as f64, r.value));
    }
    let frame = Frame::fit(lines.values().flatten().copied());
    let mut s = open(title, &frame);
    let names: Vec<&str> = {
        let mut n: Vec<&str> = lines.keys().map(|(_, n)| *n).collect();
        n.sort_unstable();
        n.dedup();
        n
    };
    for ((_, name), pts) in &lines {
        let color = COLORS[names.iter().position(|n| n == name).unwrap_or(0) % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            path.join(" ")
        );
    }
    for (i, name) in names.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" fill="{}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 12.0 * (i as f64 + 1.0),
            COLORS[i % COLORS.len()],
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Expert (x) against model (y) with the identity line.
pub fn comparison(title: &str, table: &ComparisonTable) -> String {
    let pts: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.expert, r.model)).collect();
    let frame = Frame::fit(pts.iter().flat_map(|&(x, y)| [(x, y), (y, x)]));
    let mut s = open(title, &frame);
    let lo = frame.x.0.max(frame.y.0);
    let hi = frame.x.1.min(frame.y.1);
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4"/>"#,
        frame.px(lo),
        frame.py(lo),
        frame.px(hi),
        frame.py(hi)
    );
    for (x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
            frame.px(*x),
            frame.py(*y),
            COLORS[0]
        );
    }
    s.push_str("</svg>\n");
    s
}
