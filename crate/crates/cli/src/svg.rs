// SPDX-License-Identifier: Apache-2.0

//! Minimal SVG line and bar charts. Output is deterministic text.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD_L: f64 = 56.0;
const PAD_R: f64 = 140.0;
const PAD_T: f64 = 32.0;
const PAD_B: f64 = 36.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn colour(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
        Frame { x0, x1, y0, y1 }
    }
    fn px(&self, x: f64) -> f64 {
        PAD_L + (x - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)
    }
    fn py(&self, y: f64) -> f64 {
        H - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)
    }
}

fn header(out: &mut String, title: &str, f: &Frame) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" font-size="13">{}</text>"#, PAD_L, esc(title));
    let (l, r, t, b) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    let _ = writeln!(out, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#);
    for (v, y) in [(f.y0, b), (f.y1, t)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 4.0, y + 4.0, fmt_num(v));
    }
    for (v, x) in [(f.x0, l), (f.x1, r)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, b + 14.0, fmt_num(v));
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD_T + 14.0 * i as f64;
        let x = W - PAD_R + 10.0;
        let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y, colour(i));
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 14.0, y + 9.0, esc(n));
    }
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

/// One polyline per series of `(x, y)` points.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let f = if x0.is_finite() { Frame::new(x0, x1, y0.min(0.0), y1) } else { Frame::new(0.0, 1.0, 0.0, 1.0) };
    let mut out = String::new();
    header(&mut out, title, &f);
    for (i, (_, pts)) in series.iter().enumerate() {
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().filter(|p| p.1.is_finite()).enumerate() {
            let _ = write!(d, "{}{:.1} {:.1}", if j == 0 { "M" } else { "L" }, f.px(x), f.py(y));
        }
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, colour(i));
        }
    }
    legend(&mut out, &series.iter().map(|s| s.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars, one group per category, with an optional dashed horizontal line.
pub fn bar_chart(title: &str, categories: &[String], series: &[(String, Vec<f64>)], hline: Option<f64>) -> String {
    let (_, top) = bounds(series.iter().flat_map(|s| s.1.iter().copied()).chain(hline));
    let f = Frame::new(0.0, categories.len().max(1) as f64, 0.0, if top.is_finite() { top } else { 1.0 });
    let mut out = String::new();
    header(&mut out, title, &f);
    let group = (f.px(1.0) - f.px(0.0)) * 0.8;
    let bar = group / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let gx = f.px(c as f64) + (f.px(1.0) - f.px(0.0)) * 0.1;
        for (i, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(0.0);
            let (y, base) = (f.py(v), f.py(0.0));
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bar * i as f64,
                y,
                bar,
                (base - y).max(0.0),
                colour(i)
            );
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + group / 2.0, H - PAD_B + 26.0, esc(name));
    }
    if let Some(h) = hline {
        let y = f.py(h);
        let _ = writeln!(out, r#"<path d="M{PAD_L} {y:.1}H{}" stroke="black" stroke-dasharray="4 3"/>"#, W - PAD_R);
    }
    legend(&mut out, &series.iter().map(|s| s.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
