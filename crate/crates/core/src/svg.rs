//! Minimal self-contained SVG charts: heatmap, line curves, scatter, and
//! per-category intervals. CSV stays the canonical output; these are views.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = write!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = write!(
            body,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        Self { body }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = write!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#,
            esc(s)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = write!(
            self.body,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}"/>"#
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Linear map from data range onto the plot area, with axes and ticks.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, c: &mut Canvas, xlabel: &str, ylabel: &str, x_ticks: bool) {
        c.line(LEFT, H - BOTTOM, W - RIGHT, H - BOTTOM, "black");
        c.line(LEFT, TOP, LEFT, H - BOTTOM, "black");
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let yv = self.y0 + f * (self.y1 - self.y0);
            let y = self.py(yv);
            c.line(LEFT - 4.0, y, LEFT, y, "black");
            c.text(LEFT - 6.0, y + 4.0, "end", &format!("{yv:.2}"));
            if x_ticks {
                let xv = self.x0 + f * (self.x1 - self.x0);
                let x = self.px(xv);
                c.line(x, H - BOTTOM, x, H - BOTTOM + 4.0, "black");
                c.text(x, H - BOTTOM + 16.0, "middle", &format!("{xv:.2}"));
            }
        }
        c.text((LEFT + W - RIGHT) / 2.0, H - 20.0, "middle", xlabel);
        let _ = write!(
            c.body,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            esc(ylabel)
        );
    }
}

fn save(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Square matrix heatmap; rows are `labels[i]` on the y axis. Missing cells are grey.
pub fn heatmap(path: &Path, title: &str, labels: &[String], cells: &[Vec<Option<f64>>]) -> Result<()> {
    let mut c = Canvas::new(title);
    let n = labels.len().max(1) as f64;
    let size = ((H - TOP - BOTTOM).min(W - LEFT - RIGHT)) / n;
    let vals = cells.iter().flatten().filter_map(|v| *v);
    let max_abs = vals.fold(1e-9f64, |m, v| m.max(v.abs()));
    for (i, row) in cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let fill = match v {
                Some(v) => {
                    // diverging: blue positive, red negative
                    let t = (v / max_abs).clamp(-1.0, 1.0);
                    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
                    if t >= 0.0 {
                        format!("rgb({},{},255)", fade(t), fade(t))
                    } else {
                        format!("rgb(255,{},{})", fade(t), fade(t))
                    }
                }
                None => "#bbbbbb".to_string(),
            };
            let (x, y) = (LEFT + j as f64 * size, TOP + i as f64 * size);
            let _ = write!(
                c.body,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{size:.1}" height="{size:.1}" fill="{fill}" stroke="white"/>"#
            );
            if let Some(v) = v {
                c.text(x + size / 2.0, y + size / 2.0 + 4.0, "middle", &format!("{v:.2}"));
            }
        }
    }
    for (k, l) in labels.iter().enumerate() {
        c.text(LEFT - 4.0, TOP + (k as f64 + 0.5) * size + 4.0, "end", l);
        c.text(LEFT + (k as f64 + 0.5) * size, TOP + n * size + 14.0, "middle", l);
    }
    c.text(LEFT + n * size / 2.0, TOP + n * size + 32.0, "middle", "test locale (rows: fine-tuning locale)");
    save(path, c.finish())
}

/// One polyline per series over shared x values.
pub fn curves(path: &Path, title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied());
    let f = Frame::new(pts.clone().map(|p| p.0), pts.map(|p| p.1));
    let mut c = Canvas::new(title);
    f.axes(&mut c, xlabel, ylabel, true);
    for (k, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path_d: Vec<String> = p.iter().map(|(x, y)| format!("{:.1},{:.1}", f.px(*x), f.py(*y))).collect();
        let _ = write!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path_d.join(" ")
        );
        for (x, y) in p {
            let _ = write!(c.body, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, f.px(*x), f.py(*y));
        }
        c.text(W - RIGHT - 4.0, TOP + 14.0 * (k as f64 + 1.0), "end", name);
        c.line(W - RIGHT - 110.0, TOP + 14.0 * (k as f64 + 1.0) - 4.0, W - RIGHT - 95.0, TOP + 14.0 * (k as f64 + 1.0) - 4.0, color);
    }
    save(path, c.finish())
}

/// Labelled points.
pub fn scatter(path: &Path, title: &str, xlabel: &str, ylabel: &str, points: &[(String, f64, f64)]) -> Result<()> {
    let f = Frame::new(points.iter().map(|p| p.1), points.iter().map(|p| p.2));
    let mut c = Canvas::new(title);
    f.axes(&mut c, xlabel, ylabel, true);
    for (label, x, y) in points {
        let _ = write!(c.body, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"/>"#, f.px(*x), f.py(*y), PALETTE[0]);
        c.text(f.px(*x) + 6.0, f.py(*y) - 6.0, "start", label);
    }
    save(path, c.finish())
}

/// Point estimate with an interval bar per category.
pub fn intervals(path: &Path, title: &str, ylabel: &str, rows: &[(String, f64, f64, f64)]) -> Result<()> {
    let f = Frame::new(
        (0..rows.len().max(1)).map(|i| i as f64),
        rows.iter().flat_map(|r| [r.1, r.2, r.3]),
    );
    let f = Frame { x0: -0.5, x1: rows.len().max(1) as f64 - 0.5, ..f };
    let mut c = Canvas::new(title);
    f.axes(&mut c, "locale", ylabel, false);
    for (i, (label, mid, lo, hi)) in rows.iter().enumerate() {
        let x = f.px(i as f64);
        c.line(x, f.py(*lo), x, f.py(*hi), "black");
        c.line(x - 5.0, f.py(*lo), x + 5.0, f.py(*lo), "black");
        c.line(x - 5.0, f.py(*hi), x + 5.0, f.py(*hi), "black");
        let _ = write!(c.body, r#"<circle cx="{x:.1}" cy="{:.1}" r="4" fill="{}"/>"#, f.py(*mid), PALETTE[0]);
        c.text(x, H - BOTTOM + 16.0, "middle", label);
    }
    save(path, c.finish())
}
