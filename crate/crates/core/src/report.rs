//! Per-epoch curve images: one SVG per metric, strategies overlaid, the
//! epoch-0 (pretrained) value drawn as a dashed horizontal reference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapt::{AggregateRow, ExperimentResult};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dsc,
    LesionF1,
    Vc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dsc, Metric::LesionF1, Metric::Vc];

    pub fn file_stem(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::LesionF1 => "lesion_f1",
            Metric::Vc => "vc",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Dsc => "Mean DSC",
            Metric::LesionF1 => "Mean lesion-wise F1",
            Metric::Vc => "Volume correlation",
        }
    }

    pub fn value(self, a: &AggregateRow) -> Option<f64> {
        match self {
            Metric::Dsc => Some(a.mean_dsc),
            Metric::LesionF1 => Some(a.mean_f1),
            Metric::Vc => a.vc,
        }
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#17becf", "#8c564b"];
const BASELINE: &str = "#7b3294";
const W: f64 = 720.0;
const H: f64 = 440.0;
const L: f64 = 64.0;
const R: f64 = 190.0;
const T: f64 = 40.0;
const B: f64 = 52.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// "Nice" tick step for a span.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Renders one metric's curves as an SVG document.
pub fn render_svg(metric: Metric, results: &[ExperimentResult]) -> String {
    let curves: Vec<(&str, Vec<(f64, f64)>)> = results
        .iter()
        .map(|r| {
            let pts = r
                .aggregate
                .iter()
                .filter(|a| a.epoch >= 1)
                .filter_map(|a| metric.value(a).map(|v| (a.epoch as f64, v)))
                .collect();
            (r.label.as_str(), pts)
        })
        .collect();
    let baseline = results.iter().find_map(|r| r.at_epoch(0)).and_then(|a| metric.value(a));

    let max_epoch = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).fold(1.0, f64::max);
    let ys = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).chain(baseline);
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(0.01);
    (lo, hi) = (lo - pad, hi + pad);
    let step = tick_step(hi - lo);
    lo = (lo / step).floor() * step;
    hi = (hi / step).ceil() * step;

    let px = |e: f64| L + (e - 1.0) / (max_epoch - 1.0).max(1.0) * (W - L - R);
    let py = |v: f64| H - B - (v - lo) / (hi - lo) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, metric.title());
    // axes and grid
    let _ = writeln!(s, r##"<g stroke="#ccc" stroke-width="1">"##);
    let mut y = lo;
    while y <= hi + step * 1e-6 {
        let _ = writeln!(s, r#"<line x1="{L}" x2="{}" y1="{1:.1}" y2="{1:.1}"/>"#, W - R, py(y));
        y += step;
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g stroke="black" fill="none"><rect x="{L}" y="{T}" width="{}" height="{}"/></g>"#, W - L - R, H - T - B);
    let mut y = lo;
    while y <= hi + step * 1e-6 {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#, L - 6.0, py(y) + 4.0, y);
        y += step;
    }
    let xstep = tick_step(max_epoch - 1.0).max(1.0).round();
    let mut e = 1.0;
    while e <= max_epoch + 1e-9 {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{e}</text>"#, px(e), H - B + 16.0);
        e += xstep;
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, (L + W - R) / 2.0, H - 12.0);

    if let Some(b) = baseline {
        let _ = writeln!(
            s,
            r#"<line x1="{L}" x2="{}" y1="{1:.1}" y2="{1:.1}" stroke="{BASELINE}" stroke-width="2" stroke-dasharray="7,5"/>"#,
            W - R,
            py(b)
        );
    }
    for (i, (_, pts)) in curves.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(e, v)| format!("{:.1},{:.1}", px(e), py(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(e, v) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, px(e), py(v));
        }
    }
    // legend
    let lx = W - R + 14.0;
    let mut ly = T + 10.0;
    for (i, (label, _)) in curves.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 22.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 28.0, ly + 4.0, esc(label));
        ly += 20.0;
    }
    if baseline.is_some() {
        let _ = writeln!(s, r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{BASELINE}" stroke-width="2" stroke-dasharray="7,5"/>"#, lx + 22.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">pretrained</text>"#, lx + 28.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<dir>/{dsc,lesion_f1,vc}.svg`.
pub fn write_curves(dir: &Path, results: &[ExperimentResult]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Metric::ALL
        .iter()
        .map(|&m| {
            let path = dir.join(format!("{}.svg", m.file_stem()));
            std::fs::write(&path, render_svg(m, results)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
