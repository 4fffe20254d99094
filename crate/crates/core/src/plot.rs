//! Static SVG plots: score curves from metrics and position traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::metrics::{MetricsRow, RowKind};
use crate::run::TraceRow;

const W: f64 = 720.0;
const H: f64 = 440.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for (x, y) in points {
            f.x0 = f.x0.min(*x);
            f.x1 = f.x1.max(*x);
            f.y0 = f.y0.min(*y);
            f.y1 = f.y1.max(*y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(fx), b + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, f.py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, H / 2.0, H / 2.0, escape(ylabel));
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 {
        format!("{:.0}k", v / 1e3)
    } else if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(s: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64) {
    if pts.is_empty() {
        return;
    }
    let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", f.px(*x), f.py(*y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#, d.join(" "));
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = W - MARGIN - 150.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="3" fill="{}"/>"#, y - 4.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(n));
    }
}

/// Trailing moving average over `window` points.
pub fn smooth(ys: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut sum = 0.0;
    ys.iter()
        .enumerate()
        .map(|(i, y)| {
            sum += y;
            if i >= w {
                sum -= ys[i - w];
            }
            sum / (i + 1).min(w) as f64
        })
        .collect()
}

/// Episode score against per-worker env steps, one curve per policy: raw
/// episodes faint, a moving average on top.
pub fn score_curves(rows: &[MetricsRow], title: &str, window: usize) -> String {
    let mut by_policy: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.kind == RowKind::Episode) {
        if let Some(y) = r.episode_return {
            by_policy.entry(&r.policy).or_default().push((r.env_steps as f64, y));
        }
    }
    for pts in by_policy.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let f = Frame::fit(by_policy.values().flatten());
    let mut s = header(title, "env steps per worker", "episode score", &f);
    for (i, pts) in by_policy.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut s, &f, pts, color, 1.0, 0.25);
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let sm: Vec<(f64, f64)> = pts.iter().map(|p| p.0).zip(smooth(&ys, window)).collect();
        polyline(&mut s, &f, &sm, color, 2.0, 1.0);
    }
    let names: Vec<&str> = by_policy.keys().copied().collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Paths of every entity in one episode of a trace, with start and end marks.
pub fn trace_paths(rows: &[TraceRow], episode: u64, title: &str) -> String {
    let mut paths: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.episode == episode) {
        paths.entry(r.entity).or_default().push((r.pos_x, r.pos_y));
    }
    let mut f = Frame::fit(paths.values().flatten());
    // equal aspect keeps geometry honest
    let span = (f.x1 - f.x0).max(f.y1 - f.y0);
    f.x1 = f.x0 + span;
    f.y1 = f.y0 + span;
    let mut s = header(title, "x", "y", &f);
    for (i, pts) in paths.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut s, &f, pts, color, 1.5, 0.9);
        if let (Some(a), Some(b)) = (pts.first(), pts.last()) {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="none" stroke="{color}"/>"#, f.px(a.0), f.py(a.1));
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#, f.px(b.0), f.py(b.1));
        }
    }
    let names: Vec<String> = paths.keys().map(|e| format!("entity {e}")).collect();
    legend(&mut s, &names.iter().map(String::as_str).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let rows: Vec<TraceRow> = (0..5)
            .map(|t| TraceRow { episode: 0, t, entity: 0, pos_x: t as f64 * 0.1, pos_y: 0.0, reward: 0.0 })
            .collect();
        let s = trace_paths(&rows, 0, "a <b>");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt;b&gt;"));
        assert_eq!(s.matches("<polyline").count(), 1);
        let empty = score_curves(&[], "none", 10);
        assert!(empty.contains("</svg>"));
    }
}
