//! Minimal SVG charts for reports: boxplots, ROC curves, per-split bars and
//! score-versus-time bands.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{RocPoint, TimeBin};
use crate::stats::BoxplotStats;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 64.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    y_min: f64,
    y_max: f64,
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.x_min) / (self.x_max - self.x_min).max(1e-12) * (W - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y_min) / (self.y_max - self.y_min).max(1e-12) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(svg: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label),
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn axes(svg: &mut String, f: &Frame, y_ticks: usize) {
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{} H{}" stroke="black" fill="none"/>"#,
        H - BOTTOM,
        W - RIGHT
    );
    for i in 0..=y_ticks {
        let v = f.y_min + (f.y_max - f.y_min) * i as f64 / y_ticks as f64;
        let y = f.y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text><line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#eeeeee"/>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0,
            tick_label(v),
            W - RIGHT
        );
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn x_label_at(svg: &mut String, x: f64, text: &str) {
    let _ = writeln!(
        svg,
        r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
        H - BOTTOM + 16.0,
        escape(text)
    );
}

fn close(mut svg: String) -> String {
    svg.push_str("</svg>\n");
    svg
}

/// Tukey boxplots, one per named group.
pub fn boxplot_svg(groups: &[(String, BoxplotStats)], title: &str, y_label: &str) -> String {
    let mut svg = String::new();
    open(&mut svg, title, "", y_label);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, b) in groups {
        lo = lo.min(b.min);
        hi = hi.max(b.max);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let f = Frame {
        y_min: lo - pad,
        y_max: hi + pad,
        x_min: 0.0,
        x_max: groups.len() as f64,
    };
    axes(&mut svg, &f, 5);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    for (i, (name, b)) in groups.iter().enumerate() {
        let cx = f.x(i as f64 + 0.5);
        let half = (slot * 0.3).min(40.0);
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/><line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            f.y(b.lower_whisker),
            f.y(b.q1),
            f.y(b.q3),
            f.y(b.upper_whisker)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.35" stroke="{color}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            f.y(b.q3),
            2.0 * half,
            (f.y(b.q1) - f.y(b.q3)).max(0.5),
            cx - half,
            f.y(b.median),
            cx + half,
            f.y(b.median)
        );
        for &o in &b.outliers {
            let _ = writeln!(svg, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="{color}"/>"#, f.y(o));
        }
        x_label_at(&mut svg, cx, name);
    }
    close(svg)
}

/// ROC curves (false-live rate against true-live rate) with the chance diagonal.
pub fn roc_svg(curves: &[(String, Vec<RocPoint>)], title: &str) -> String {
    let mut svg = String::new();
    open(&mut svg, title, "post-mortem samples accepted as live", "live samples accepted");
    let f = Frame {
        y_min: 0.0,
        y_max: 1.0,
        x_min: 0.0,
        x_max: 1.0,
    };
    axes(&mut svg, &f, 5);
    for v in [0.0, 0.5, 1.0] {
        x_label_at(&mut svg, f.x(v), &tick_label(v));
    }
    let _ = writeln!(
        svg,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999999" stroke-dasharray="4 4"/>"##,
        f.x(0.0),
        f.y(0.0),
        f.x(1.0),
        f.y(1.0)
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", f.x(p.false_live_rate), f.y(p.true_live_rate)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" fill="{color}">{}</text>"#,
            d.join(" "),
            W - RIGHT - 160.0,
            H - BOTTOM - 12.0 - 16.0 * i as f64,
            escape(name)
        );
    }
    close(svg)
}

/// One bar per split with a dashed line at the mean.
pub fn accuracy_bars_svg(values: &[f64], title: &str) -> String {
    let mut svg = String::new();
    open(&mut svg, title, "split", "accuracy");
    let lo = values.iter().copied().fold(1.0f64, f64::min);
    let f = Frame {
        y_min: (lo - 0.05).clamp(0.0, 0.9).min(lo).floor_to(0.05),
        y_max: 1.0,
        x_min: 0.0,
        x_max: values.len().max(1) as f64,
    };
    axes(&mut svg, &f, 5);
    let slot = (W - LEFT - RIGHT) / values.len().max(1) as f64;
    for (i, &v) in values.iter().enumerate() {
        let x = f.x(i as f64) + slot * 0.15;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            f.y(v),
            slot * 0.7,
            (f.y(f.y_min) - f.y(v)).max(0.0),
            PALETTE[0]
        );
        x_label_at(&mut svg, x + slot * 0.35, &(i + 1).to_string());
    }
    if !values.is_empty() {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{LEFT}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="{}" stroke-dasharray="6 3"/><text x="{}" y="{:.1}" text-anchor="end" fill="{}">mean {mean:.4}</text>"#,
            f.y(mean),
            W - RIGHT,
            f.y(mean),
            PALETTE[1],
            W - RIGHT,
            f.y(mean) - 4.0,
            PALETTE[1]
        );
    }
    close(svg)
}

trait FloorTo {
    fn floor_to(self, step: f64) -> f64;
}

impl FloorTo for f64 {
    fn floor_to(self, step: f64) -> f64 {
        (self / step).floor() * step
    }
}

fn bin_label(b: &TimeBin) -> String {
    match (b.live, b.upper_hours) {
        (true, _) => "live (0 h)".into(),
        (false, Some(u)) if u == b.lower_hours => format!("{} h", tick_label(u)),
        (false, Some(u)) => format!("{}-{} h", tick_label(b.lower_hours), tick_label(u)),
        (false, None) => format!("> {} h", tick_label(b.lower_hours)),
    }
}

/// Liveness score per time bin: boxplots plus the mean with a ±1 standard
/// deviation band.
pub fn time_horizon_svg(bins: &[TimeBin], title: &str) -> String {
    let groups: Vec<(String, BoxplotStats)> = bins
        .iter()
        .filter_map(|b| b.stats.clone().map(|s| (bin_label(b), s)))
        .collect();
    let mut svg = boxplot_svg(&groups, title, "liveness score");
    svg.truncate(svg.len() - "</svg>\n".len());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, b) in &groups {
        lo = lo.min(b.min);
        hi = hi.max(b.max);
    }
    if groups.is_empty() {
        return close(svg);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let f = Frame {
        y_min: lo - pad,
        y_max: hi + pad,
        x_min: 0.0,
        x_max: groups.len() as f64,
    };
    let clamp = |v: f64| v.clamp(f.y_min, f.y_max);
    let upper: Vec<String> = groups
        .iter()
        .enumerate()
        .map(|(i, (_, b))| format!("{:.1},{:.1}", f.x(i as f64 + 0.5), f.y(clamp(b.mean + b.std))))
        .collect();
    let lower: Vec<String> = groups
        .iter()
        .enumerate()
        .rev()
        .map(|(i, (_, b))| format!("{:.1},{:.1}", f.x(i as f64 + 0.5), f.y(clamp(b.mean - b.std))))
        .collect();
    let mean: Vec<String> = groups
        .iter()
        .enumerate()
        .map(|(i, (_, b))| format!("{:.1},{:.1}", f.x(i as f64 + 0.5), f.y(b.mean)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polygon points="{} {}" fill="{}" fill-opacity="0.15" stroke="none"/><polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
        upper.join(" "),
        lower.join(" "),
        PALETTE[3],
        mean.join(" "),
        PALETTE[3]
    );
    close(svg)
}

pub fn write_svg(path: impl AsRef<Path>, svg: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::eval::{roc_auc, time_horizon_analysis, ScoredSample};

    #[test]
    fn charts_are_well_formed() {
        let scored: Vec<ScoredSample> = (0..20)
            .map(|i| {
                let live = i % 2 == 0;
                ScoredSample::new(
                    if live { 0.6 + i as f64 / 100.0 } else { 0.3 - i as f64 / 100.0 },
                    if live { Label::Live } else { Label::PostMortem },
                    if live { 0.0 } else { (i * 5) as f64 },
                )
            })
            .collect();
        let (pts, _) = roc_auc(&scored).unwrap();
        let bins = time_horizon_analysis(&scored, &[20.0, 60.0]);
        for svg in [
            roc_svg(&[("pooled".into(), pts)], "ROC"),
            accuracy_bars_svg(&[0.9, 1.0, 0.95], "acc"),
            time_horizon_svg(&bins, "t"),
            boxplot_svg(&[], "empty", "v"),
        ] {
            assert!(svg.starts_with("<svg"));
            assert!(svg.trim_end().ends_with("</svg>"));
            assert!(!svg.contains("NaN"));
        }
    }
}
