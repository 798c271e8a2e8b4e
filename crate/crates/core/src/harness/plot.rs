use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::run::mean_std;
use crate::error::{contract_err, Result};

/// One labelled group of runs (typically the seeds of one variant), each
/// run given as `(timestep, eval reward)` points.
#[derive(Clone, Debug)]
pub struct PlotSeries {
    pub label: String,
    pub runs: Vec<Vec<(u64, f64)>>,
}

/// Per-timestep mean and spread across the runs that logged that timestep.
/// The spread is `None` where fewer than two runs contribute.
pub fn aggregate(runs: &[Vec<(u64, f64)>]) -> Vec<(u64, f64, Option<f64>)> {
    let mut by_t: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for &(t, r) in run {
            by_t.entry(t).or_default().push(r);
        }
    }
    by_t.into_iter()
        .map(|(t, v)| {
            let (m, s) = mean_std(&v);
            (t, m, (v.len() > 1).then_some(s))
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Mean evaluation reward against environment steps, one line per series
/// with a shaded ±std band across its runs.
pub fn render_svg(series: &[PlotSeries], title: &str) -> Result<String> {
    let curves: Vec<_> = series.iter().map(|s| aggregate(&s.runs)).collect();
    if curves.iter().all(Vec::is_empty) {
        return contract_err("nothing to plot: no evaluation rows");
    }
    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (80.0, 180.0, 40.0, 60.0);
    let pts = curves.iter().flatten();
    let t_max = pts.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for &(_, m, s) in pts {
        let s = s.unwrap_or(0.0);
        y_lo = y_lo.min(m - s);
        y_hi = y_hi.max(m + s);
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |t: u64| left + t as f64 / t_max * pw;
    let y = |v: f64| top + (y_hi - v) / (y_hi - y_lo) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<rect width="{w}" height="{h}" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let tx = left + f * pw;
        let t = (f * t_max).round() as u64;
        let vy = top + f * ph;
        let v = y_hi - f * (y_hi - y_lo);
        let _ = writeln!(
            svg,
            r#"<line x1="{tx:.2}" y1="{}" x2="{tx:.2}" y2="{}" stroke="black"/><text x="{tx:.2}" y="{}" text-anchor="middle">{t}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{vy:.2}" x2="{left}" y2="{vy:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.1}</text><line x1="{left}" y1="{vy:.2}" x2="{}" y2="{vy:.2}" stroke="#dddddd"/>"##,
            left - 5.0,
            left - 8.0,
            vy + 4.0,
            left + pw
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>
<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">mean evaluation reward</text>"#,
        left + pw / 2.0,
        h - 15.0,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (i, (s, curve)) in series.iter().zip(&curves).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let banded: Vec<_> = curve.iter().filter_map(|&(t, m, sd)| sd.map(|sd| (t, m, sd))).collect();
        if banded.len() > 1 {
            let upper = banded.iter().map(|&(t, m, sd)| format!("{:.2},{:.2}", x(t), y(m + sd)));
            let lower = banded.iter().rev().map(|&(t, m, sd)| format!("{:.2},{:.2}", x(t), y(m - sd)));
            let points: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                points.join(" ")
            );
        }
        let line: Vec<String> = curve
            .iter()
            .map(|&(t, m, _)| format!("{:.2},{:.2}", x(t), y(m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
