//! Minimal SVG line charts.

use std::fmt::Write as _;

use crate::drl::CurvePoint;
use crate::error::{Error, Result};

use super::report::ReportRow;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// (x, y, optional ± error bar)
    pub points: Vec<(f64, f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round numbers for axis ticks covering [lo, hi].
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

impl Chart {
    pub fn to_svg(&self) -> Result<String> {
        let finite = |v: f64| v.is_finite();
        let pts: Vec<(f64, f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y, e)| (x, y, e.unwrap_or(0.0))))
            .filter(|p| finite(p.0) && finite(p.1))
            .collect();
        if pts.is_empty() {
            return Err(Error::EmptyReport("chart has no finite points".into()));
        }
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y, e) in &pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y - e);
            y1 = y1.max(y + e);
        }
        if x1 == x0 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let pad = ((y1 - y0) * 0.05).max(1e-3);
        y0 -= pad;
        y1 += pad;
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut o = String::new();
        let w = &mut o;
        writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
        writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(w, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(&self.title)).unwrap();
        for t in ticks(x0, x1) {
            let x = sx(t);
            writeln!(w, r##"<line x1="{x:.1}" y1="{TOP:.1}" x2="{x:.1}" y2="{:.1}" stroke="#e5e5e5"/>"##, TOP + ph).unwrap();
            writeln!(w, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, fmt_tick(t)).unwrap();
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            writeln!(w, r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e5e5e5"/>"##, LEFT + pw).unwrap();
            writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t)).unwrap();
        }
        writeln!(w, r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#).unwrap();
        writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 18.0, escape(&self.x_label)).unwrap();
        writeln!(w, r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#, TOP + ph / 2.0, escape(&self.y_label)).unwrap();

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let visible: Vec<&(f64, f64, Option<f64>)> = s.points.iter().filter(|p| finite(p.0) && finite(p.1)).collect();
            let path: Vec<String> = visible.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
            writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
            for p in &visible {
                let (x, y) = (sx(p.0), sy(p.1));
                if let Some(e) = p.2 {
                    writeln!(w, r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#, sy(p.1 + e), sy(p.1 - e)).unwrap();
                }
                if visible.len() <= 50 {
                    writeln!(w, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#).unwrap();
                }
            }
            let ly = TOP + 14.0 + 20.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            writeln!(w, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
            writeln!(w, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label)).unwrap();
        }
        writeln!(w, "</svg>").unwrap();
        Ok(o)
    }
}

/// Accuracy against SNR, one series per (optimizer, protocol).
pub fn snr_chart(rows: &[ReportRow], task: Option<&str>) -> Result<Chart> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    let mut points: Vec<Vec<(f64, f64, Option<f64>)>> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == "accuracy" && task.is_none_or(|t| t == r.task)) {
        let key = (r.optimizer.as_str(), r.protocol.as_str());
        let idx = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            keys.push(key);
            points.push(Vec::new());
            keys.len() - 1
        });
        points[idx].push((r.snr, r.mean, Some(r.std)));
    }
    if keys.is_empty() {
        return Err(Error::EmptyReport("no accuracy rows to plot".into()));
    }
    let series = keys
        .iter()
        .zip(points)
        .map(|(&(opt, protocol), mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            // protocol shown only to tell apart series of the same optimizer
            let shared = keys.iter().filter(|k| k.0 == opt).count() > 1;
            let label = if shared { format!("{opt} [{protocol}]") } else { opt.to_string() };
            Series { label, points: pts }
        })
        .collect();
    let title = match task {
        Some(t) => format!("Accuracy vs SNR ({t})"),
        None => "Accuracy vs SNR".into(),
    };
    Ok(Chart { title, x_label: "SNR".into(), y_label: "accuracy".into(), series })
}

pub fn curve_chart(curve: &[CurvePoint]) -> Result<Chart> {
    if curve.is_empty() {
        return Err(Error::EmptyReport("training curve is empty".into()));
    }
    let s = |label: &str, f: fn(&CurvePoint) -> f64| Series {
        label: label.into(),
        points: curve.iter().map(|p| (p.step as f64, f(p), None)).collect(),
    };
    Ok(Chart {
        title: "Training curve".into(),
        x_label: "environment steps".into(),
        y_label: "reward".into(),
        series: vec![s("mean episode", |p| p.mean_episode_reward), s("best", |p| p.best_reward)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round() {
        let t = ticks(0.0, 1.0);
        assert_eq!(t.len(), 6);
        assert!(t.iter().zip([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(ticks(5.0, 35.0), vec![10.0, 20.0, 30.0]);
        assert_eq!(fmt_tick(0.6000000000000001), "0.6");
    }

    #[test]
    fn escapes_markup() {
        let c = Chart {
            title: "a<b & c".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series { label: "s".into(), points: vec![(0.0, 1.0, None), (1.0, 2.0, Some(0.1))] }],
        };
        let svg = c.to_svg().unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_chart_is_an_error() {
        let c = Chart { title: String::new(), x_label: String::new(), y_label: String::new(), series: vec![] };
        assert!(c.to_svg().is_err());
        assert!(curve_chart(&[]).is_err());
    }
}
