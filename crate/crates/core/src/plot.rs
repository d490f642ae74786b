//! Learning-curve SVG emitter.
//!
//! One polyline per arm (mean over seeds) with a shaded ±1 std band, using
//! the population std as in `summary.json`. Output is a pure function of the
//! input numbers: fixed canvas, fixed palette, fixed float formatting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::runner::IterationMetrics;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One experimental arm: a label and one `(env_steps, mean_return)` series
/// per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub seeds: Vec<Vec<(usize, f64)>>,
}

impl Arm {
    pub fn from_metrics<'a>(label: impl Into<String>, runs: impl IntoIterator<Item = &'a [IterationMetrics]>) -> Self {
        Arm {
            label: label.into(),
            seeds: runs
                .into_iter()
                .map(|r| r.iter().map(|m| (m.env_steps, m.mean_return)).collect())
                .collect(),
        }
    }
}

/// Mean and band edges at one grid point. `band` is `None` for a single seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub env_steps: usize,
    pub mean: f64,
    pub band: Option<(f64, f64)>,
}

/// Per-step mean ± std across seeds; seeds must share the same step grid.
pub fn arm_band(arm: &Arm) -> Result<Vec<BandPoint>> {
    let first = arm
        .seeds
        .first()
        .ok_or_else(|| Error::Invalid(format!("arm {} has no seeds", arm.label)))?;
    for (k, s) in arm.seeds.iter().enumerate() {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::Invalid(format!(
                "arm {}: seed {k} does not share the iteration grid of seed 0",
                arm.label
            )));
        }
    }
    let n = arm.seeds.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let ys: Vec<f64> = arm.seeds.iter().map(|s| s[i].1).collect();
            let mean = ys.iter().sum::<f64>() / n;
            let band = (arm.seeds.len() > 1).then(|| {
                let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
                (mean - sd, mean + sd)
            });
            BandPoint {
                env_steps: first[i].0,
                mean,
                band,
            }
        })
        .collect())
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Render every arm onto one set of axes.
pub fn render_curves(arms: &[Arm], title: &str) -> Result<String> {
    if arms.is_empty() {
        return Err(Error::Invalid("no arms to plot".into()));
    }
    let bands: Vec<Vec<BandPoint>> = arms.iter().map(arm_band).collect::<Result<_>>()?;

    let mut x_max = 0usize;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for p in bands.iter().flatten() {
        x_max = x_max.max(p.env_steps);
        let (lo, hi) = p.band.unwrap_or((p.mean, p.mean));
        for v in [p.mean, lo, hi] {
            if v.is_finite() {
                y_lo = y_lo.min(v);
                y_hi = y_hi.max(v);
            }
        }
    }
    if !y_lo.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let x_hi = x_max.max(1) as f64;

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + plot_w * x / x_hi;
    let sy = |y: f64| TOP + plot_h * (1.0 - (y - y_lo) / (y_hi - y_lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );

    for t in nice_ticks(0.0, x_hi, 6) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP,
            TOP + plot_h,
            TOP + plot_h + 16.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">env_steps</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">mean_return</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for (k, (arm, band)) in arms.iter().zip(&bands).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if band.iter().all(|p| p.band.is_some()) && !band.is_empty() {
            let mut pts = Vec::with_capacity(2 * band.len());
            for p in band {
                pts.push(format!("{:.2},{:.2}", sx(p.env_steps as f64), sy(p.band.expect("checked").1)));
            }
            for p in band.iter().rev() {
                pts.push(format!("{:.2},{:.2}", sx(p.env_steps as f64), sy(p.band.expect("checked").0)));
            }
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let line: Vec<String> = band
            .iter()
            .filter(|p| p.mean.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.env_steps as f64), sy(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{} (n={})</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&arm.label),
            arm.seeds.len()
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
