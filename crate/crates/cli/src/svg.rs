//! Minimal deterministic SVG line charts. No timestamps, no randomness —
//! the same data always renders the same bytes, so plot files can be
//! byte-compared across runs.

use std::fmt::Write;

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const W: f64 = 800.0;
const H: f64 = 480.0;
const ML: f64 = 64.0; // left margin
const MR: f64 = 16.0;
const MT: f64 = 40.0;
const MB: f64 = 48.0;

/// Render `series` as polylines over x = 1..=len. `y_range` pins the y axis
/// (otherwise it fits the data); `vline` draws a dashed vertical marker at an
/// x position, `hline` a dashed horizontal one at a y value.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    y_range: Option<(f64, f64)>,
    vline: Option<f64>,
    hline: Option<f64>,
) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let x_max = (n.max(2)) as f64;

    let (y_lo, y_hi) = y_range.unwrap_or_else(|| {
        let finite: Vec<f64> = series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .filter(|v| v.is_finite())
            .collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi.is_finite() && hi > lo {
            let pad = (hi - lo) * 0.05;
            (lo - pad, hi + pad)
        } else if lo.is_finite() {
            (lo - 1.0, lo + 1.0)
        } else {
            (0.0, 1.0)
        }
    });

    let sx = |x: f64| ML + (x - 1.0) / (x_max - 1.0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        (ML + W - MR) / 2.0,
        escape(title),
    );

    // Axes.
    let _ = write!(
        out,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let y = y_lo + t * (y_hi - y_lo);
        let x = 1.0 + t * (x_max - 1.0);
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            ML - 6.0,
            sy(y) + 4.0,
            trim_num(y),
            sx(x),
            H - MB + 16.0,
            trim_num(x),
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 10.0,
        escape(x_label),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        escape(y_label),
    );

    if let Some(x) = vline {
        if x >= 1.0 && x <= x_max {
            let _ = write!(
                out,
                "<line x1=\"{0:.1}\" y1=\"{MT}\" x2=\"{0:.1}\" y2=\"{1:.1}\" \
                 stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
                sx(x),
                H - MB,
            );
        }
    }
    if let Some(y) = hline {
        if y >= y_lo && y <= y_hi {
            let _ = write!(
                out,
                "<line x1=\"{ML}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" \
                 stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
                sy(y),
                W - MR,
            );
        }
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for (k, &v) in s.values.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", sx((k + 1) as f64), sy(v.clamp(y_lo, y_hi)));
            }
        }
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.trim_end(),
        );
        // Legend entry.
        let ly = MT + 14.0 * i as f64 + 4.0;
        let _ = write!(
            out,
            "<line x1=\"{0:.1}\" y1=\"{ly:.1}\" x2=\"{1:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{2:.1}\" y=\"{3:.1}\">{4}</text>\n",
            W - MR - 150.0,
            W - MR - 130.0,
            W - MR - 124.0,
            ly + 4.0,
            escape(s.name),
        );
    }

    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axis-tick formatting: fixed but without trailing noise (`0.25`, `120`).
fn trim_num(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}
