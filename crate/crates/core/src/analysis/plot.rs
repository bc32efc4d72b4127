//! Prediction-vs-subjective-score scatter plots as SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{fit_logistic, ScorePairs};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
pub const CURVE_SAMPLES: usize = 100;

/// Fitted logistic sampled at evenly spaced predictions over the data range,
/// or `None` when the fit is undefined.
pub fn logistic_curve(pairs: &ScorePairs) -> Option<Vec<(f64, f64)>> {
    let params = fit_logistic(pairs).ok()?;
    let (lo, hi) = range(pairs.preds());
    Some(
        (0..CURVE_SAMPLES)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / (CURVE_SAMPLES - 1) as f64;
                (x, params.eval(x))
            })
            .collect(),
    )
}

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Scatter of predictions (x) against subjective scores (y) with the fitted
/// logistic overlaid.
pub fn scatter_svg(pairs: &ScorePairs, title: &str) -> Result<String> {
    if pairs.n() == 0 {
        return Err(Error::Invalid("scatter plot needs at least one point".into()));
    }
    let curve = logistic_curve(pairs);
    let (x0, x1) = range(pairs.preds());
    let mut ys: Vec<f64> = pairs.gts().to_vec();
    if let Some(c) = &curve {
        ys.extend(c.iter().map(|p| p.1));
    }
    let (y0, y1) = range(&ys);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    for (v, anchor_x, anchor_y, label) in [
        (x0, left, bottom + 16.0, "start"),
        (x1, right, bottom + 16.0, "end"),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x:.1}" y="{anchor_y:.1}" text-anchor="{label}" font-family="sans-serif" font-size="11">{v:.3}</text>"#
        );
    }
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            left - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13">Predicted score</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {:.1})">Subjective score</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (x, y) in pairs.preds().iter().zip(pairs.gts()) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="steelblue" fill-opacity="0.7"/>"#,
            px(*x),
            py(*y)
        );
    }
    if let Some(c) = curve {
        let pts: Vec<String> = c.iter().map(|(x, y)| format!("{:.3},{:.3}", px(*x), py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="firebrick" stroke-width="2" fill="none"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn scatter_plot(pairs: &ScorePairs, title: &str, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let svg = scatter_svg(pairs, title)?;
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}
