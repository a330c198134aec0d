//! Static overlay plots: reference ABP against the model's reconstruction,
//! one SVG per segment. Text output keeps the emission dependency-free and
//! byte-deterministic.

use std::fmt::Write as _;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 320.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 40.0;

fn polyline(out: &mut String, series: &[f64], lo: f64, hi: f64, color: &str, width: f64) {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let span = (hi - lo).max(1e-12);
    let n = series.len().max(2) as f64;
    let mut points = String::with_capacity(series.len() * 12);
    for (i, &v) in series.iter().enumerate() {
        let x = MARGIN_L + plot_w * i as f64 / (n - 1.0);
        let y = MARGIN_T + plot_h * (1.0 - (v - lo) / span);
        let _ = write!(points, "{x:.2},{y:.2} ");
    }
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"##,
        points.trim_end()
    );
}

/// Renders one overlay figure. `truth` and `prediction` are time-domain ABP
/// traces of equal length.
#[must_use]
pub fn overlay_svg(id: &str, mask_ratio: f64, truth: &[f64], prediction: &[f64]) -> String {
    let lo = truth
        .iter()
        .chain(prediction)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = truth
        .iter()
        .chain(prediction)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.05 * (hi - lo).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"##
    );
    let _ = writeln!(svg, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##);
    let _ = writeln!(
        svg,
        r##"<text x="{MARGIN_L}" y="20" font-size="14" fill="#222">{id} &#8212; reference vs reconstruction (mask ratio {mask_ratio})</text>"##
    );

    // Frame and y-axis labels.
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#bbb"/>"##
    );
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let y = MARGIN_T + plot_h * (1.0 - frac);
        let value = lo + frac * (hi - lo);
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-size="10" fill="#555" text-anchor="end">{value:.2}</text>"##,
            MARGIN_L - 6.0,
            y + 3.0
        );
        if k > 0 && k < 4 {
            let _ = writeln!(
                svg,
                r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#eee"/>"##,
                MARGIN_L + plot_w
            );
        }
    }
    // x-axis labels in samples.
    let n = truth.len().max(2);
    for k in 0..=4 {
        let idx = (n - 1) * k / 4;
        let x = MARGIN_L + plot_w * idx as f64 / (n - 1) as f64;
        let _ = writeln!(
            svg,
            r##"<text x="{x:.2}" y="{:.2}" font-size="10" fill="#555" text-anchor="middle">{idx}</text>"##,
            HEIGHT - MARGIN_B + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="#555" text-anchor="middle">sample</text>"##,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 6.0
    );

    polyline(&mut svg, truth, lo, hi, "#444444", 1.6);
    polyline(&mut svg, prediction, lo, hi, "#d62728", 1.2);

    // Legend.
    let lx = MARGIN_L + plot_w - 200.0;
    let _ = writeln!(
        svg,
        r##"<line x1="{lx}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#444444" stroke-width="1.6"/>"##,
        MARGIN_T + 12.0,
        lx + 24.0,
        MARGIN_T + 12.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="#222">reference ABP</text>"##,
        lx + 30.0,
        MARGIN_T + 16.0
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{lx}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="1.2"/>"##,
        MARGIN_T + 28.0,
        lx + 24.0,
        MARGIN_T + 28.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="#222">reconstructed ABP</text>"##,
        lx + 30.0,
        MARGIN_T + 32.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let truth: Vec<f64> = (0..64).map(|i| (i as f64 * 0.2).sin()).collect();
        let pred: Vec<f64> = truth.iter().map(|v| v * 0.9 + 0.01).collect();
        let a = overlay_svg("pair-00001", 0.1, &truth, &pred);
        let b = overlay_svg("pair-00001", 0.1, &truth, &pred);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("pair-00001"));
        assert!(a.contains("mask ratio 0.1"));
    }

    #[test]
    fn flat_series_do_not_divide_by_zero() {
        let flat = vec![0.5; 32];
        let svg = overlay_svg("flat", 0.3, &flat, &flat);
        assert!(!svg.contains("NaN"));
        assert!(!svg.contains("inf"));
    }
}
