//! Minimal box-plot SVG rendering. Plots are generated purely from the
//! percentile summaries that also land in metrics.csv, so they carry no
//! information absent from the CSV outputs.

use ccmpc_core::sim::SeriesSummary;


const WIDTH: f64 = 320.0;
const HEIGHT: f64 = 360.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 320.0;

/// Renders one vertical box plot (median, 25–75th percentile box, whiskers
/// at 1.5·IQR, outlier count).
pub fn box_plot_svg(title: &str, unit: &str, s: &SeriesSummary) -> String {
    let lo = s.min.min(s.whisker_low);
    let hi = s.max.max(s.whisker_high);
    let span = (hi - lo).max(1e-12);
    let pad = 0.08 * span;
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| BOTTOM - (v - lo) / (hi - lo) * (BOTTOM - TOP);

    let cx = WIDTH * 0.5;
    let half = 50.0;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    ));
    // Axis with min/max labels.
    out.push_str(&format!(
        "  <line x1=\"60\" y1=\"{TOP}\" x2=\"60\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    for (v, label) in [(s.min, "min"), (s.median, "median"), (s.max, "max")] {
        out.push_str(&format!(
            "  <text x=\"54\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{} {}</text>\n",
            y(v) + 3.0,
            label,
            fmt_precision(v)
        ));
    }
    // Whiskers.
    for v in [s.whisker_low, s.whisker_high] {
        out.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            cx - half * 0.6,
            y(v),
            cx + half * 0.6,
            y(v)
        ));
    }
    out.push_str(&format!(
        "  <line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n",
        y(s.whisker_low),
        y(s.whisker_high)
    ));
    // Interquartile box and median.
    out.push_str(&format!(
        "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#9db8e8\" stroke=\"#2b4f9e\"/>\n",
        cx - half,
        y(s.p75),
        2.0 * half,
        (y(s.p25) - y(s.p75)).max(0.5)
    ));
    out.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n",
        cx - half,
        y(s.median),
        cx + half,
        y(s.median)
    ));
    out.push_str(&format!(
        "  <text x=\"{cx}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">n = {}, outliers = {} ({unit})</text>\n",
        BOTTOM + 20.0,
        s.count,
        s.outliers
    ));
    out.push_str("</svg>\n");
    out
}

fn fmt_precision(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}
