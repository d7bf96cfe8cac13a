//! Self-contained SVG line charts for sweep reports. No plotting dependency:
//! axes, ticks, polylines, and a legend are emitted directly.

use crate::error::{Result, StadvError};
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        if lo == 0.0 {
            (-1.0, 1.0)
        } else {
            (lo - lo.abs() * 0.1, hi + hi.abs() * 0.1)
        }
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Render one line chart as an SVG document.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(StadvError::invalid("nothing to plot"));
    }
    let mut xs_lo = f64::INFINITY;
    let mut xs_hi = f64::NEG_INFINITY;
    let mut ys_lo = f64::INFINITY;
    let mut ys_hi = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xs_lo = xs_lo.min(x);
            xs_hi = xs_hi.max(x);
            ys_lo = ys_lo.min(y);
            ys_hi = ys_hi.max(y);
        }
    }
    let (x0, x1) = nice_range(xs_lo, xs_hi);
    let (y0, y1) = nice_range(ys_lo, ys_hi);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" font-family=\"monospace\" font-size=\"12\">",
        WIDTH, HEIGHT
    );
    let _ = writeln!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
        WIDTH, HEIGHT
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_LEFT,
        r = WIDTH - MARGIN_RIGHT,
        b = HEIGHT - MARGIN_BOTTOM
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = HEIGHT - MARGIN_BOTTOM
    );
    // Ticks and grid.
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let tx = px(fx);
        let ty = py(fy);
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/><text x=\"{x}\" y=\"{yl}\" text-anchor=\"middle\">{v:.3}</text>",
            x = tx,
            b = HEIGHT - MARGIN_BOTTOM,
            b2 = HEIGHT - MARGIN_BOTTOM + 5.0,
            yl = HEIGHT - MARGIN_BOTTOM + 20.0,
            v = fx
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{l2}\" y2=\"{y}\" stroke=\"black\"/><text x=\"{xl}\" y=\"{y2}\" text-anchor=\"end\">{v:.3}</text>",
            l = MARGIN_LEFT - 5.0,
            l2 = MARGIN_LEFT,
            y = ty,
            xl = MARGIN_LEFT - 8.0,
            y2 = ty + 4.0,
            v = fy
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            color,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>",
                px(x),
                py(y),
                color
            );
        }
        // Legend row.
        let ly = MARGIN_TOP + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"2\"/><text x=\"{xt}\" y=\"{yt}\">{label}</text>",
            x = WIDTH - MARGIN_RIGHT - 150.0,
            x2 = WIDTH - MARGIN_RIGHT - 130.0,
            y = ly,
            c = color,
            xt = WIDTH - MARGIN_RIGHT - 124.0,
            yt = ly + 4.0,
            label = escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_and_legend() {
        let svg = render_line_chart(
            "sweep",
            "eps",
            "G-MAE",
            &[Series {
                label: "stpgd-tdns".into(),
                points: vec![(0.0, 2.0), (0.25, 4.0), (0.5, 6.0)],
            }],
        )
        .unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("stpgd-tdns"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(render_line_chart("t", "x", "y", &[]).is_err());
    }

    #[test]
    fn single_point_series_renders() {
        let svg = render_line_chart(
            "one",
            "x",
            "y",
            &[Series {
                label: "only".into(),
                points: vec![(1.0, 1.0)],
            }],
        )
        .unwrap();
        assert!(svg.contains("circle"));
    }
}
