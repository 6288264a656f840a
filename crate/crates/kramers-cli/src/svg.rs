//! Minimal hand-emitted SVG line charts: axes, decade ticks, data points,
//! and an optional fitted line with a text annotation. No drawing
//! dependency; the output is a deterministic function of the inputs.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 74.0;
const RIGHT: f64 = 616.0;
const TOP: f64 = 46.0;
const BOTTOM: f64 = 386.0;

fn px(v: f64) -> String {
    format!("{v:.2}")
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn from_values(values: &[f64]) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Self { lo: -1.0, hi: 1.0 };
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.06 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

/// Renders a log-log scatter of `points` (raw positive coordinates) with an
/// optional fitted power law `ln y = slope ln x + intercept`. Points with a
/// non-positive or non-finite coordinate are dropped from the plot (they
/// cannot be placed on log axes); the caller's CSV still records them.
pub fn loglog_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    fit: Option<(f64, f64)>,
    annotation: &str,
) -> String {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();

    let xs: Vec<f64> = logs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = logs.iter().map(|p| p.1).collect();
    let xaxis = Axis::from_values(&xs);
    let yaxis = Axis::from_values(&ys);
    let to_px = |lx: f64, ly: f64| -> (f64, f64) {
        (
            LEFT + xaxis.frac(lx) * (RIGHT - LEFT),
            BOTTOM - yaxis.frac(ly) * (BOTTOM - TOP),
        )
    };

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        px((LEFT + RIGHT) / 2.0),
        escape(title)
    ));

    for k in decade_ticks(xaxis.lo, xaxis.hi) {
        let (x, _) = to_px(k as f64, yaxis.lo);
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#dddddd\"/>\n",
            px(x),
            px(TOP),
            px(BOTTOM)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">1e{}</text>\n",
            px(x),
            px(BOTTOM + 16.0),
            k
        ));
    }
    for k in decade_ticks(yaxis.lo, yaxis.hi) {
        let (_, y) = to_px(xaxis.lo, k as f64);
        s.push_str(&format!(
            "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"#dddddd\"/>\n",
            px(y),
            px(LEFT),
            px(RIGHT)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">1e{}</text>\n",
            px(LEFT - 6.0),
            px(y + 4.0),
            k
        ));
    }

    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(LEFT),
        px(BOTTOM),
        px(RIGHT),
        px(BOTTOM)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(LEFT),
        px(TOP),
        px(LEFT),
        px(BOTTOM)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        px((LEFT + RIGHT) / 2.0),
        px(HEIGHT - 10.0),
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        px((TOP + BOTTOM) / 2.0),
        px((TOP + BOTTOM) / 2.0),
        escape(y_label)
    ));

    if let (Some((slope, intercept)), false) = (fit, logs.is_empty()) {
        let a10 = slope;
        let c10 = intercept / std::f64::consts::LN_10;
        let mut ends = [(xaxis.lo, a10 * xaxis.lo + c10), (xaxis.hi, a10 * xaxis.hi + c10)];
        if a10 != 0.0 {
            for end in &mut ends {
                if end.1 < yaxis.lo {
                    *end = ((yaxis.lo - c10) / a10, yaxis.lo);
                } else if end.1 > yaxis.hi {
                    *end = ((yaxis.hi - c10) / a10, yaxis.hi);
                }
            }
        }
        let (x1, y1) = to_px(ends[0].0, ends[0].1);
        let (x2, y2) = to_px(ends[1].0, ends[1].1);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#c0392b\" stroke-dasharray=\"6,3\"/>\n",
            px(x1),
            px(y1),
            px(x2),
            px(y2)
        ));
    }

    for &(lx, ly) in &logs {
        let (x, y) = to_px(lx, ly);
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"#2471a3\"/>\n",
            px(x),
            px(y)
        ));
    }

    if logs.is_empty() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no positive data</text>\n",
            px((LEFT + RIGHT) / 2.0),
            px((TOP + BOTTOM) / 2.0)
        ));
    }
    if !annotation.is_empty() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            px(RIGHT - 4.0),
            px(TOP + 14.0),
            escape(annotation)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn decade_ticks(lo: f64, hi: f64) -> Vec<i64> {
    let first = lo.ceil() as i64;
    let last = hi.floor() as i64;
    (first..=last).collect()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_points_axes_and_annotation() {
        let points = [(0.1, 0.05), (0.03, 0.02), (0.01, 0.008)];
        let svg = loglog_chart("gap vs m", "m", "gap", &points, Some((0.5, -1.0)), "slope = 0.500");
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("slope = 0.500"));
        assert!(svg.contains("1e-1"));
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn chart_is_deterministic() {
        let points = [(0.1, 0.05), (0.01, 0.004)];
        let a = loglog_chart("t", "x", "y", &points, None, "");
        let b = loglog_chart("t", "x", "y", &points, None, "");
        assert_eq!(a, b);
    }

    #[test]
    fn chart_survives_empty_and_nonpositive_data() {
        let svg = loglog_chart("t", "x", "y", &[(0.1, -0.5), (0.2, f64::NAN)], Some((1.0, 0.0)), "n/a");
        assert!(svg.contains("no positive data"));
        assert_eq!(svg.matches("<circle").count(), 0);
    }

    #[test]
    fn labels_are_escaped() {
        let svg = loglog_chart("a<b", "x&y", "y>z", &[(1.0, 1.0)], None, "");
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("x&amp;y"));
        assert!(svg.contains("y&gt;z"));
    }
}
