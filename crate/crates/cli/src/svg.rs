//! Minimal native SVG line charts: axes, tick labels, and one polyline per
//! series. No drawing dependencies; the output is plain markup.

use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One named line.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render a chart of the finite points in `series` and write it to `path`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> std::io::Result<()> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (x0, x1, y0, y1) = bounds(&pts);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );

    // axes
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>",
        MARGIN_T + plot_h
    );
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN_L}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w
    );

    // ticks: 5 per axis
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let xp = sx(xv);
        let yp = sy(yv);
        let _ = writeln!(
            s,
            "<line x1=\"{xp}\" y1=\"{0}\" x2=\"{xp}\" y2=\"{1}\" stroke=\"black\"/>",
            MARGIN_T + plot_h,
            MARGIN_T + plot_h + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            MARGIN_T + plot_h + 20.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{0}\" y1=\"{yp}\" x2=\"{MARGIN_L}\" y2=\"{yp}\" stroke=\"black\"/>",
            MARGIN_L - 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 9.0,
            yp + 4.0,
            fmt_tick(yv)
        );
    }

    // axis labels
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>",
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut poly = String::new();
        for &(x, y) in &ser.points {
            if x.is_finite() && y.is_finite() {
                let _ = write!(poly, "{:.2},{:.2} ", sx(x), sy(y));
            }
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            poly.trim_end()
        );
        if series.len() > 1 {
            let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>",
                MARGIN_L + plot_w - 150.0,
                MARGIN_L + plot_w - 120.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\">{}</text>",
                MARGIN_L + plot_w - 113.0,
                ly + 4.0,
                escape(&ser.name)
            );
        }
    }
    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s)
}

fn bounds(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_polyline_axes_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let series = [Series {
            name: "reward".into(),
            points: (0..50).map(|i| (i as f64, (i as f64 * 0.2).sin())).collect(),
        }];
        line_chart("training reward", "loop", "mean reward", &series, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("<polyline"));
        assert!(text.contains("training reward"));
        assert!(text.contains("mean reward"));
        assert!(text.contains("loop"));
        assert!(!text.contains("NaN"));
    }

    #[test]
    fn non_finite_points_are_dropped_not_rendered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let series = [Series {
            name: "x".into(),
            points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)],
        }];
        line_chart("t", "x", "y", &series, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("NaN"));
    }

    #[test]
    fn degenerate_single_point_still_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let series =
            [Series { name: "p".into(), points: vec![(3.0, 7.0)] }];
        line_chart("t", "x", "y", &series, &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("<polyline"));
    }
}
