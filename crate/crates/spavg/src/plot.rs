//! Minimal SVG line-chart emitter for the figure outputs. No external
//! charting dependency; output is deterministic for fixed input.

/// One plotted series.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

impl LineChart {
    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.data_bounds();
        let plot_w = WIDTH - MARGIN_L - MARGIN_R;
        let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0) * plot_h;

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));

        // Axes.
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B,
            WIDTH - MARGIN_R,
            HEIGHT - MARGIN_B
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B
        ));

        // Ticks and grid.
        for k in 0..=5 {
            let fx = x0 + (x1 - x0) * k as f64 / 5.0;
            let px = sx(fx);
            svg.push_str(&format!(
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                HEIGHT - MARGIN_B,
                HEIGHT - MARGIN_B + 5.0
            ));
            svg.push_str(&format!(
                "<text x=\"{px:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                HEIGHT - MARGIN_B + 18.0,
                tick_label(fx)
            ));
            let fy = y0 + (y1 - y0) * k as f64 / 5.0;
            let py = sy(fy);
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{MARGIN_L}\" y2=\"{py:.1}\" stroke=\"black\"/>\n",
                MARGIN_L - 5.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
                MARGIN_L - 8.0,
                py + 4.0,
                tick_label(fy)
            ));
            if k > 0 {
                svg.push_str(&format!(
                    "<line x1=\"{MARGIN_L}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n",
                    WIDTH - MARGIN_R
                ));
            }
        }

        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_L + plot_w / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"18\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
            MARGIN_T + plot_h / 2.0,
            MARGIN_T + plot_h / 2.0,
            escape(&self.y_label)
        ));

        // Series.
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut path = String::with_capacity(s.points.len() * 14);
            for (j, (x, y)) in s.points.iter().enumerate() {
                if j > 0 {
                    path.push(' ');
                }
                path.push_str(&format!("{:.2},{:.2}", sx(*x), sy(*y)));
            }
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{path}\"/>\n"
            ));
        }

        // Legend, top right.
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = MARGIN_T + 14.0 + 18.0 * i as f64;
            let x = WIDTH - MARGIN_R - 180.0;
            svg.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                x + 24.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
                x + 30.0,
                y + 4.0,
                escape(&s.label)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }

    fn data_bounds(&self) -> (f64, f64, f64, f64) {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for s in &self.series {
            for (x, y) in &s.points {
                x0 = x0.min(*x);
                x1 = x1.max(*x);
                y0 = y0.min(*y);
                y1 = y1.max(*y);
            }
        }
        if !x0.is_finite() || !x1.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() || !y1.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-300 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-300 {
            y1 = y0 + 1.0;
        } else {
            let pad = 0.05 * (y1 - y0);
            y0 -= pad;
            y1 += pad;
        }
        (x0, x1, y0, y1)
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() { "0".to_string() } else { s }
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_per_series() {
        let chart = LineChart {
            title: "demo".into(),
            x_label: "t".into(),
            y_label: "v".into(),
            series: vec![
                Series { label: "a".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] },
                Series { label: "b".into(), points: vec![(0.0, 1.0), (1.0, 0.0)] },
            ],
        };
        let svg = chart.render();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("demo"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let chart = LineChart {
            title: "d".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series { label: "s".into(), points: vec![(0.0, 2.0), (3.0, -1.0)] }],
        };
        assert_eq!(chart.render(), chart.render());
    }
}
