//! Minimal line and scatter charts written as plain SVG text.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Scatter,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

#[derive(Debug, Clone)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(vals: impl Iterator<Item = f64>, log: bool) -> Self {
        let vals: Vec<f64> = vals
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .map(|v| if log { v.log10() } else { v })
            .collect();
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32)
                .map(|e| ((e as f64 - self.lo) / (self.hi - self.lo), format!("1e{e}")))
                .collect()
        } else {
            (0..=5)
                .map(|k| {
                    let t = k as f64 / 5.0;
                    (t, format!("{:.3}", self.lo + t * (self.hi - self.lo)))
                })
                .collect()
        }
    }
}

impl Plot {
    pub fn render(&self, comment: &str) -> String {
        let xs = Axis::fit(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), self.log_x);
        let ys = Axis::fit(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), self.log_y);
        let pw = W - ML - MR;
        let ph = H - MT - MB;
        let px = |t: f64| ML + t * pw;
        let py = |t: f64| MT + (1.0 - t) * ph;

        let mut s = String::new();
        let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
        let _ = writeln!(s, "<!-- {} -->", esc(comment));
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">"
        );
        let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            W / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{ML}\" y=\"{MT}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
        );
        for (t, label) in xs.ticks() {
            let x = px(t);
            let _ = writeln!(
                s,
                "<line x1=\"{x:.2}\" y1=\"{MT}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>",
                MT + ph
            );
            let _ = writeln!(
                s,
                "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{label}</text>",
                MT + ph + 15.0
            );
        }
        for (t, label) in ys.ticks() {
            let y = py(t);
            let _ = writeln!(
                s,
                "<line x1=\"{ML}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>",
                ML + pw
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{label}</text>",
                ML - 5.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            ML + pw / 2.0,
            H - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text transform=\"translate(16 {:.2}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
            MT + ph / 2.0,
            esc(&self.y_label)
        );

        for (k, ser) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<(f64, f64)> = ser
                .points
                .iter()
                .filter_map(|&(x, y)| Some((px(xs.frac(x)?), py(ys.frac(y)?))))
                .collect();
            match ser.style {
                Style::Line => {
                    let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(
                        s,
                        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                        d.join(" ")
                    );
                }
                Style::Scatter => {
                    for (x, y) in &pts {
                        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{color}\"/>");
                    }
                }
            }
            let ly = MT + 14.0 + 14.0 * k as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
                ML + 10.0,
                ly - 9.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>",
                ML + 25.0,
                esc(&ser.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot(style: Style, log: bool) -> Plot {
        Plot {
            title: "t <1>".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: log,
            log_y: false,
            series: vec![Series {
                name: "a".into(),
                points: vec![(1.0, 1.0), (10.0, 2.0), (100.0, f64::NAN)],
                style,
            }],
        }
    }

    #[test]
    fn renders_wellformed_text() {
        let s = plot(Style::Line, true).render("hdr");
        assert!(s.starts_with("<?xml"));
        assert!(s.contains("<!-- hdr -->"));
        assert!(s.contains("t &lt;1&gt;"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 1);
        assert!(s.contains(">1e2<"));
    }

    #[test]
    fn scatter_skips_non_finite() {
        let s = plot(Style::Scatter, false).render("");
        assert_eq!(s.matches("<circle").count(), 2);
    }

    #[test]
    fn empty_plot_renders() {
        let mut p = plot(Style::Line, false);
        p.series.clear();
        assert!(p.render("").contains("</svg>"));
    }
}
