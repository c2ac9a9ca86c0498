//! Minimal SVG emission for scatter and line plots. Text-only output so
//! plots are deterministic and diffable; no drawing library involved.

use crate::error::{Error, Result};
use std::fmt::Write as _;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.to_string(),
            points,
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Result<Frame> {
        let mut pts = series.iter().flat_map(|s| s.points.iter());
        let Some(&(fx, fy)) = pts.next() else {
            return Err(Error::Empty { what: "plot data" });
        };
        let (mut x0, mut x1, mut y0, mut y1) = (fx, fx, fy, fy);
        for s in series {
            for &(x, y) in &s.points {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::NonFinite { op: "plot data" });
                }
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        // degenerate spans get a unit window so division stays finite
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let (px, py) = ((x1 - x0) * 0.06, (y1 - y0) * 0.06);
        Ok(Frame {
            x0: x0 - px,
            x1: x1 + px,
            y0: y0 - py,
            y1: y1 + py,
        })
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else if a >= 0.01 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn chrome(out: &mut String, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = write!(
        out,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    );
    // axes
    let (bx, by) = (MARGIN_L, HEIGHT - MARGIN_B);
    let _ = write!(
        out,
        "<line x1=\"{bx}\" y1=\"{MARGIN_T}\" x2=\"{bx}\" y2=\"{by}\" stroke=\"black\"/>\n\
         <line x1=\"{bx}\" y1=\"{by}\" x2=\"{:.1}\" y2=\"{by}\" stroke=\"black\"/>\n",
        WIDTH - MARGIN_R
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x0 + t * (frame.x1 - frame.x0);
        let yv = frame.y0 + t * (frame.y1 - frame.y0);
        let (sx, sy) = (frame.sx(xv), frame.sy(yv));
        let _ = write!(
            out,
            "<line x1=\"{sx:.1}\" y1=\"{by}\" x2=\"{sx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{sx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            by + 5.0,
            by + 18.0,
            fmt_tick(xv)
        );
        let _ = write!(
            out,
            "<line x1=\"{:.1}\" y1=\"{sy:.1}\" x2=\"{bx}\" y2=\"{sy:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            bx - 5.0,
            bx - 8.0,
            sy + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_label)
    );
    let ly = (MARGIN_T + HEIGHT - MARGIN_B) / 2.0;
    let _ = write!(
        out,
        "<text x=\"18\" y=\"{ly:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {ly:.1})\">{}</text>\n",
        xml_escape(y_label)
    );
}

fn legend(out: &mut String, series: &[Series]) {
    if series.len() < 2 {
        return;
    }
    for (k, s) in series.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 16.0 * k as f64;
        let x = WIDTH - MARGIN_R - 150.0;
        let color = PALETTE[k % PALETTE.len()];
        let _ = write!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            y - 9.0,
            x + 14.0,
            y,
            xml_escape(&s.name)
        );
    }
}

/// Scatter plot; one circle per point, one color per series.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let frame = Frame::from_series(series)?;
    let mut out = String::new();
    chrome(&mut out, &frame, title, x_label, y_label);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for &(x, y) in &s.points {
            let _ = write!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{color}\"/>\n",
                frame.sx(x),
                frame.sy(y)
            );
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Line plot; points within each series are joined in x order, with
/// circle markers at the samples.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let frame = Frame::from_series(series)?;
    let mut out = String::new();
    chrome(&mut out, &frame, title, x_label, y_label);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", frame.sx(x), frame.sy(y)))
            .collect();
        if coords.len() > 1 {
            let _ = write!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                coords.join(" ")
            );
        }
        for &(x, y) in &pts {
            let _ = write!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                frame.sx(x),
                frame.sy(y)
            );
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Vec<Series> {
        vec![Series::new(
            "vp",
            vec![(1.0, 0.5), (2.0, 0.8), (4.0, 0.7)],
        )]
    }

    #[test]
    fn scatter_is_wellformed_and_labeled() {
        let svg = scatter_svg("gain vs fid", "fid", "gain", &demo()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(">gain vs fid</text>"));
        assert!(svg.contains(">fid</text>"));
        assert!(svg.contains(">gain</text>"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn emission_is_deterministic() {
        let a = scatter_svg("t", "x", "y", &demo()).unwrap();
        let b = scatter_svg("t", "x", "y", &demo()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn line_plot_joins_points_in_x_order() {
        let series = vec![Series::new("acc", vec![(4.0, 0.7), (1.0, 0.5), (2.0, 0.8)])];
        let svg = line_svg("acc vs p", "p", "accuracy", &series).unwrap();
        let poly_start = svg.find("<polyline points=\"").unwrap() + "<polyline points=\"".len();
        let poly = &svg[poly_start..svg[poly_start..].find('"').unwrap() + poly_start];
        let xs: Vec<f64> = poly
            .split(' ')
            .map(|pair| pair.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(xs.len(), 3);
        assert!(xs[0] < xs[1] && xs[1] < xs[2]);
    }

    #[test]
    fn multiple_series_get_a_legend_and_distinct_colors() {
        let series = vec![
            Series::new("padding", vec![(1.0, 0.4), (2.0, 0.6)]),
            Series::new("fixed_patch", vec![(1.0, 0.3), (2.0, 0.5)]),
        ];
        let svg = line_svg("sweep", "p", "acc", &series).unwrap();
        assert!(svg.contains(">padding</text>"));
        assert!(svg.contains(">fixed_patch</text>"));
        assert!(svg.contains(PALETTE[0]));
        assert!(svg.contains(PALETTE[1]));
    }

    #[test]
    fn degenerate_and_bad_inputs() {
        // a single point must not divide by a zero span
        let one = vec![Series::new("p", vec![(3.0, 3.0)])];
        let svg = scatter_svg("t", "x", "y", &one).unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert!(matches!(
            scatter_svg("t", "x", "y", &[]),
            Err(Error::Empty { .. })
        ));
        let nan = vec![Series::new("p", vec![(f64::NAN, 1.0)])];
        assert!(matches!(
            scatter_svg("t", "x", "y", &nan),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn points_land_inside_the_axes_box_and_titles_escape_xml() {
        let series = vec![Series::new("s", vec![(0.0, 0.0), (10.0, 1.0), (5.0, 0.2)])];
        let svg = scatter_svg("a < b & c", "x", "y", &series).unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
        for part in svg.split("<circle cx=\"").skip(1) {
            let cx: f64 = part.split('"').next().unwrap().parse().unwrap();
            assert!(cx >= MARGIN_L && cx <= WIDTH - MARGIN_R);
        }
    }
}
