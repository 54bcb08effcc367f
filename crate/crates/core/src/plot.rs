//! Minimal self-contained SVG line charts. No display server, no external
//! renderer: the output is a single static file with axes, a legend, and
//! optional vertical event marks.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::io::path_str;

const WIDTH: f64 = 880.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 52.0;

/// One polyline; points are (x, y) in data coordinates.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Any SVG color.
    pub color: String,
    pub dashed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Vertical marker lines at these x positions.
    pub marks: Vec<f64>,
    pub mark_label: String,
}

fn data_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        // degenerate (flat) range: open it up so the line sits mid-plot
        lo -= 1.0;
        hi += 1.0;
    }
    Some((lo, hi))
}

/// Round tick spacing to 1/2/5 × 10^k covering the range with ~`n` steps.
fn tick_step(lo: f64, hi: f64, n: usize) -> f64 {
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        let s = format!("{v:.1}");
        s.strip_suffix(".0").unwrap_or(&s).to_string()
    } else {
        format!("{v:.3}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the chart to an SVG document string. The same spec always
/// renders the same bytes.
pub fn render_svg(spec: &PlotSpec) -> Result<String> {
    if spec.series.is_empty() {
        return Err(CoreError::config("plot needs at least one series".to_string()));
    }
    let xs = spec
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .chain(spec.marks.iter().copied());
    let ys = spec.series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x_lo, x_hi) =
        data_range(xs).ok_or_else(|| CoreError::config("plot has no finite points".to_string()))?;
    let (y_lo, y_hi) =
        data_range(ys).ok_or_else(|| CoreError::config("plot has no finite points".to_string()))?;
    // pad the y range so lines don't hug the frame
    let y_pad = 0.06 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - y_pad, y_hi + y_pad);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = move |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = move |y: f64| MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut out = String::new();
    let w = &mut out;
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    )
    .unwrap();
    writeln!(w, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").unwrap();
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        xml_escape(&spec.title)
    )
    .unwrap();

    // gridlines + ticks
    let x_step = tick_step(x_lo, x_hi, 8);
    let y_step = tick_step(y_lo, y_hi, 6);
    let mut t = (x_lo / x_step).ceil() * x_step;
    while t <= x_hi + 1e-9 * x_step {
        let px = sx(t);
        writeln!(
            w,
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            MARGIN_TOP,
            MARGIN_TOP + plot_h
        )
        .unwrap();
        writeln!(
            w,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            MARGIN_TOP + plot_h + 16.0,
            fmt_tick(t)
        )
        .unwrap();
        t += x_step;
    }
    let mut t = (y_lo / y_step).ceil() * y_step;
    while t <= y_hi + 1e-9 * y_step {
        let py = sy(t);
        writeln!(
            w,
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ddd\"/>",
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w
        )
        .unwrap();
        writeln!(
            w,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN_LEFT - 6.0,
            py + 4.0,
            fmt_tick(t)
        )
        .unwrap();
        t += y_step;
    }

    // event marks behind the data
    for &mx in &spec.marks {
        let px = sx(mx);
        writeln!(
            w,
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" \
             stroke=\"#c0392b\" stroke-dasharray=\"4 3\" stroke-width=\"1.2\"/>",
            MARGIN_TOP,
            MARGIN_TOP + plot_h
        )
        .unwrap();
    }

    for s in &spec.series {
        let mut pts = String::new();
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                write!(pts, "{:.2},{:.2} ", sx(x), sy(y)).unwrap();
            }
        }
        let dash = if s.dashed { " stroke-dasharray=\"6 3\"" } else { "" };
        writeln!(
            w,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"{dash} points=\"{}\"/>",
            s.color,
            pts.trim_end()
        )
        .unwrap();
    }

    // frame
    writeln!(
        w,
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#333\"/>"
    )
    .unwrap();

    // axis labels
    writeln!(
        w,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        xml_escape(&spec.x_label)
    )
    .unwrap();
    writeln!(
        w,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        xml_escape(&spec.y_label)
    )
    .unwrap();

    // legend
    let mut ly = MARGIN_TOP + 14.0;
    let lx = MARGIN_LEFT + plot_w - 170.0;
    for s in &spec.series {
        let dash = if s.dashed { " stroke-dasharray=\"6 3\"" } else { "" };
        writeln!(
            w,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{}\" \
             stroke-width=\"1.6\"{dash}/>",
            lx + 26.0,
            s.color
        )
        .unwrap();
        writeln!(
            w,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            lx + 32.0,
            ly + 4.0,
            xml_escape(&s.label)
        )
        .unwrap();
        ly += 18.0;
    }
    if !spec.marks.is_empty() && !spec.mark_label.is_empty() {
        writeln!(
            w,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"#c0392b\" \
             stroke-dasharray=\"4 3\" stroke-width=\"1.2\"/>",
            lx + 26.0
        )
        .unwrap();
        writeln!(
            w,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            lx + 32.0,
            ly + 4.0,
            xml_escape(&spec.mark_label)
        )
        .unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    Ok(out)
}

pub fn write_svg(path: &Path, spec: &PlotSpec) -> Result<()> {
    let svg = render_svg(spec)?;
    std::fs::write(path, svg).map_err(|e| CoreError::io(path_str(path), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PlotSpec {
        PlotSpec {
            title: "flow at node 3".to_string(),
            x_label: "window".to_string(),
            y_label: "flow".to_string(),
            series: vec![
                Series {
                    label: "observed".to_string(),
                    points: (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin() * 40.0 + 60.0)).collect(),
                    color: "#1f77b4".to_string(),
                    dashed: false,
                },
                Series {
                    label: "predicted".to_string(),
                    points: (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin() * 38.0 + 61.0)).collect(),
                    color: "#ff7f0e".to_string(),
                    dashed: true,
                },
            ],
            marks: vec![12.0, 30.0],
            mark_label: "incident onset".to_string(),
        }
    }

    #[test]
    fn renders_a_complete_document() {
        let svg = render_svg(&spec()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        // two marks plus one legend swatch for them
        assert_eq!(svg.matches("stroke-dasharray=\"4 3\"").count(), 3);
        assert!(svg.contains("incident onset"));
        assert!(svg.contains("observed"));
        assert!(svg.contains("predicted"));
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_svg(&spec()).unwrap(), render_svg(&spec()).unwrap());
    }

    #[test]
    fn flat_series_still_renders() {
        let s = PlotSpec {
            series: vec![Series {
                label: "const".to_string(),
                points: vec![(0.0, 5.0), (1.0, 5.0)],
                color: "black".to_string(),
                dashed: false,
            }],
            ..PlotSpec::default()
        };
        let svg = render_svg(&s).unwrap();
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn empty_plot_is_rejected() {
        assert!(render_svg(&PlotSpec::default()).is_err());
        let only_nan = PlotSpec {
            series: vec![Series {
                label: "nan".to_string(),
                points: vec![(f64::NAN, f64::NAN)],
                color: "black".to_string(),
                dashed: false,
            }],
            ..PlotSpec::default()
        };
        assert!(render_svg(&only_nan).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let s = PlotSpec {
            title: "a < b & c".to_string(),
            series: vec![Series {
                label: "x".to_string(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
                color: "black".to_string(),
                dashed: false,
            }],
            ..PlotSpec::default()
        };
        let svg = render_svg(&s).unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
    }

    #[test]
    fn writes_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        write_svg(&path, &spec()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("</svg>"));
    }
}
