//! Hand-rolled SVG scatter plots for the 2-D tasks: a classified
//! background raster showing a model's decision regions, with one circle
//! element per data point on top.

use revcal_core::model::Model;
use revcal_core::{Result, Tensor};

/// Data-space viewport of a plot.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    /// Tight box around the points, padded by 5% a side.
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a (f64, f64)>) -> Bounds {
        let mut b = Bounds {
            xmin: f64::INFINITY,
            xmax: f64::NEG_INFINITY,
            ymin: f64::INFINITY,
            ymax: f64::NEG_INFINITY,
        };
        for (x, y) in points {
            b.xmin = b.xmin.min(*x);
            b.xmax = b.xmax.max(*x);
            b.ymin = b.ymin.min(*y);
            b.ymax = b.ymax.max(*y);
        }
        if !b.xmin.is_finite() {
            return Bounds {
                xmin: -1.0,
                xmax: 1.0,
                ymin: -1.0,
                ymax: 1.0,
            };
        }
        b.pad(0.05)
    }

    fn pad(mut self, frac: f64) -> Bounds {
        let dx = (self.xmax - self.xmin).max(1e-9) * frac;
        let dy = (self.ymax - self.ymin).max(1e-9) * frac;
        self.xmin -= dx;
        self.xmax += dx;
        self.ymin -= dy;
        self.ymax += dy;
        self
    }

    pub fn union(a: Bounds, b: Bounds) -> Bounds {
        Bounds {
            xmin: a.xmin.min(b.xmin),
            xmax: a.xmax.max(b.xmax),
            ymin: a.ymin.min(b.ymin),
            ymax: a.ymax.max(b.ymax),
        }
    }
}

/// Side length of the classified background grid.
pub const BOUNDARY_RES: usize = 200;

/// Classifies the centers of a `res` x `res` grid over the bounds.
/// Row-major, row 0 at the top of the plot (largest y).
pub fn boundary_grid(model: &Model, b: &Bounds, res: usize) -> Result<Vec<usize>> {
    let mut coords = Vec::with_capacity(res * res * 2);
    for gy in 0..res {
        let y = b.ymax - (gy as f64 + 0.5) / res as f64 * (b.ymax - b.ymin);
        for gx in 0..res {
            let x = b.xmin + (gx as f64 + 0.5) / res as f64 * (b.xmax - b.xmin);
            coords.push(x);
            coords.push(y);
        }
    }
    let grid = Tensor::from_vec(vec![res * res, 2], coords)?;
    model.classify(&grid)
}

const POINT_COLORS: [&str; 6] = [
    "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
];
const FIELD_COLORS: [&str; 6] = [
    "#f8d9bf", "#c8e8df", "#dddbee", "#f9d2e6", "#dcecc8", "#f7e9c0",
];

const PLOT: f64 = 400.0;
const X0: f64 = 45.0;
const Y0: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one scatter plot. `raster` carries the grid resolution and the
/// row-major class of every cell; `points` are (x, y, class) triples and
/// become exactly one `<circle>` element each.
pub fn scatter_svg(
    title: &str,
    b: &Bounds,
    raster: Option<(usize, &[usize])>,
    points: &[(f64, f64, usize)],
) -> String {
    let w = X0 + PLOT + 20.0;
    let h = Y0 + PLOT + 40.0;
    let px = |x: f64| X0 + (x - b.xmin) / (b.xmax - b.xmin) * PLOT;
    let py = |y: f64| Y0 + (b.ymax - y) / (b.ymax - b.ymin) * PLOT;

    let mut s = String::with_capacity(16 * 1024);
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"#ffffff\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"28\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{}</text>\n",
        X0 + PLOT / 2.0,
        escape(title)
    ));

    // Background decision regions, run-length merged per row.
    if let Some((res, classes)) = raster {
        let cell = PLOT / res as f64;
        for gy in 0..res {
            let row = &classes[gy * res..(gy + 1) * res];
            let y = Y0 + gy as f64 * cell;
            let mut start = 0;
            for gx in 1..=res {
                if gx == res || row[gx] != row[start] {
                    let x = X0 + start as f64 * cell;
                    let wid = (gx - start) as f64 * cell;
                    s.push_str(&format!(
                        "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{wid:.2}\" \
                         height=\"{:.2}\" fill=\"{}\"/>\n",
                        cell + 0.4,
                        FIELD_COLORS[row[start] % FIELD_COLORS.len()]
                    ));
                    start = gx;
                }
            }
        }
    }

    s.push_str(&format!(
        "<rect x=\"{X0:.1}\" y=\"{Y0:.1}\" width=\"{PLOT:.1}\" height=\"{PLOT:.1}\" \
         fill=\"none\" stroke=\"#555555\" stroke-width=\"1\"/>\n"
    ));

    // Corner coordinate labels.
    let label = |x: f64, y: f64, anchor: &str, text: String| {
        format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"#444444\" text-anchor=\"{anchor}\">{text}</text>\n"
        )
    };
    s.push_str(&label(X0, Y0 + PLOT + 16.0, "start", format!("{:.2}", b.xmin)));
    s.push_str(&label(X0 + PLOT, Y0 + PLOT + 16.0, "end", format!("{:.2}", b.xmax)));
    s.push_str(&label(X0 - 5.0, Y0 + PLOT, "end", format!("{:.2}", b.ymin)));
    s.push_str(&label(X0 - 5.0, Y0 + 10.0, "end", format!("{:.2}", b.ymax)));

    for (x, y, class) in points {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.2\" fill=\"{}\" fill-opacity=\"0.9\" \
             stroke=\"#333333\" stroke-width=\"0.6\"/>\n",
            px(*x),
            py(*y),
            POINT_COLORS[class % POINT_COLORS.len()]
        ));
    }
    s.push_str("</svg>\n");
    s
}
