//! Minimal PNG and SVG rendering of the evaluation figures: MAE-vs-distance
//! curves, error CDFs and signed-error scatter heatmaps.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

use crate::evalreport::CurvePoint;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            data: vec![255; w * h * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
        let (mut x0, mut y0) = (x0.round() as i64, y0.round() as i64);
        let (x1, y1) = (x1.round() as i64, y1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, rgb);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn square(&mut self, x: f64, y: f64, half: i64, rgb: [u8; 3]) {
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        for dy in -half..=half {
            for dx in -half..=half {
                self.put(cx + dx, cy + dy, rgb);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<(), PlotError> {
        let file = fs::File::create(path).map_err(|e| PlotError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| PlotError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        writer.write_image_data(&self.data).map_err(|e| PlotError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

const W: usize = 800;
const H: usize = 520;
const MARGIN: f64 = 60.0;

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi > lo {
        out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
    } else {
        (out_lo + out_hi) / 2.0
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PlotError> {
    fs::write(path, text).map_err(|e| PlotError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n",
        W / 2
    )
}

fn svg_axes(x_label: &str, y_label: &str, x0: f64, x1: f64, y0: f64, y1: f64) -> String {
    let mut s = String::new();
    let (l, r, t, b) = (MARGIN, W as f64 - MARGIN, MARGIN, H as f64 - MARGIN);
    s.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n"
    ));
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let xp = l + f * (r - l);
        let yp = b - f * (b - t);
        s.push_str(&format!(
            "<text x=\"{xp}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{xv:.0}</text>\n",
            b + 16.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{yp}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{yv:.1}</text>\n",
            l - 6.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{x_label}</text>\n",
        (l + r) / 2.0,
        H as f64 - 14.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (t + b) / 2.0,
        (t + b) / 2.0
    ));
    s
}

fn polyline_svg(points: &[(f64, f64)], rgb: [u8; 3]) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"rgb({},{},{})\" stroke-width=\"1.8\" points=\"{}\"/>\n",
        rgb[0],
        rgb[1],
        rgb[2],
        pts.join(" ")
    )
}

/// Series of (name, points) rendered as both `<stem>.png` and `<stem>.svg`.
pub fn plot_curves(
    stem: &Path,
    title: &str,
    series: &[(String, Vec<CurvePoint>)],
) -> Result<(), PlotError> {
    let pts: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(n, c)| {
            (
                n.clone(),
                c.iter()
                    .filter_map(|p| p.mae_db.map(|m| (p.distance_m, m)))
                    .collect(),
            )
        })
        .collect();
    plot_xy(stem, title, "distance to base station, m", "MAE, dB", &pts, false)
}

/// Empirical CDFs rendered as both `<stem>.png` and `<stem>.svg`.
pub fn plot_cdfs(
    stem: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<(), PlotError> {
    plot_xy(stem, title, "absolute error, dB", "P(error <= x)", series, true)
}

fn plot_xy(
    stem: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    steps: bool,
) -> Result<(), PlotError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if all.is_empty() {
        return Err(PlotError::Empty);
    }
    let x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).min(0.0);
    let x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
    let y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) * 1.05;

    let (l, r, t, b) = (MARGIN, W as f64 - MARGIN, MARGIN, H as f64 - MARGIN);
    let mut canvas = Canvas::new(W, H);
    canvas.line(l, b, r, b, [0, 0, 0]);
    canvas.line(l, t, l, b, [0, 0, 0]);
    let mut svg = svg_header(title);
    svg.push_str(&svg_axes(x_label, y_label, x0, x1, y0, y1));

    for (k, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let rgb = PALETTE[k % PALETTE.len()];
        let mut screen: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
        let mut last_y: Option<f64> = None;
        for &(x, y) in pts {
            let sx = scale(x, x0, x1, l, r);
            let sy = scale(y, y0, y1, b, t);
            if steps {
                if let Some(ly) = last_y {
                    screen.push((sx, ly));
                }
                last_y = Some(sy);
            }
            screen.push((sx, sy));
        }
        for w2 in screen.windows(2) {
            canvas.line(w2[0].0, w2[0].1, w2[1].0, w2[1].1, rgb);
        }
        svg.push_str(&polyline_svg(&screen, rgb));
        // Legend.
        let ly = t + 18.0 * k as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"rgb({},{},{})\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{name}</text>\n",
            r - 150.0,
            r - 120.0,
            rgb[0],
            rgb[1],
            rgb[2],
            r - 112.0,
            ly + 4.0
        ));
        for dy in 0..3 {
            canvas.line(r - 150.0, t + 18.0 * k as f64 + dy as f64, r - 120.0, t + 18.0 * k as f64 + dy as f64, rgb);
        }
    }
    svg.push_str("</svg>\n");
    canvas.save(&stem.with_extension("png"))?;
    write_text(&stem.with_extension("svg"), &svg)
}

/// Signed-error scatter: blue = overpredicted, red = underpredicted.
pub fn plot_heatmap(
    stem: &Path,
    title: &str,
    points: &[(f64, f64, f64)],
    bs: (f64, f64),
) -> Result<(), PlotError> {
    if points.is_empty() {
        return Err(PlotError::Empty);
    }
    let x0 = points.iter().map(|p| p.0).fold(bs.0, f64::min);
    let x1 = points.iter().map(|p| p.0).fold(bs.0, f64::max);
    let y0 = points.iter().map(|p| p.1).fold(bs.1, f64::min);
    let y1 = points.iter().map(|p| p.1).fold(bs.1, f64::max);
    let emax = points.iter().map(|p| p.2.abs()).fold(1e-9, f64::max);

    let (l, r, t, b) = (MARGIN, W as f64 - MARGIN, MARGIN, H as f64 - MARGIN);
    let mut canvas = Canvas::new(W, H);
    let mut svg = svg_header(title);
    svg.push_str(&svg_axes("east, m", "north, m", x0, x1, y0, y1));
    for &(e, n, err) in points {
        let sx = scale(e, x0, x1, l, r);
        let sy = scale(n, y0, y1, b, t);
        let f = (err / emax).clamp(-1.0, 1.0);
        // Diverging map: negative blue, positive red.
        let rgb = if f >= 0.0 {
            [255, (255.0 * (1.0 - f)) as u8, (255.0 * (1.0 - f)) as u8]
        } else {
            [(255.0 * (1.0 + f)) as u8, (255.0 * (1.0 + f)) as u8, 255]
        };
        canvas.square(sx, sy, 2, rgb);
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"4\" height=\"4\" fill=\"rgb({},{},{})\"/>\n",
            sx - 2.0,
            sy - 2.0,
            rgb[0],
            rgb[1],
            rgb[2]
        ));
    }
    // Base station marker.
    let bx = scale(bs.0, x0, x1, l, r);
    let by = scale(bs.1, y0, y1, b, t);
    canvas.square(bx, by, 4, [0, 0, 0]);
    svg.push_str(&format!(
        "<circle cx=\"{bx:.1}\" cy=\"{by:.1}\" r=\"5\" fill=\"black\"/>\n</svg>\n"
    ));
    canvas.save(&stem.with_extension("png"))?;
    write_text(&stem.with_extension("svg"), &svg)
}
