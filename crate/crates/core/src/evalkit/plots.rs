//! Frame strips as PNG and simple charts as SVG.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;

use crate::env::Frame;
use crate::{Error, Result};

/// Grid of frames, one row per slice of `rows`, with a 1 px white gutter.
/// Missing cells stay black.
pub fn frame_grid(rows: &[Vec<Frame>]) -> Result<RgbImage> {
    let size = rows.iter().flatten().next().map(|f| f.size).ok_or_else(|| Error::Config("no frames to draw".into()))?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let cell = size + 1;
    let mut img = RgbImage::from_pixel((cols * cell + 1) as u32, (rows.len() * cell + 1) as u32, image::Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols {
            for y in 0..size {
                for x in 0..size {
                    let px = row.get(c).map_or([0, 0, 0], |f| f.pixel(y, x));
                    img.put_pixel((c * cell + 1 + x) as u32, (r * cell + 1 + y) as u32, image::Rgb(px));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_frame_grid(rows: &[Vec<Frame>], path: &Path) -> Result<()> {
    frame_grid(rows)?.save(path)?;
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame_svg(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    let _ = writeln!(s, "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", W - 2.0 * PAD, H - 2.0 * PAD);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>", H / 2.0, H / 2.0, escape(ylabel));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_ticks(s: &mut String, (xlo, xhi): (f64, f64), (ylo, yhi): (f64, f64)) {
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{}\" text-anchor=\"middle\">{xlo:.3}</text>", H - PAD + 16.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xhi:.3}</text>", W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{ylo:.3}</text>", PAD - 4.0, H - PAD);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yhi:.3}</text>", PAD - 4.0, PAD + 10.0);
}

/// Scatter plot with points coloured from blue (low) to red (high) by `colour`.
pub fn scatter_svg(points: &[[f64; 2]], colour: &[f64], title: &str, xlabel: &str, ylabel: &str) -> String {
    let xb = bounds(points.iter().map(|p| p[0]));
    let yb = bounds(points.iter().map(|p| p[1]));
    let cb = bounds(colour.iter().copied());
    let mut s = frame_svg(title, xlabel, ylabel);
    axis_ticks(&mut s, xb, yb);
    for (p, &c) in points.iter().zip(colour) {
        let x = PAD + (p[0] - xb.0) / (xb.1 - xb.0) * (W - 2.0 * PAD);
        let y = H - PAD - (p[1] - yb.0) / (yb.1 - yb.0) * (H - 2.0 * PAD);
        let t = (c - cb.0) / (cb.1 - cb.0);
        let (r, b) = ((255.0 * t) as u8, (255.0 * (1.0 - t)) as u8);
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"rgb({r},60,{b})\" fill-opacity=\"0.7\"/>");
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of named series over shared x values.
pub fn lines_svg(xs: &[f64], series: &[(String, Vec<f64>)], title: &str, xlabel: &str, ylabel: &str) -> String {
    const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let xb = bounds(xs.iter().copied());
    let yb = bounds(series.iter().flat_map(|(_, v)| v.iter().copied()).chain(std::iter::once(0.0)));
    let mut s = frame_svg(title, xlabel, ylabel);
    axis_ticks(&mut s, xb, yb);
    for (i, (name, ys)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let px = PAD + (x - xb.0) / (xb.1 - xb.0) * (W - 2.0 * PAD);
                let py = H - PAD - (y - yb.0) / (yb.1 - yb.0) * (H - 2.0 * PAD);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>", PAD + 8.0, PAD + 16.0 * (i + 1) as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
