//! Minimal static chart rendering for the report command: polyline loss
//! curves and metric bars on a plain canvas, no text layer.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

const SERIES_COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

fn blank() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    // axes
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([80, 80, 80]));
    }
    for y in MARGIN..HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([80, 80, 80]));
    }
    img
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as u32).max(1);
    for s in 0..=steps {
        let t = f64::from(s) / f64::from(steps);
        let x = (a.0 + (b.0 - a.0) * t).round() as i64;
        let y = (a.1 + (b.1 - a.1) * t).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Render named series as polylines over a shared y-scale.
pub fn line_chart(series: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut img = blank();
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|x| x.is_finite())
        .collect();
    if max_len >= 2 && !finite.is_empty() {
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
        let plot_w = f64::from(WIDTH - 2 * MARGIN);
        let plot_h = f64::from(HEIGHT - 2 * MARGIN);
        for (si, (_, values)) in series.iter().enumerate() {
            let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
            let pt = |i: usize, v: f64| {
                (
                    f64::from(MARGIN) + plot_w * i as f64 / (max_len - 1) as f64,
                    f64::from(HEIGHT - MARGIN) - plot_h * (v - lo) / (hi - lo),
                )
            };
            for w in values.windows(2).enumerate().map(|(i, w)| (i, w[0], w[1])) {
                let (i, v0, v1) = w;
                if v0.is_finite() && v1.is_finite() {
                    draw_line(&mut img, pt(i, v0), pt(i + 1, v1), color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Pipeline(format!("{}: {e}", path.display())))
}

/// Render named values in [0, 1] as vertical bars.
pub fn bar_chart(bars: &[(String, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut img = blank();
    if !bars.is_empty() {
        let plot_w = WIDTH - 2 * MARGIN;
        let plot_h = f64::from(HEIGHT - 2 * MARGIN);
        let slot = plot_w / bars.len() as u32;
        let bar_w = (slot * 3 / 5).max(1);
        for (i, (_, v)) in bars.iter().enumerate() {
            let color = Rgb(SERIES_COLORS[i % SERIES_COLORS.len()]);
            let h = (plot_h * v.clamp(0.0, 1.0)).round() as u32;
            let x0 = MARGIN + i as u32 * slot + (slot - bar_w) / 2;
            for x in x0..x0 + bar_w {
                for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Pipeline(format!("{}: {e}", path.display())))
}
