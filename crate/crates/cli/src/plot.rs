//! Minimal line-plot rasterizer writing PNG files. No text: axes, ticks, lines and markers.

use std::path::Path;

use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
    pub markers: bool,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.x0) / (self.x1 - self.x0);
        let fy = (y - self.y0) / (self.y1 - self.y0);
        let px = MARGIN as f64 + fx * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - fy * (H - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
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

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Draws all series on shared axes and writes a PNG.
pub fn line_plot(series: &[Series], path: &Path) -> image::ImageResult<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let frame = Frame { x0, x1, y0, y1 };

    let black = [0, 0, 0];
    let grey = [225, 225, 225];
    let (left, bottom) = (MARGIN as i64, (H - MARGIN) as i64);
    let (right, top) = ((W - MARGIN) as i64, MARGIN as i64);
    for k in 0..=5 {
        let x = left + (right - left) * k / 5;
        let y = bottom - (bottom - top) * k / 5;
        line(&mut img, (x, top), (x, bottom), grey);
        line(&mut img, (left, y), (right, y), grey);
        line(&mut img, (x, bottom), (x, bottom + 5), black);
        line(&mut img, (left - 5, y), (left, y), black);
    }
    line(&mut img, (left, bottom), (right, bottom), black);
    line(&mut img, (left, bottom), (left, top), black);

    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| frame.to_px(p.0, p.1))
            .collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], s.color);
        }
        if s.markers {
            for &(px, py) in &pts {
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        put(&mut img, px + dx, py + dy, s.color);
                    }
                }
            }
        }
    }
    img.save(path)
}
