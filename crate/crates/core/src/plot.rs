//! Static PNG output: heatmap overlays and small line charts. There is no
//! font rendering; labels live in the CSV written next to each chart.

use image::{Rgb, RgbImage as Canvas};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_circle_mut, draw_line_segment_mut};
use std::path::Path;

use crate::data::{Mask, RgbImage};
use crate::error::{argument, Result};
use crate::prior::Heatmap;

/// Blue to red ramp over `[0, 1]`.
fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Heatmap grid upsampled by nearest neighbour onto the image, blended at
/// `alpha`, then the whole picture scaled up by `zoom`.
pub fn heatmap_overlay(image: &RgbImage, heatmap: &Heatmap, alpha: f64, zoom: u32) -> Result<Canvas> {
    if heatmap.grid_h == 0 || heatmap.grid_w == 0 || zoom == 0 {
        return argument("empty heatmap or zero zoom");
    }
    let grid = heatmap.grid();
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = (image.height(), image.width());
    let canvas = Canvas::from_fn(w as u32 * zoom, h as u32 * zoom, |x, y| {
        let (py, px) = ((y / zoom) as usize, (x / zoom) as usize);
        let gy = (py * heatmap.grid_h / h).min(heatmap.grid_h - 1);
        let gx = (px * heatmap.grid_w / w).min(heatmap.grid_w - 1);
        let heat = ramp((heatmap.at(gy, gx) - lo) / span);
        let base = image.pixel(py, px);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = (1.0 - alpha) * base[c] as f64 + alpha * heat[c];
            out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(out)
    });
    Ok(canvas)
}

/// One polyline; `hollow` markers distinguish a second family of series.
#[derive(Debug, Clone)]
pub struct Series {
    pub values: Vec<f64>,
    pub color: [u8; 3],
    pub hollow: bool,
}

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Line chart with equally spaced x positions and a y range covering all
/// values plus a dotted zero line when zero lies in range.
pub fn line_chart(series: &[Series], width: u32, height: u32) -> Result<Canvas> {
    let points = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    if points < 2 || width < 40 || height < 40 {
        return argument("a chart needs two or more points and at least 40x40 pixels");
    }
    let values = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return argument("no finite values to plot");
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let margin = 20.0;
    let (fw, fh) = (width as f32 - 2.0 * margin, height as f32 - 2.0 * margin);
    let at = |i: usize, v: f64| {
        let x = margin + fw * i as f32 / (points - 1) as f32;
        let y = margin + fh * (1.0 - ((v - lo) / (hi - lo)) as f32);
        (x, y)
    };

    let mut canvas = Canvas::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let bottom = height as f32 - margin;
    draw_line_segment_mut(&mut canvas, (margin, margin), (margin, bottom), axis);
    draw_line_segment_mut(&mut canvas, (margin, bottom), (width as f32 - margin, bottom), axis);
    for i in 0..points {
        let (x, _) = at(i, lo);
        draw_line_segment_mut(&mut canvas, (x, bottom), (x, bottom + 4.0), axis);
    }
    if lo < 0.0 && hi > 0.0 {
        let (_, y) = at(0, 0.0);
        let mut x = margin;
        while x < width as f32 - margin {
            draw_line_segment_mut(&mut canvas, (x, y), (x + 3.0, y), Rgb([160, 160, 160]));
            x += 8.0;
        }
    }
    for s in series {
        let color = Rgb(s.color);
        let pts: Vec<(f32, f32)> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| at(i, v))
            .collect();
        for pair in pts.windows(2) {
            draw_line_segment_mut(&mut canvas, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            let c = (x.round() as i32, y.round() as i32);
            if s.hollow {
                draw_hollow_circle_mut(&mut canvas, c, 3, color);
            } else {
                draw_filled_circle_mut(&mut canvas, c, 3, color);
            }
        }
    }
    Ok(canvas)
}

/// Foreground white on black.
pub fn mask_image(mask: &Mask) -> Canvas {
    Canvas::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        if mask.get(y as usize, x as usize) {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

pub fn save_png(canvas: &Canvas, path: impl AsRef<Path>) -> Result<()> {
    canvas.save(path.as_ref())?;
    Ok(())
}
