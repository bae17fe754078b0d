//! Minimal raster charts and qualitative panels written as PNG.
//!
//! Charts carry no text; series colors follow [`PALETTE`] in the order the
//! series are given, and the numbers themselves are always written next to
//! the image as JSON/text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::datagen::Sample;
use crate::error::{input_err, MagnetError, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const MARGIN: i64 = 24;

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| MagnetError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::Other, e),
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        put(img, x, y, c);
        put(img, x, y + 1, c);
    }
}

fn axes(img: &mut RgbImage) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    line(img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), [0, 0, 0]);
    line(img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), [0, 0, 0]);
}

/// One polyline per series, x = index, y scaled to the joint finite range.
pub fn line_chart(path: &Path, series: &[Vec<f64>], width: u32, height: u32) -> Result<()> {
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    axes(&mut img);
    if lo.is_finite() {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (width as i64 - 2 * MARGIN, height as i64 - 2 * MARGIN);
        for (k, s) in series.iter().enumerate() {
            let c = PALETTE[k % PALETTE.len()];
            let n = s.len().max(2) - 1;
            let pt = |i: usize, v: f64| {
                (
                    MARGIN + (i as i64 * w) / n as i64,
                    MARGIN + h - ((v - lo) / span * h as f64).round() as i64,
                )
            };
            for i in 1..s.len() {
                if s[i - 1].is_finite() && s[i].is_finite() {
                    line(&mut img, pt(i - 1, s[i - 1]), pt(i, s[i]), c);
                }
            }
            if s.len() == 1 && s[0].is_finite() {
                let (x, y) = pt(0, s[0]);
                line(&mut img, (x - 2, y), (x + 2, y), c);
            }
        }
    }
    save(&img, path)
}

/// Grouped bars: one group per entry of `groups`, one bar per value, colored
/// by position within the group. Values are drawn on a `[0, max]` scale, or
/// `[min, max]` when some are negative.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>], width: u32, height: u32) -> Result<()> {
    if groups.is_empty() {
        return input_err("bar chart without data");
    }
    let vals = groups.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (w, h) = (width as i64 - 2 * MARGIN, height as i64 - 2 * MARGIN);
    let y_of = |v: f64| MARGIN + h - ((v - lo) / span * h as f64).round() as i64;
    let slot = w / groups.len() as i64;
    for (gi, g) in groups.iter().enumerate() {
        let bw = (slot * 3 / 4) / g.len().max(1) as i64;
        for (bi, &v) in g.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x0 = MARGIN + gi as i64 * slot + slot / 8 + bi as i64 * bw;
            let (ya, yb) = (y_of(v.max(0.0)), y_of(v.min(0.0)));
            for x in x0..x0 + bw.max(1) - 1 {
                for y in ya..=yb {
                    put(&mut img, x, y, PALETTE[bi % PALETTE.len()]);
                }
            }
        }
    }
    axes(&mut img);
    line(&mut img, (MARGIN, y_of(0.0)), (MARGIN + w, y_of(0.0)), [0, 0, 0]);
    save(&img, path)
}

/// Image, ground truth and prediction side by side, each upscaled by `zoom`.
pub fn triptych(path: &Path, sample: &Sample, pred: &[bool], zoom: u32) -> Result<()> {
    let s = sample.size as u32;
    if pred.len() != (s * s) as usize {
        return input_err(format!("prediction has {} pixels, expected {}", pred.len(), s * s));
    }
    let gap = 4;
    let mut img = RgbImage::from_pixel(3 * s * zoom + 2 * gap, s * zoom, Rgb([255, 255, 255]));
    for r in 0..s {
        for c in 0..s {
            let i = (r * s + c) as usize;
            let px = [
                sample.pixels[3 * i],
                sample.pixels[3 * i + 1],
                sample.pixels[3 * i + 2],
            ];
            let gt = if sample.mask[i] != 0 { [255; 3] } else { [0; 3] };
            let pr = match (pred[i], sample.mask[i] != 0) {
                (true, true) => [255, 255, 255],
                (true, false) => [230, 60, 60],
                (false, true) => [60, 60, 230],
                (false, false) => [0, 0, 0],
            };
            for (panel, color) in [px, gt, pr].into_iter().enumerate() {
                let x0 = panel as u32 * (s * zoom + gap) + c * zoom;
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        img.put_pixel(x0 + dx, r * zoom + dy, Rgb(color));
                    }
                }
            }
        }
    }
    save(&img, path)
}
