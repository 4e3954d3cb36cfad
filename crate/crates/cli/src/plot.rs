//! Precision-recall curve images.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};

const SIZE: u32 = 256;
const MARGIN: u32 = 24;

fn to_px(r: f64, p: f64) -> (i64, i64) {
    let span = (SIZE - 2 * MARGIN) as f64;
    let x = MARGIN as f64 + r.clamp(0.0, 1.0) * span;
    let y = (SIZE - MARGIN) as f64 - p.clamp(0.0, 1.0) * span;
    (x.round() as i64, y.round() as i64)
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=steps {
        let x = a.0 + (b.0 - a.0) * i / steps;
        let y = a.1 + (b.1 - a.1) * i / steps;
        if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Draws the interpolated curve as recall/precision steps, starting at
/// recall 0 with the first precision.
pub fn pr_curve_png(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), axis);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), axis);
    let curve = Rgb([200, 30, 30]);
    let mut prev = (0.0, points.first().map_or(0.0, |p| p.1));
    for &(r, p) in points {
        line(&mut img, to_px(prev.0, prev.1), to_px(prev.0, p), curve);
        line(&mut img, to_px(prev.0, p), to_px(r, p), curve);
        prev = (r, p);
    }
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
