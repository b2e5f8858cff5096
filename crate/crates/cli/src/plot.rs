//! Minimal line plots rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::CliError;

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: f64 = 40.0;
const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub markers: bool,
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Plots `series` on shared axes; `log` plots `ln x` against `ln y`.
pub fn render(path: &Path, series: &[Series<'_>], log: bool) -> Result<(), CliError> {
    let tf = |p: &(f64, f64)| if log { (p.0.ln(), p.1.ln()) } else { *p };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(tf))
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, W as f64 - MARGIN, H as f64 - MARGIN);
    for (a, b) in [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))] {
        line(&mut img, a, b, black);
    }
    if !pts.is_empty() {
        let (mut lx, mut hx, mut ly, mut hy) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &pts {
            lx = lx.min(p.0);
            hx = hx.max(p.0);
            ly = ly.min(p.1);
            hy = hy.max(p.1);
        }
        let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let ((lx, hx), (ly, hy)) = (pad(lx, hx), pad(ly, hy));
        let map = |p: (f64, f64)| (x0 + (p.0 - lx) / (hx - lx) * (x1 - x0), y1 - (p.1 - ly) / (hy - ly) * (y1 - y0));
        for (k, s) in series.iter().enumerate() {
            let c = Rgb(COLORS[k % COLORS.len()]);
            let sp: Vec<(f64, f64)> = s.points.iter().map(tf).filter(|p| p.0.is_finite() && p.1.is_finite()).map(map).collect();
            for w in sp.windows(2) {
                line(&mut img, w[0], w[1], c);
            }
            if s.markers {
                for p in &sp {
                    for d in -3..=3 {
                        line(&mut img, (p.0 + d as f64, p.1 - 3.0), (p.0 + d as f64, p.1 + 3.0), c);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}
