use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::{GrayImage, Luma};
use uhpnet::data::GROWTH_THRESHOLD_MM;

/// Pixels per map cell in exported maps.
const MAP_ZOOM: u32 = 8;
const HIST_WIDTH: u32 = 480;
const HIST_HEIGHT: u32 = 240;
pub const HIST_BINS: usize = 40;

/// Saves a square map as an enlarged 8-bit grayscale PNG, mapping
/// `[0, full_scale]` to `[0, 255]`.
pub fn save_map_png(values: &[f64], full_scale: f64, path: &Path) -> Result<()> {
    let side = (values.len() as f64).sqrt().round() as usize;
    ensure!(
        side * side == values.len() && side > 0,
        "map with {} values is not square",
        values.len()
    );
    let z = MAP_ZOOM;
    let img = GrayImage::from_fn(side as u32 * z, side as u32 * z, |x, y| {
        let v = values[(y / z) as usize * side + (x / z) as usize] / full_scale;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Equal-width bins covering `values`; a degenerate range is widened to 1 mm
/// on each side.
pub fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() {
        (-1.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    (lo, width, counts)
}

pub fn histogram_csv(lo: f64, width: f64, counts: &[usize]) -> String {
    let mut s = String::from("# bin_start_mm,bin_end_mm,count\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        let _ = writeln!(s, "{a},{},{c}", a + width);
    }
    s
}

/// Bar chart of growth deltas, with a gray line at the growth threshold
/// when it falls inside the plotted range.
pub fn save_histogram_png(lo: f64, width: f64, counts: &[usize], path: &Path) -> Result<()> {
    let bins = counts.len() as u32;
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar = HIST_WIDTH / bins;
    let mut img = GrayImage::from_pixel(bar * bins, HIST_HEIGHT, Luma([255]));
    for (i, &c) in counts.iter().enumerate() {
        let h = ((c as f64 / peak) * (HIST_HEIGHT - 1) as f64).round() as u32;
        for x in i as u32 * bar..(i as u32 + 1) * bar - 1 {
            for y in HIST_HEIGHT - h..HIST_HEIGHT {
                img.put_pixel(x, y, Luma([0]));
            }
        }
    }
    let t = (GROWTH_THRESHOLD_MM - lo) / (width * bins as f64);
    if (0.0..1.0).contains(&t) {
        let x = (t * (bar * bins) as f64) as u32;
        for y in 0..HIST_HEIGHT {
            img.put_pixel(x, y, Luma([128]));
        }
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}
