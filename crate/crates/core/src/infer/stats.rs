use crate::data::Mask;
use crate::{Error, Result};

/// Largest pixel-centre distance between two foreground pixels, in mm.
///
/// Only pixels on the 4-connected boundary can be endpoints of the longest
/// chord, so the search runs over those; distances are compared as exact
/// integer squares and converted once.
pub fn longest_diameter(mask: &Mask, spacing_mm: f64) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let mut boundary: Vec<(i64, i64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let interior = y > 0
                && x > 0
                && y + 1 < h
                && x + 1 < w
                && mask.get(y - 1, x)
                && mask.get(y + 1, x)
                && mask.get(y, x - 1)
                && mask.get(y, x + 1);
            if !interior {
                boundary.push((y as i64, x as i64));
            }
        }
    }
    let mut best: i64 = 0;
    for (i, &(y0, x0)) in boundary.iter().enumerate() {
        for &(y1, x1) in &boundary[i + 1..] {
            let d = (y1 - y0).pow(2) + (x1 - x0).pow(2);
            best = best.max(d);
        }
    }
    (best as f64).sqrt() * spacing_mm
}

/// Population mean and standard deviation.
///
/// Values are shifted by the first one, so identical inputs give that value
/// and a spread of exactly zero.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let Some(&origin) = values.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = values.len() as f64;
    let shift = values.iter().map(|v| v - origin).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - origin - shift).powi(2)).sum::<f64>() / n;
    (origin + shift, var.sqrt())
}

/// `Δᵢ = D1'ᵢ − D0`, summarized by mean and population std.
pub fn growth_stats(diameters_mm: &[f64], d0_mm: f64) -> Result<(f64, f64)> {
    if diameters_mm.is_empty() {
        return Err(Error::InvalidInput("growth_stats needs at least one sample".into()));
    }
    let deltas: Vec<f64> = diameters_mm.iter().map(|d| d - d0_mm).collect();
    Ok(mean_std(&deltas))
}

/// Logistic growth probability centred on the 2 mm threshold.
pub fn growth_logistic(delta_mm: f64) -> f64 {
    1.0 / (1.0 + (-delta_mm + 2.0).exp())
}

pub fn growth_probability(deltas_mm: &[f64]) -> Result<(f64, f64)> {
    if deltas_mm.is_empty() {
        return Err(Error::InvalidInput(
            "growth_probability needs at least one sample".into(),
        ));
    }
    let p: Vec<f64> = deltas_mm.iter().map(|&d| growth_logistic(d)).collect();
    Ok(mean_std(&p))
}

/// Pixel-wise mean and population std of binary masks.
pub fn appearance_maps(masks: &[Mask]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidInput("appearance_maps needs at least one mask".into()))?;
    if masks.iter().any(|m| !m.same_size(first)) {
        return Err(Error::InvalidInput("masks differ in size".into()));
    }
    let n = first.bits().len();
    let mut counts = vec![0usize; n];
    for m in masks {
        for (c, &b) in counts.iter_mut().zip(m.bits()) {
            *c += usize::from(b);
        }
    }
    let k = masks.len() as f64;
    let mean: Vec<f64> = counts.iter().map(|&c| c as f64 / k).collect();
    // Bernoulli moments: var = p(1 - p) exactly for binary samples.
    let std = mean.iter().map(|&p| (p * (1.0 - p)).max(0.0).sqrt()).collect();
    Ok((mean, std))
}
