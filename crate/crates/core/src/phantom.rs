//! Synthetic longitudinal nodules: axis-aligned ellipses that grow between
//! two time points, rendered with blur and noise, and read by three
//! simulated radiologists whose diameters carry Gaussian jitter.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AnnotationRecord, DatasetManifest, Mask, NoduleEntry, NodulePatchPair, Patch, PatchFiles,
    RaterId, Split, GROWTH_THRESHOLD_MM, PATCH_SIDE,
};
use crate::infer::longest_diameter;
use crate::{Error, Result};

/// Pixel index of the row/column the ellipse is centred on.
const CENTRE: f64 = 15.0;
/// Largest semi-axis, in pixels, that keeps the ellipse inside the patch.
const MAX_SEMI_AXIS_PX: f64 = 14.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub nodule_id: String,
    /// Semi-axes `(major, minor)` at the baseline scan.
    pub base_axes_mm: (f64, f64),
    /// Increase of the major diameter per interval bin; the total growth is
    /// this times `tdiff_bin + 1`.
    pub growth_mm_per_bin: f64,
    /// Minor-axis growth as a fraction of major-axis growth.
    pub minor_growth_ratio: f64,
    pub texture_noise_sigma: f64,
    pub rater_jitter_sigma_mm: f64,
    pub background_intensity: f64,
    pub nodule_intensity: f64,
    pub spacing_mm: f64,
    /// Major axis along the image rows instead of the columns.
    pub vertical: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            nodule_id: "PH0000".into(),
            base_axes_mm: (4.0, 3.6),
            growth_mm_per_bin: 3.0,
            minor_growth_ratio: 0.85,
            texture_noise_sigma: 0.03,
            rater_jitter_sigma_mm: 0.97,
            background_intensity: 0.107,
            nodule_intensity: 0.74,
            spacing_mm: 1.0,
            vertical: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn axes_at(&self, tdiff_bin: u8) -> ((f64, f64), (f64, f64)) {
        let g = self.growth_mm_per_bin * f64::from(tdiff_bin + 1);
        let (a, b) = self.base_axes_mm;
        ((a, b), (a + g / 2.0, b + self.minor_growth_ratio * g / 2.0))
    }

    pub fn validate(&self, tdiff_bin: u8) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("{}: {m}", self.nodule_id)));
        if tdiff_bin > 3 {
            return bad(format!("tdiff bin {tdiff_bin} outside 0..=3"));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return bad(format!("spacing {} must be positive", self.spacing_mm));
        }
        let (a, b) = self.base_axes_mm;
        if !(a > 0.0 && b > 0.0 && b <= a) {
            return bad(format!("axes ({a}, {b}) must be positive with minor <= major"));
        }
        if !(self.rater_jitter_sigma_mm >= 0.0 && self.texture_noise_sigma >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.minor_growth_ratio) || self.growth_mm_per_bin < 0.0 {
            return bad("growth parameters out of range".into());
        }
        for v in [self.background_intensity, self.nodule_intensity] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("intensity {v} outside [0, 1]"));
            }
        }
        let (_, (a1, b1)) = self.axes_at(tdiff_bin);
        if a1.max(b1) / self.spacing_mm > MAX_SEMI_AXIS_PX {
            return bad(format!(
                "semi-axis {:.2} mm exceeds the {PATCH_SIDE}-pixel patch",
                a1.max(b1)
            ));
        }
        Ok(())
    }
}

/// Centre-inclusion raster of an ellipse. The centre sits on a pixel centre
/// or half a pixel off it along the major axis, whichever makes the extreme
/// axis pixels lie within half a pixel of the analytic tips. The rasterized
/// longest diameter then lies in `[floor(2a), 2a]` pixels.
pub fn rasterize_ellipse(semi_major_px: f64, semi_minor_px: f64, vertical: bool) -> Mask {
    let shift = if semi_major_px.fract() < 0.5 { 0.0 } else { 0.5 };
    let mut mask = Mask::empty(PATCH_SIDE, PATCH_SIDE);
    for y in 0..PATCH_SIDE {
        for x in 0..PATCH_SIDE {
            let (along, across) = if vertical { (y, x) } else { (x, y) };
            let u = (along as f64 - CENTRE - shift) / semi_major_px;
            let v = (across as f64 - CENTRE) / semi_minor_px;
            mask.set(y, x, u * u + v * v <= 1.0);
        }
    }
    mask
}

fn box_blur(img: &[f64]) -> Vec<f64> {
    let n = PATCH_SIDE as i64;
    let at = |y: i64, x: i64| img[(y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize];
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            out[(y * n + x) as usize] = s / 9.0;
        }
    }
    out
}

fn render(mask: &Mask, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Patch> {
    let base: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| {
            if b {
                spec.nodule_intensity
            } else {
                spec.background_intensity
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.texture_noise_sigma)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let values = box_blur(&base)
        .into_iter()
        .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Patch::new(values)
}

/// Day ranges of the four interval bins; the open-ended last bin is capped.
pub fn days_range(tdiff_bin: u8) -> (u32, u32) {
    match tdiff_bin {
        0 => (30, 183),
        1 => (184, 366),
        2 => (367, 731),
        _ => (732, 1100),
    }
}

/// Renders one nodule and three rater readings. Deterministic in `spec`.
pub fn gen_phantom_pair(
    spec: &PhantomSpec,
    tdiff_bin: u8,
) -> Result<(NodulePatchPair, [AnnotationRecord; 3])> {
    spec.validate(tdiff_bin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ((a0, b0), (a1, b1)) = spec.axes_at(tdiff_bin);
    let s = spec.spacing_mm;
    let y0 = rasterize_ellipse(a0 / s, b0 / s, spec.vertical);
    let y1 = rasterize_ellipse(a1 / s, b1 / s, spec.vertical);
    let (lo, hi) = days_range(tdiff_bin);
    let days_between = rng.random_range(lo..=hi);
    let i0 = render(&y0, spec, &mut rng)?;
    let i1 = render(&y1, spec, &mut rng)?;
    let d0 = longest_diameter(&y0, s);
    let d1 = longest_diameter(&y1, s);
    let jitter = Normal::new(0.0, spec.rater_jitter_sigma_mm)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut read = |rater| {
        let r0 = (d0 + jitter.sample(&mut rng)).max(0.0);
        let r1 = (d1 + jitter.sample(&mut rng)).max(0.0);
        AnnotationRecord::new(spec.nodule_id.clone(), rater, r0, r1)
    };
    let records = [read(RaterId::Rx0)?, read(RaterId::Rx1)?, read(RaterId::Rx2)?];
    let pair = NodulePatchPair {
        nodule_id: spec.nodule_id.clone(),
        i0,
        i1,
        y0,
        y1,
        spacing_mm: s,
        days_between,
    };
    pair.validate()?;
    Ok((pair, records))
}

/// Population-level parameters from which per-nodule specs are drawn.
///
/// Growing nodules are solid (bright) and grow `growing_rate_mm` per bin;
/// stable ones are ground-glass (faint) and barely change. The exact rate is
/// hidden from the baseline image, which leaves genuine uncertainty about
/// growth size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub spacing_mm: f64,
    pub d0_range_mm: (f64, f64),
    pub axis_ratio_range: (f64, f64),
    pub growing_rate_mm: (f64, f64),
    pub stable_rate_mm: (f64, f64),
    pub solid_intensity: f64,
    pub ground_glass_intensity: f64,
    pub background_intensity: f64,
    pub texture_noise_sigma: f64,
    pub rater_jitter_sigma_mm: f64,
    pub minor_growth_ratio: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            spacing_mm: 1.0,
            d0_range_mm: (5.0, 10.0),
            axis_ratio_range: (0.85, 1.0),
            growing_rate_mm: (2.6, 3.4),
            stable_rate_mm: (0.0, 0.3),
            solid_intensity: 0.74,
            ground_glass_intensity: 0.39,
            background_intensity: 0.107,
            texture_noise_sigma: 0.03,
            rater_jitter_sigma_mm: 0.97,
            minor_growth_ratio: 0.85,
        }
    }
}

/// Noise-free facts about a generated nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub nodule_id: String,
    pub tdiff_bin: u8,
    pub growing: bool,
    pub d0_mm: f64,
    pub d1_mm: f64,
    pub semi_major_mm: (f64, f64),
    pub spec: PhantomSpec,
}

impl PhantomTruth {
    pub fn growth_mm(&self) -> f64 {
        self.d1_mm - self.d0_mm
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub manifest: DatasetManifest,
    pub truths: Vec<PhantomTruth>,
}

const MAX_ATTEMPTS: usize = 200;

fn draw_nodule(
    cohort: &CohortSpec,
    index: usize,
    growing: bool,
    seed: u64,
) -> Result<(NoduleEntry, PhantomTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    let nodule_id = format!("PH{index:04}");
    for _ in 0..MAX_ATTEMPTS {
        let tdiff_bin: u8 = rng.random_range(0..4);
        let d0 = rng.random_range(cohort.d0_range_mm.0..=cohort.d0_range_mm.1);
        let ratio = rng.random_range(cohort.axis_ratio_range.0..=cohort.axis_ratio_range.1);
        let (lo, hi) = if growing {
            cohort.growing_rate_mm
        } else {
            cohort.stable_rate_mm
        };
        let spec = PhantomSpec {
            nodule_id: nodule_id.clone(),
            base_axes_mm: (d0 / 2.0, ratio * d0 / 2.0),
            growth_mm_per_bin: rng.random_range(lo..=hi),
            minor_growth_ratio: cohort.minor_growth_ratio,
            texture_noise_sigma: cohort.texture_noise_sigma,
            rater_jitter_sigma_mm: cohort.rater_jitter_sigma_mm,
            background_intensity: cohort.background_intensity,
            nodule_intensity: if growing {
                cohort.solid_intensity
            } else {
                cohort.ground_glass_intensity
            },
            spacing_mm: cohort.spacing_mm,
            vertical: rng.random_bool(0.5),
            seed: rng.next_u64(),
        };
        if spec.validate(tdiff_bin).is_err() {
            continue;
        }
        let (pair, records) = gen_phantom_pair(&spec, tdiff_bin)?;
        let d0_true = longest_diameter(&pair.y0, pair.spacing_mm);
        let d1_true = longest_diameter(&pair.y1, pair.spacing_mm);
        if (d1_true - d0_true > GROWTH_THRESHOLD_MM) != growing {
            continue;
        }
        let truth = PhantomTruth {
            nodule_id: nodule_id.clone(),
            tdiff_bin,
            growing,
            d0_mm: d0_true,
            d1_mm: d1_true,
            semi_major_mm: (spec.axes_at(tdiff_bin).0 .0, spec.axes_at(tdiff_bin).1 .0),
            spec,
        };
        let entry = NoduleEntry {
            files: PatchFiles::for_nodule(&nodule_id),
            pair,
            annotations: records.to_vec(),
        };
        return Ok((entry, truth));
    }
    Err(Error::InvalidInput(format!(
        "could not draw a {} nodule for {nodule_id} within {MAX_ATTEMPTS} attempts",
        if growing { "growing" } else { "stable" }
    )))
}

/// Cohort of `n_nodules` with `round(n * growth_mix)` growing nodules. Each
/// nodule is drawn from its own stream seeded with `seed + index`; every
/// nodule is assigned to the training split.
pub fn generate_cohort_with(
    cohort: &CohortSpec,
    n_nodules: usize,
    growth_mix: f64,
    seed: u64,
) -> Result<Cohort> {
    if n_nodules < 2 {
        return Err(Error::InvalidInput(format!(
            "a cohort needs at least 2 nodules, got {n_nodules}"
        )));
    }
    if !(0.0..=1.0).contains(&growth_mix) {
        return Err(Error::InvalidInput(format!(
            "growth mix {growth_mix} outside [0, 1]"
        )));
    }
    let n_growing = (n_nodules as f64 * growth_mix).round() as usize;
    let mut order: Vec<usize> = (0..n_nodules).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut growing = vec![false; n_nodules];
    for &i in &order[..n_growing] {
        growing[i] = true;
    }
    let mut entries = Vec::with_capacity(n_nodules);
    let mut truths = Vec::with_capacity(n_nodules);
    for (i, &g) in growing.iter().enumerate() {
        let (e, t) = draw_nodule(cohort, i, g, seed)?;
        entries.push(e);
        truths.push(t);
    }
    Ok(Cohort {
        manifest: DatasetManifest::uniform(entries, Split::Train)?,
        truths,
    })
}

pub fn generate_cohort(n_nodules: usize, growth_mix: f64, seed: u64) -> Result<DatasetManifest> {
    Ok(generate_cohort_with(&CohortSpec::default(), n_nodules, growth_mix, seed)?.manifest)
}

/// Per-rater noise estimated from pairwise disagreement: for two raters with
/// independent errors of std σ, `E[(a − b)²] = 2σ²`. Pools D0 and D1 over
/// all rater pairs of every nodule.
pub fn pairwise_rater_std(manifest: &DatasetManifest) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for e in manifest.entries() {
        let a = &e.annotations;
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                for (x, y) in [(a[i].d0_mm, a[j].d0_mm), (a[i].d1_mm, a[j].d1_mm)] {
                    sum += (x - y).powi(2) / 2.0;
                    count += 1;
                }
            }
        }
    }
    (sum / count as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_growth_and_no_jitter() {
        let spec = PhantomSpec {
            growth_mm_per_bin: 0.0,
            rater_jitter_sigma_mm: 0.0,
            ..PhantomSpec::default()
        };
        let (pair, recs) = gen_phantom_pair(&spec, 2).unwrap();
        let truth = longest_diameter(&pair.y0, 1.0);
        for r in &recs {
            assert_eq!(r.d0_mm, truth);
            assert_eq!(r.d1_mm, truth);
            assert_eq!(r.growth_mm(), 0.0);
        }
        assert_eq!(pair.y0, pair.y1);
    }

    #[test]
    fn raster_diameter_brackets_the_major_axis() {
        for a10 in 10..=145 {
            let a = a10 as f64 / 10.0;
            for ratio in [0.6, 0.85, 1.0] {
                for vertical in [false, true] {
                    let m = rasterize_ellipse(a, ratio * a, vertical);
                    let d = longest_diameter(&m, 1.0);
                    assert!(d >= (2.0 * a).floor() && d <= 2.0 * a, "a = {a}, d = {d}");
                }
            }
        }
    }

    #[test]
    fn oversized_ellipse_is_rejected() {
        let spec = PhantomSpec {
            base_axes_mm: (10.0, 9.0),
            growth_mm_per_bin: 3.0,
            ..PhantomSpec::default()
        };
        assert!(gen_phantom_pair(&spec, 3).is_err());
        assert!(gen_phantom_pair(&spec, 0).is_ok());
    }

    #[test]
    fn days_fall_in_the_requested_bin() {
        for bin in 0..4u8 {
            for seed in 0..10 {
                let spec = PhantomSpec {
                    seed,
                    ..PhantomSpec::default()
                };
                let (pair, _) = gen_phantom_pair(&spec, bin).unwrap();
                let got = crate::data::tdiff_bin(i64::from(pair.days_between)).unwrap();
                assert_eq!(got, bin);
            }
        }
    }

    #[test]
    fn cohort_rejects_bad_arguments() {
        assert!(generate_cohort(1, 0.5, 0).is_err());
        assert!(generate_cohort(10, 1.5, 0).is_err());
        assert!(generate_cohort(10, -0.1, 0).is_err());
    }
}
