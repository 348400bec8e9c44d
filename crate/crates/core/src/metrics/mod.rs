//! Growth-classification, size, segmentation and sample-diversity metrics,
//! ground-truth resolution across raters, and bootstrap aggregation.

mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Mask, GROWTH_THRESHOLD_MM};
use crate::{Error, Result};

pub use report::{
    bootstrap, evaluate, BootstrapStat, EvalOptions, GrowthDecision, MetricReport, MetricValue,
    ModeMetrics, NoduleRecord, StratumRow, METRIC_NAMES,
};

/// Spread below which an interval is treated as a point.
pub const DEGENERATE_STD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Tp,
    Fp,
    Tn,
    Fn,
}

impl Outcome {
    pub fn from_labels(gt_positive: bool, est_positive: bool) -> Self {
        match (gt_positive, est_positive) {
            (true, true) => Outcome::Tp,
            (true, false) => Outcome::Fn,
            (false, true) => Outcome::Fp,
            (false, false) => Outcome::Tn,
        }
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Outcome::Tp | Outcome::Tn)
    }
}

pub(crate) fn positive(growth_mm: f64) -> bool {
    growth_mm > GROWTH_THRESHOLD_MM
}

/// Both values are positive when strictly above 2 mm.
pub fn classify_point(gt_growth_mm: f64, est_growth_mm: f64) -> Outcome {
    Outcome::from_labels(positive(gt_growth_mm), positive(est_growth_mm))
}

/// Classification at the conservative edge of `mean ± 2 std`: a positive
/// ground truth needs the lower edge above 2 mm, a negative one needs the
/// upper edge at or below it.
pub fn classify_2std(gt_growth_mm: f64, mean_mm: f64, std_mm: f64) -> Outcome {
    if positive(gt_growth_mm) {
        Outcome::from_labels(true, positive(mean_mm - 2.0 * std_mm))
    } else {
        Outcome::from_labels(false, positive(mean_mm + 2.0 * std_mm))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Tp => self.tp += 1,
            Outcome::Fp => self.fp += 1,
            Outcome::Tn => self.tn += 1,
            Outcome::Fn => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl FromIterator<Outcome> for ConfusionCounts {
    fn from_iter<I: IntoIterator<Item = Outcome>>(iter: I) -> Self {
        let mut c = ConfusionCounts::default();
        for o in iter {
            c.add(o);
        }
        c
    }
}

/// Classifier rates; `None` marks an empty denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub bacc: Option<f64>,
    pub prec: Option<f64>,
    pub rec: Option<f64>,
    pub spec: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn rates(c: &ConfusionCounts) -> Rates {
    let rec = ratio(c.tp, c.tp + c.fn_);
    let spec = ratio(c.tn, c.tn + c.fp);
    Rates {
        bacc: rec.zip(spec).map(|(r, s)| (r + s) / 2.0),
        prec: ratio(c.tp, c.tp + c.fp),
        rec,
        spec,
    }
}

/// Mean absolute and mean squared error of paired growth values.
pub fn size_errors(gt: &[f64], est: &[f64]) -> Result<(f64, f64)> {
    if gt.len() != est.len() || gt.is_empty() {
        return Err(Error::InvalidInput(format!(
            "size errors need equal nonempty lists, got {} and {}",
            gt.len(),
            est.len()
        )));
    }
    let n = gt.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (g, e) in gt.iter().zip(est) {
        let d = e - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, sq / n))
}

/// One-dimensional Mahalanobis test `|gt − mean| / std ≤ 2`.
pub fn within_2std(gt_growth_mm: f64, mean_mm: f64, std_mm: f64) -> bool {
    let d = (gt_growth_mm - mean_mm).abs();
    if std_mm < DEGENERATE_STD {
        d < DEGENERATE_STD
    } else {
        d / std_mm <= 2.0
    }
}

fn check_same(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::InvalidInput(format!(
            "masks of size {}×{} and {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `2|a∩b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection(b) as f64 / total as f64)
}

/// `|a∩b| / |a∪b|`, with two empty masks scoring 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Squared generalized energy distance and its three terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ged {
    pub ged2: f64,
    /// `2 · mean d(Y′, Y)`.
    pub term_cross: f64,
    /// `mean d(Y′, Y′)` over all ordered pairs.
    pub term_pred: f64,
    /// `mean d(Y, Y)` over all ordered pairs.
    pub term_gt: f64,
}

impl Ged {
    fn from_terms(term_cross: f64, term_pred: f64, term_gt: f64) -> Self {
        Self {
            ged2: term_cross - term_pred - term_gt,
            term_cross,
            term_pred,
            term_gt,
        }
    }
}

fn check_sets(samples: &[Mask], gts: &[Mask]) -> Result<()> {
    if samples.is_empty() || gts.is_empty() {
        return Err(Error::InvalidInput("GED needs at least one mask per set".into()));
    }
    let first = &samples[0];
    for m in samples.iter().chain(gts) {
        check_same(first, m)?;
    }
    Ok(())
}

/// Direct double loops over every pair with `d = 1 − IoU`.
pub fn ged_brute_force(samples: &[Mask], gts: &[Mask]) -> Result<Ged> {
    check_sets(samples, gts)?;
    let mean_d = |xs: &[Mask], ys: &[Mask]| -> Result<f64> {
        let mut total = 0.0;
        for x in xs {
            for y in ys {
                total += 1.0 - iou(x, y)?;
            }
        }
        Ok(total / (xs.len() * ys.len()) as f64)
    };
    Ok(Ged::from_terms(
        2.0 * mean_d(samples, gts)?,
        mean_d(samples, samples)?,
        mean_d(gts, gts)?,
    ))
}

/// Bit-packed mask with its area.
struct Packed {
    words: Vec<u64>,
    area: u32,
}

impl Packed {
    fn new(m: &Mask) -> Self {
        let mut words = vec![0u64; m.bits().len().div_ceil(64)];
        for (i, &b) in m.bits().iter().enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        let area = words.iter().map(|w| w.count_ones()).sum();
        Self { words, area }
    }

    fn distance(&self, other: &Packed) -> f64 {
        let inter: u32 = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum();
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            1.0 - f64::from(inter) / f64::from(union)
        }
    }
}

/// Distinct masks with multiplicities, in first-seen order.
fn distinct(masks: &[Mask]) -> Vec<(Packed, f64)> {
    let mut index: HashMap<&[bool], usize> = HashMap::new();
    let mut out: Vec<(Packed, f64)> = Vec::new();
    for m in masks {
        match index.get(m.bits()) {
            Some(&i) => out[i].1 += 1.0,
            None => {
                index.insert(m.bits(), out.len());
                out.push((Packed::new(m), 1.0));
            }
        }
    }
    out
}

/// Mean pairwise distance within a multiset, using symmetry and `d(x, x) = 0`.
fn within_mean(set: &[(Packed, f64)], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            total += 2.0 * set[i].1 * set[j].1 * set[i].0.distance(&set[j].0);
        }
    }
    total / (n * n) as f64
}

/// Generalized energy distance with `d = 1 − IoU`, averaging over all
/// ordered pairs. Identical masks are grouped, so many repeated samples
/// cost little.
pub fn ged(samples: &[Mask], gts: &[Mask]) -> Result<Ged> {
    check_sets(samples, gts)?;
    let s = distinct(samples);
    let g = distinct(gts);
    let mut cross = 0.0;
    for (a, wa) in &s {
        for (b, wb) in &g {
            cross += wa * wb * a.distance(b);
        }
    }
    cross /= (samples.len() * gts.len()) as f64;
    Ok(Ged::from_terms(
        2.0 * cross,
        within_mean(&s, samples.len()),
        within_mean(&g, gts.len()),
    ))
}

/// Ground-truth choice among the raters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroundTruthMode {
    #[serde(rename = "RX0")]
    Rx0,
    #[serde(rename = "RX1")]
    Rx1,
    #[serde(rename = "RX2")]
    Rx2,
    #[serde(rename = "MEAN")]
    Mean,
    #[serde(rename = "CLOSEST")]
    Closest,
}

impl GroundTruthMode {
    pub const ALL: [GroundTruthMode; 5] = [
        GroundTruthMode::Rx0,
        GroundTruthMode::Rx1,
        GroundTruthMode::Rx2,
        GroundTruthMode::Mean,
        GroundTruthMode::Closest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroundTruthMode::Rx0 => "RX0",
            GroundTruthMode::Rx1 => "RX1",
            GroundTruthMode::Rx2 => "RX2",
            GroundTruthMode::Mean => "MEAN",
            GroundTruthMode::Closest => "CLOSEST",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == up)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ground-truth mode {s:?}")))
    }

    fn rater(self) -> Option<usize> {
        match self {
            GroundTruthMode::Rx0 => Some(0),
            GroundTruthMode::Rx1 => Some(1),
            GroundTruthMode::Rx2 => Some(2),
            _ => None,
        }
    }
}

/// Growth prediction used to pick the closest rater.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prediction {
    /// Single value; closeness is the absolute difference.
    Deterministic(f64),
    /// Sample distribution; closeness is the Mahalanobis distance.
    Generative { mean: f64, std: f64 },
}

impl Prediction {
    fn distance(self, gt: f64) -> f64 {
        match self {
            Prediction::Deterministic(v) => (gt - v).abs(),
            Prediction::Generative { mean, std } => {
                let d = (gt - mean).abs();
                if std < DEGENERATE_STD {
                    d / DEGENERATE_STD
                } else {
                    d / std
                }
            }
        }
    }
}

/// Index of the rater growth closest to the prediction; ties go to the
/// lowest index.
pub fn resolve_closest(rater_growth_mm: &[f64], prediction: Prediction) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in rater_growth_mm.iter().enumerate() {
        let d = prediction.distance(g);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidInput("no rater annotations to choose from".into()))
}

/// Index of the ground-truth segmentation with the highest mean Dice against
/// the samples; ties go to the lowest index.
pub fn resolve_closest_segmentation(samples: &[Mask], gts: &[Mask]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let mut total = 0.0;
        for s in samples {
            total += dice(s, g)?;
        }
        let mean = total / samples.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((i, mean));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidInput("no ground-truth segmentations".into()))
}

/// Ground-truth growth for `mode`; `rater_growth_mm[r]` is rater `r`'s
/// reading, if any.
pub fn resolve_growth(mode: GroundTruthMode, rater_growth_mm: &[Option<f64>], prediction: Prediction) -> Result<f64> {
    let available: Vec<f64> = rater_growth_mm.iter().flatten().copied().collect();
    if available.is_empty() {
        return Err(Error::InvalidInput("no rater annotations".into()));
    }
    match mode {
        GroundTruthMode::Mean => Ok(available.iter().sum::<f64>() / available.len() as f64),
        GroundTruthMode::Closest => Ok(available[resolve_closest(&available, prediction)?]),
        m => {
            let r = m.rater().expect("rater mode");
            rater_growth_mm.get(r).copied().flatten().ok_or_else(|| {
                Error::InvalidInput(format!("no annotation from rater {}", m.name()))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Mask {
        Mask::new(bits.len(), 1, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn point_classification_examples() {
        assert_eq!(classify_point(4.2, 4.2), Outcome::Tp);
        assert_eq!(classify_point(0.8, 0.2), Outcome::Tn);
        assert_eq!(classify_point(2.0, 2.0), Outcome::Tn);
    }

    #[test]
    fn interval_classification_examples() {
        assert_eq!(classify_2std(5.0, 5.0, 1.0), Outcome::Tp);
        assert_eq!(classify_2std(5.0, 4.0, 1.5), Outcome::Fn);
        assert_eq!(classify_2std(0.0, 0.0, 0.0), Outcome::Tn);
        assert_eq!(classify_2std(1.0, 1.5, 0.5), Outcome::Fp);
    }

    #[test]
    fn rate_examples() {
        let c = ConfusionCounts { tp: 7, fn_: 3, tn: 8, fp: 2 };
        let r = rates(&c);
        assert!((r.rec.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.spec.unwrap() - 0.8).abs() < 1e-12);
        assert!((r.bacc.unwrap() - 0.75).abs() < 1e-12);
        let chance = rates(&ConfusionCounts { tp: 4, fn_: 4, tn: 3, fp: 3 });
        assert_eq!(chance.bacc, Some(0.5));
        let none_predicted = rates(&ConfusionCounts { tp: 0, fn_: 2, tn: 3, fp: 0 });
        assert_eq!(none_predicted.prec, None);
    }

    #[test]
    fn size_error_examples() {
        assert_eq!(size_errors(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), (1.0, 1.0));
        assert_eq!(size_errors(&[0.0], &[3.0]).unwrap(), (3.0, 9.0));
        assert!(size_errors(&[], &[]).is_err());
    }

    #[test]
    fn within_interval_boundaries() {
        assert!(within_2std(1.0, 1.0, 0.5));
        assert!(within_2std(2.0, 1.0, 0.5));
        assert!(!within_2std(2.5, 1.0, 0.5));
        assert!(within_2std(1.0, 1.0, 0.0));
        assert!(!within_2std(1.1, 1.0, 0.0));
    }

    #[test]
    fn overlap_examples() {
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1]);
        let e = mask(&[0, 0, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(&[1, 0, 0, 0])).unwrap(), 0.5);
    }

    #[test]
    fn ged_of_identical_singletons_is_zero() {
        let a = mask(&[1, 0, 1, 0]);
        let g = ged(&[a.clone()], &[a]).unwrap();
        assert_eq!(g, Ged::from_terms(0.0, 0.0, 0.0));
    }

    #[test]
    fn closest_examples() {
        let gen = Prediction::Generative { mean: 4.8, std: 0.1 };
        assert_eq!(resolve_closest(&[1.0, 5.0], gen).unwrap(), 1);
        assert_eq!(resolve_closest(&[2.0, 3.0], Prediction::Deterministic(2.4)).unwrap(), 0);
        assert_eq!(resolve_closest(&[3.0], Prediction::Deterministic(-9.0)).unwrap(), 0);
        assert_eq!(resolve_closest(&[1.0, 3.0], Prediction::Deterministic(2.0)).unwrap(), 0);
    }

    #[test]
    fn mode_resolution() {
        let p = Prediction::Deterministic(0.0);
        let g = [Some(1.0), Some(2.0), Some(6.0)];
        assert_eq!(resolve_growth(GroundTruthMode::Mean, &g, p).unwrap(), 3.0);
        assert_eq!(resolve_growth(GroundTruthMode::Rx2, &g, p).unwrap(), 6.0);
        assert_eq!(resolve_growth(GroundTruthMode::Closest, &g, p).unwrap(), 1.0);
        let partial = [None, Some(4.0), None];
        assert!(resolve_growth(GroundTruthMode::Rx0, &partial, p).is_err());
        assert_eq!(resolve_growth(GroundTruthMode::Mean, &partial, p).unwrap(), 4.0);
        assert_eq!(GroundTruthMode::parse("closest").unwrap(), GroundTruthMode::Closest);
    }
}
