//! Nodule patches, radiologist annotations, conditioning encodings and the
//! leak-free train/test split.

mod grid;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grid::{Mask, Patch, PATCH_PIXELS, PATCH_SIDE};
pub use manifest::{
    load_manifest, read_f32_grid, save_manifest, write_f32_grid, PatchFiles, MANIFEST_HEADER,
};

use crate::{Error, Result};

/// Clinically significant growth threshold in millimetres (strict `>`).
pub const GROWTH_THRESHOLD_MM: f64 = 2.0;

/// Lung window applied before scaling to the unit interval.
pub const HU_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// Co-registered baseline/follow-up patches of one nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct NodulePatchPair {
    pub nodule_id: String,
    pub i0: Patch,
    pub i1: Patch,
    pub y0: Mask,
    pub y1: Mask,
    pub spacing_mm: f64,
    pub days_between: u32,
}

impl NodulePatchPair {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("Y0", &self.y0), ("Y1", &self.y1)] {
            if m.width() != PATCH_SIDE || m.height() != PATCH_SIDE {
                return Err(Error::Validation(format!(
                    "{}: {name} is {}x{}, expected {PATCH_SIDE}x{PATCH_SIDE}",
                    self.nodule_id,
                    m.width(),
                    m.height()
                )));
            }
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::Validation(format!(
                "{}: spacing {} mm must be positive",
                self.nodule_id, self.spacing_mm
            )));
        }
        if self.days_between < 1 {
            return Err(Error::Validation(format!(
                "{}: days_between must be at least 1",
                self.nodule_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RaterId {
    Rx0,
    Rx1,
    Rx2,
}

impl RaterId {
    pub const ALL: [RaterId; 3] = [RaterId::Rx0, RaterId::Rx1, RaterId::Rx2];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RaterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RX{}", self.index())
    }
}

impl FromStr for RaterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RX0" => Ok(RaterId::Rx0),
            "RX1" => Ok(RaterId::Rx1),
            "RX2" => Ok(RaterId::Rx2),
            other => Err(Error::InvalidInput(format!("unknown rater id {other:?}"))),
        }
    }
}

/// One radiologist's diameter readings for a nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub nodule_id: String,
    pub rater: RaterId,
    pub d0_mm: f64,
    pub d1_mm: f64,
}

impl AnnotationRecord {
    pub fn new(nodule_id: impl Into<String>, rater: RaterId, d0_mm: f64, d1_mm: f64) -> Result<Self> {
        let nodule_id = nodule_id.into();
        for (name, v) in [("D0", d0_mm), ("D1", d1_mm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "{nodule_id}/{rater}: {name} = {v} must be a nonnegative number"
                )));
            }
        }
        Ok(Self {
            nodule_id,
            rater,
            d0_mm,
            d1_mm,
        })
    }

    pub fn growth_mm(&self) -> f64 {
        self.d1_mm - self.d0_mm
    }

    pub fn growth_label(&self) -> bool {
        self.growth_mm() > GROWTH_THRESHOLD_MM
    }
}

/// Normalized scalars concatenated at the encoder bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub tdiff_norm: f64,
    pub sz0_norm: f64,
}

impl ConditioningVector {
    pub fn new(tdiff_norm: f64, sz0_norm: f64) -> Result<Self> {
        if ![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].contains(&tdiff_norm) {
            return Err(Error::InvalidInput(format!(
                "tdiff {tdiff_norm} is not one of 0, 1/3, 2/3, 1"
            )));
        }
        if !(0.0..=1.0).contains(&sz0_norm) {
            return Err(Error::InvalidInput(format!("sz0 {sz0_norm} outside [0, 1]")));
        }
        Ok(Self {
            tdiff_norm,
            sz0_norm,
        })
    }

    pub fn from_measurements(days_between: i64, d0_mm: f64, norm: &NormalizationConstants) -> Result<Self> {
        Self::new(
            encode_tdiff(days_between)?,
            normalize_sz0(d0_mm, norm.sz0_min_mm, norm.sz0_max_mm)?,
        )
    }
}

/// Training-split extremes of D0 used to scale `sz0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub sz0_min_mm: f64,
    pub sz0_max_mm: f64,
}

/// Clips raw Hounsfield units to the lung window and maps it onto `[0, 1]`.
pub fn normalize_intensity(raw_hu: &[f64]) -> Result<Patch> {
    if let Some(v) = raw_hu.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite HU value {v}")));
    }
    let (lo, hi) = HU_WINDOW;
    Patch::new(
        raw_hu
            .iter()
            .map(|&v| ((v.clamp(lo, hi) - lo) / (hi - lo)) as f32)
            .collect(),
    )
}

/// Guideline interval index: up to 6 months, 12 months, 24 months, beyond.
pub fn tdiff_bin(days_between: i64) -> Result<u8> {
    match days_between {
        d if d < 1 => Err(Error::InvalidInput(format!(
            "days_between must be positive, got {d}"
        ))),
        1..=183 => Ok(0),
        184..=366 => Ok(1),
        367..=731 => Ok(2),
        _ => Ok(3),
    }
}

pub fn encode_tdiff(days_between: i64) -> Result<f64> {
    Ok(f64::from(tdiff_bin(days_between)?) / 3.0)
}

/// `(d0 - min) / (max - min)` clamped to `[0, 1]`.
pub fn normalize_sz0(d0_mm: f64, train_min_mm: f64, train_max_mm: f64) -> Result<f64> {
    if !d0_mm.is_finite() {
        return Err(Error::InvalidInput(format!("D0 {d0_mm} is not finite")));
    }
    if !(train_max_mm > train_min_mm) || !train_min_mm.is_finite() || !train_max_mm.is_finite() {
        return Err(Error::InvalidInput(format!(
            "degenerate sz0 range [{train_min_mm}, {train_max_mm}]"
        )));
    }
    Ok(((d0_mm - train_min_mm) / (train_max_mm - train_min_mm)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// A nodule with its patches, the files they live in, and every rater's
/// readings.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleEntry {
    pub pair: NodulePatchPair,
    pub annotations: Vec<AnnotationRecord>,
    pub files: PatchFiles,
}

impl NoduleEntry {
    pub fn id(&self) -> &str {
        &self.pair.nodule_id
    }

    pub fn annotation(&self, rater: RaterId) -> Option<&AnnotationRecord> {
        self.annotations.iter().find(|a| a.rater == rater)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<NoduleEntry>,
    split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    /// Validates every invariant: unique ids, annotations referencing their
    /// own nodule, one reading per rater, and a split for every nodule.
    pub fn new(entries: Vec<NoduleEntry>, split: BTreeMap<String, Split>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            e.pair.validate()?;
            if !seen.insert(e.id().to_string()) {
                return Err(Error::Validation(format!("duplicate nodule {}", e.id())));
            }
            if e.annotations.is_empty() {
                return Err(Error::Validation(format!("{} has no annotations", e.id())));
            }
            let mut raters = BTreeSet::new();
            for a in &e.annotations {
                if a.nodule_id != e.id() {
                    return Err(Error::Validation(format!(
                        "annotation for {} filed under {}",
                        a.nodule_id,
                        e.id()
                    )));
                }
                if !raters.insert(a.rater) {
                    return Err(Error::Validation(format!(
                        "{} has two readings from {}",
                        e.id(),
                        a.rater
                    )));
                }
            }
            if !split.contains_key(e.id()) {
                return Err(Error::Validation(format!("{} has no split", e.id())));
            }
        }
        if let Some(orphan) = split.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::Validation(format!(
                "split assigned to unknown nodule {orphan}"
            )));
        }
        Ok(Self { entries, split })
    }

    /// Every nodule assigned to `split`.
    pub fn uniform(entries: Vec<NoduleEntry>, split: Split) -> Result<Self> {
        let map = entries.iter().map(|e| (e.id().to_string(), split)).collect();
        Self::new(entries, map)
    }

    pub fn entries(&self) -> &[NoduleEntry] {
        &self.entries
    }

    pub fn entry(&self, nodule_id: &str) -> Option<&NoduleEntry> {
        self.entries.iter().find(|e| e.id() == nodule_id)
    }

    pub fn split_of(&self, nodule_id: &str) -> Option<Split> {
        self.split.get(nodule_id).copied()
    }

    pub fn split_assignment(&self) -> &BTreeMap<String, Split> {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.entries.iter().map(|e| e.annotations.len()).sum()
    }

    /// Entries of one split, as a manifest of its own.
    pub fn subset(&self, which: Split) -> DatasetManifest {
        let entries: Vec<_> = self
            .entries
            .iter()
            .filter(|e| self.split[e.id()] == which)
            .cloned()
            .collect();
        let split = entries.iter().map(|e| (e.id().to_string(), which)).collect();
        DatasetManifest { entries, split }
    }

    /// D0 extremes over training-split annotations, or `None` when no
    /// training nodule exists or all readings coincide.
    pub fn normalization(&self) -> Option<NormalizationConstants> {
        let d0s = self
            .entries
            .iter()
            .filter(|e| self.split[e.id()] == Split::Train)
            .flat_map(|e| e.annotations.iter().map(|a| a.d0_mm));
        let (lo, hi) = d0s.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        });
        (hi > lo).then_some(NormalizationConstants {
            sz0_min_mm: lo,
            sz0_max_mm: hi,
        })
    }
}

/// Count of nodule ids assigned to more than one split across `manifests`.
pub fn split_leakage(manifests: &[&DatasetManifest]) -> usize {
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for m in manifests {
        for (id, s) in &m.split {
            seen.entry(id.as_str()).or_default().insert(*s);
        }
    }
    let mut per_id: BTreeMap<&str, usize> = BTreeMap::new();
    for m in manifests {
        for e in &m.entries {
            *per_id.entry(e.id()).or_default() += 1;
        }
    }
    seen.values().filter(|s| s.len() > 1).count()
        + per_id.values().filter(|&&c| c > 1).count()
}

fn split_counts(n: usize, test_fraction: f64) -> Result<usize> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 nodules to split, got {n}"
        )));
    }
    Ok(((n as f64 * test_fraction).round() as usize).clamp(1, n - 1))
}

/// Reassigns splits at nodule granularity: a seeded shuffle of the sorted
/// nodule ids, with `round(n * test_fraction)` of them sent to test.
pub fn assign_split(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let n_test = split_counts(manifest.len(), test_fraction)?;
    let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.id()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let split = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < n_test { Split::Test } else { Split::Train };
            (id.to_string(), s)
        })
        .collect();
    DatasetManifest::new(manifest.entries.clone(), split)
}

/// Splits into `(train, test)` manifests with disjoint nodule ids.
pub fn split_dataset(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let assigned = assign_split(manifest, test_fraction, seed)?;
    Ok((assigned.subset(Split::Train), assigned.subset(Split::Test)))
}
