use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    classify_2std, dice, positive, ged, rates, resolve_growth, size_errors, within_2std,
    ConfusionCounts, Ged, GroundTruthMode, Outcome, Prediction,
};
use crate::data::{tdiff_bin, ConditioningVector, DatasetManifest, Mask, RaterId, PATCH_SIDE};
use crate::infer::{mc_sample_mode, GrowthEstimate, SegmentationSampler, DEFAULT_THRESHOLD};
use crate::net::SampleMode;
use crate::{Error, Result};

/// How the expected-value growth decision is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthDecision {
    /// Positive when the sample-mean growth exceeds 2 mm.
    MeanDelta,
    /// Positive when the mean growth probability exceeds 0.5.
    MeanProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub modes: Vec<GroundTruthMode>,
    pub k: usize,
    pub n_bootstrap: usize,
    pub seed: u64,
    pub threshold: f64,
    pub decision: GrowthDecision,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            modes: GroundTruthMode::ALL.to_vec(),
            k: crate::infer::DEFAULT_K,
            n_bootstrap: 1000,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            decision: GrowthDecision::MeanDelta,
        }
    }
}

/// Everything the metrics need about one evaluated nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleRecord {
    pub nodule_id: String,
    pub tdiff_bin: u8,
    /// Growth reading `D1 − D0` indexed by rater.
    pub rater_growth_mm: Vec<Option<f64>>,
    pub est_growth_mean_mm: f64,
    pub est_growth_std_mm: f64,
    pub prob_growth_mean: f64,
    /// Dice of the pixel-wise sample majority against the follow-up mask.
    pub dice: f64,
    pub ged: Ged,
}

impl NoduleRecord {
    fn prediction(&self, generative: bool) -> Prediction {
        if generative {
            Prediction::Generative {
                mean: self.est_growth_mean_mm,
                std: self.est_growth_std_mm,
            }
        } else {
            Prediction::Deterministic(self.est_growth_mean_mm)
        }
    }

    fn est_positive(&self, decision: GrowthDecision) -> bool {
        match decision {
            GrowthDecision::MeanDelta => positive(self.est_growth_mean_mm),
            GrowthDecision::MeanProbability => self.prob_growth_mean > 0.5,
        }
    }

    fn point_outcome(&self, gt: f64, decision: GrowthDecision) -> Outcome {
        Outcome::from_labels(positive(gt), self.est_positive(decision))
    }
}

/// Column order of every per-mode metric listing.
pub const METRIC_NAMES: [&str; 13] = [
    "bacc",
    "prec",
    "rec",
    "spec",
    "bacc_2std",
    "mae_mm",
    "mse_mm2",
    "p_within_2std",
    "dice",
    "ged",
    "ged_cross",
    "ged_pred",
    "ged_gt",
];

const INTERVAL_METRICS: [usize; 2] = [4, 7];

/// Metric values of one mode over a set of records, in [`METRIC_NAMES`]
/// order. Interval metrics are `None` for deterministic predictors.
fn metric_values(
    records: &[&NoduleRecord],
    mode: GroundTruthMode,
    generative: bool,
    decision: GrowthDecision,
) -> Result<Vec<Option<f64>>> {
    let mut point = ConfusionCounts::default();
    let mut interval = ConfusionCounts::default();
    let mut gts = Vec::with_capacity(records.len());
    let mut ests = Vec::with_capacity(records.len());
    let mut within = 0usize;
    let (mut d, mut g2, mut gc, mut gp, mut gg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in records {
        let gt = resolve_growth(mode, &r.rater_growth_mm, r.prediction(generative))?;
        point.add(r.point_outcome(gt, decision));
        interval.add(classify_2std(gt, r.est_growth_mean_mm, r.est_growth_std_mm));
        if within_2std(gt, r.est_growth_mean_mm, r.est_growth_std_mm) {
            within += 1;
        }
        gts.push(gt);
        ests.push(r.est_growth_mean_mm);
        d += r.dice;
        g2 += r.ged.ged2;
        gc += r.ged.term_cross;
        gp += r.ged.term_pred;
        gg += r.ged.term_gt;
    }
    let n = records.len() as f64;
    let (mae, mse) = size_errors(&gts, &ests)?;
    let pr = rates(&point);
    let ir = rates(&interval);
    let mut v = vec![
        pr.bacc,
        pr.prec,
        pr.rec,
        pr.spec,
        ir.bacc,
        Some(mae),
        Some(mse),
        Some(within as f64 / n),
        Some(d / n),
        Some(g2 / n),
        Some(gc / n),
        Some(gp / n),
        Some(gg / n),
    ];
    if !generative {
        for i in INTERVAL_METRICS {
            v[i] = None;
        }
    }
    Ok(v)
}

/// Mean and population standard deviation of one metric over the bootstrap
/// iterations where it was defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapStat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
}

fn resample_indices(len: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    (0..len).map(|_| rng.random_range(0..len)).collect()
}

/// `n` resamples of `records` with replacement at full size. Iteration `i`
/// draws from its own stream of `seed`; undefined values are left out of
/// that metric's aggregate.
pub fn bootstrap<R, F>(records: &[R], n: usize, seed: u64, f: F) -> Result<Vec<BootstrapStat>>
where
    F: Fn(&[&R]) -> Result<Vec<Option<f64>>>,
{
    if records.is_empty() || n == 0 {
        return Err(Error::InvalidInput(
            "bootstrap needs records and at least one iteration".into(),
        ));
    }
    let mut values: Vec<Vec<f64>> = Vec::new();
    for it in 0..n {
        let sample: Vec<&R> = resample_indices(records.len(), seed, it)
            .into_iter()
            .map(|i| &records[i])
            .collect();
        let row = f(&sample)?;
        if values.is_empty() {
            values = vec![Vec::with_capacity(n); row.len()];
        }
        for (acc, v) in values.iter_mut().zip(row) {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                acc.push(v);
            }
        }
    }
    Ok(values
        .into_iter()
        .map(|vs| {
            if vs.is_empty() {
                return BootstrapStat {
                    mean: None,
                    std: None,
                    defined: 0,
                };
            }
            let k = vs.len() as f64;
            let mean = vs.iter().sum::<f64>() / k;
            let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
            BootstrapStat {
                mean: Some(mean),
                std: Some(var.sqrt()),
                defined: vs.len(),
            }
        })
        .collect())
}

/// Point value over all records plus its bootstrap summary. `applicable`
/// is false for metrics a predictor type does not produce.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub applicable: bool,
    pub point: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode: GroundTruthMode,
    pub bacc: MetricValue,
    pub prec: MetricValue,
    pub rec: MetricValue,
    pub spec: MetricValue,
    pub bacc_2std: MetricValue,
    pub mae_mm: MetricValue,
    pub mse_mm2: MetricValue,
    pub p_within_2std: MetricValue,
    pub dice: MetricValue,
    pub ged: MetricValue,
    pub ged_cross: MetricValue,
    pub ged_pred: MetricValue,
    pub ged_gt: MetricValue,
}

impl ModeMetrics {
    fn from_values(mode: GroundTruthMode, v: &[MetricValue]) -> Self {
        Self {
            mode,
            bacc: v[0],
            prec: v[1],
            rec: v[2],
            spec: v[3],
            bacc_2std: v[4],
            mae_mm: v[5],
            mse_mm2: v[6],
            p_within_2std: v[7],
            dice: v[8],
            ged: v[9],
            ged_cross: v[10],
            ged_pred: v[11],
            ged_gt: v[12],
        }
    }

    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [MetricValue; 13] {
        [
            self.bacc,
            self.prec,
            self.rec,
            self.spec,
            self.bacc_2std,
            self.mae_mm,
            self.mse_mm2,
            self.p_within_2std,
            self.dice,
            self.ged,
            self.ged_cross,
            self.ged_pred,
            self.ged_gt,
        ]
    }
}

/// Point-classification accuracy within one Tdiff bin and growth band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub mode: GroundTruthMode,
    pub tdiff_bin: u8,
    pub growth_band: String,
    pub count: usize,
    pub accuracy: f64,
}

fn growth_band(gt_mm: f64) -> &'static str {
    if gt_mm < 0.0 {
        "<0"
    } else if gt_mm <= crate::data::GROWTH_THRESHOLD_MM {
        "0-2"
    } else {
        ">2"
    }
}

const BANDS: [&str; 3] = ["<0", "0-2", ">2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub generative: bool,
    pub options: EvalOptions,
    pub modes: Vec<ModeMetrics>,
    pub strata: Vec<StratumRow>,
    pub records: Vec<NoduleRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricReport {
    /// Scores precomputed records under every mode of `options`.
    pub fn from_records(records: Vec<NoduleRecord>, generative: bool, options: EvalOptions) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no records to evaluate".into()));
        }
        let mut modes = Vec::with_capacity(options.modes.len());
        let mut strata = Vec::new();
        let all: Vec<&NoduleRecord> = records.iter().collect();
        for (mi, &mode) in options.modes.iter().enumerate() {
            let point = metric_values(&all, mode, generative, options.decision)?;
            let boot_seed = options.seed ^ ((mi as u64 + 1) << 48);
            let boot = bootstrap(&records, options.n_bootstrap, boot_seed, |s| {
                metric_values(s, mode, generative, options.decision)
            })?;
            let values: Vec<MetricValue> = point
                .iter()
                .zip(&boot)
                .enumerate()
                .map(|(i, (&p, b))| MetricValue {
                    applicable: generative || !INTERVAL_METRICS.contains(&i),
                    point: p,
                    mean: b.mean,
                    std: b.std,
                })
                .collect();
            modes.push(ModeMetrics::from_values(mode, &values));
            for bin in 0..4u8 {
                for band in BANDS {
                    let mut count = 0;
                    let mut correct = 0;
                    for r in &records {
                        let gt = resolve_growth(mode, &r.rater_growth_mm, r.prediction(generative))?;
                        if r.tdiff_bin == bin && growth_band(gt) == band {
                            count += 1;
                            if r.point_outcome(gt, options.decision).is_correct() {
                                correct += 1;
                            }
                        }
                    }
                    if count > 0 {
                        strata.push(StratumRow {
                            mode,
                            tdiff_bin: bin,
                            growth_band: band.to_string(),
                            count,
                            accuracy: correct as f64 / count as f64,
                        });
                    }
                }
            }
        }
        Ok(Self {
            generative,
            options,
            modes,
            strata,
            records,
        })
    }

    pub fn mode(&self, mode: GroundTruthMode) -> Option<&ModeMetrics> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Whether any applicable value is NaN.
    pub fn has_nan(&self) -> bool {
        self.modes.iter().any(|m| {
            m.values()
                .iter()
                .any(|v| [v.point, v.mean, v.std].iter().flatten().any(|x| x.is_nan()))
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    /// `mode,metric,point,mean,std` rows; blank cells are undefined or not
    /// applicable.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,metric,point,mean,std\n");
        for m in &self.modes {
            for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
                if !v.applicable {
                    continue;
                }
                let _ = writeln!(
                    s,
                    "{},{name},{},{},{}",
                    m.mode.name(),
                    fmt_opt(v.point),
                    fmt_opt(v.mean),
                    fmt_opt(v.std)
                );
            }
        }
        s
    }

    pub fn strata_csv(&self) -> String {
        let mut s = String::from("mode,tdiff_bin,growth_band,count,accuracy\n");
        for r in &self.strata {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.mode.name(),
                r.tdiff_bin,
                r.growth_band,
                r.count,
                r.accuracy
            );
        }
        s
    }
}

fn nodule_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Runs `predictor` on every nodule of `manifest` and scores it. The model
/// input D0 and the growth baseline are the raters' mean D0 reading.
pub fn evaluate(
    predictor: &dyn SegmentationSampler,
    manifest: &DatasetManifest,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if options.modes.is_empty() {
        return Err(Error::InvalidInput("no ground-truth modes requested".into()));
    }
    let generative = predictor.is_generative();
    let mut records = Vec::with_capacity(manifest.len());
    for (idx, e) in manifest.entries().iter().enumerate() {
        if e.annotations.is_empty() {
            return Err(Error::Validation(format!("{} has no annotations", e.id())));
        }
        let d0 = e.annotations.iter().map(|a| a.d0_mm).sum::<f64>() / e.annotations.len() as f64;
        let days = i64::from(e.pair.days_between);
        let cond = ConditioningVector::from_measurements(days, d0, predictor.normalization())?;
        let mode = if generative {
            SampleMode::Random
        } else {
            SampleMode::Mean
        };
        let samples = mc_sample_mode(
            predictor,
            &e.pair.i0,
            &cond,
            options.k,
            options.threshold,
            nodule_seed(options.seed, idx),
            mode,
            e.pair.spacing_mm,
        )?;
        let est = GrowthEstimate::from_samples(&samples, d0)?;
        let majority = Mask::new(
            PATCH_SIDE,
            PATCH_SIDE,
            est.appearance_mean.iter().map(|&p| p > 0.5).collect(),
        )?;
        records.push(NoduleRecord {
            nodule_id: e.id().to_string(),
            tdiff_bin: tdiff_bin(days)?,
            rater_growth_mm: RaterId::ALL
                .iter()
                .map(|&r| e.annotation(r).map(|a| a.growth_mm()))
                .collect(),
            est_growth_mean_mm: est.growth_mean_mm,
            est_growth_std_mm: est.growth_std_mm,
            prob_growth_mean: est.prob_growth_mean,
            dice: dice(&majority, &e.pair.y1)?,
            ged: ged(&samples.masks, std::slice::from_ref(&e.pair.y1))?,
        });
    }
    MetricReport::from_records(records, generative, options.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, gt: &[f64], mean: f64, std: f64) -> NoduleRecord {
        NoduleRecord {
            nodule_id: id.into(),
            tdiff_bin: 1,
            rater_growth_mm: gt.iter().map(|&g| Some(g)).collect(),
            est_growth_mean_mm: mean,
            est_growth_std_mm: std,
            prob_growth_mean: 0.5,
            dice: 0.8,
            ged: Ged {
                ged2: 0.1,
                term_cross: 0.3,
                term_pred: 0.1,
                term_gt: 0.1,
            },
        }
    }

    #[test]
    fn bootstrap_of_constant_metric_has_zero_std() {
        let recs = vec![1, 2, 3, 4];
        let out = bootstrap(&recs, 50, 7, |_| Ok(vec![Some(0.25), None])).unwrap();
        assert_eq!(out[0].mean, Some(0.25));
        assert_eq!(out[0].std, Some(0.0));
        assert_eq!(out[1].mean, None);
        assert_eq!(out[1].defined, 0);
    }

    #[test]
    fn single_iteration_bootstrap_reports_that_resample() {
        let recs = vec![1.0, 2.0, 7.0];
        let f = |s: &[&f64]| Ok(vec![Some(s.iter().copied().sum::<f64>())]);
        let out = bootstrap(&recs, 1, 3, f).unwrap();
        let expected: f64 = resample_indices(3, 3, 0).iter().map(|&i| recs[i]).sum();
        assert_eq!(out[0].mean, Some(expected));
        assert_eq!(out[0].std, Some(0.0));
    }

    #[test]
    fn deterministic_reports_skip_interval_metrics() {
        let recs = vec![record("a", &[3.0, 1.0, 4.0], 2.5, 0.0), record("b", &[0.0, 0.5, 0.2], 0.1, 0.0)];
        let opts = EvalOptions {
            n_bootstrap: 20,
            ..EvalOptions::default()
        };
        let report = MetricReport::from_records(recs, false, opts).unwrap();
        let c = report.mode(GroundTruthMode::Closest).unwrap();
        assert!(!c.bacc_2std.applicable && c.bacc_2std.point.is_none());
        assert!(!c.p_within_2std.applicable);
        assert!(!report.to_csv().contains("bacc_2std"));
        assert_eq!(c.bacc.point, Some(1.0));
    }

    #[test]
    fn probability_decision_uses_mean_probability() {
        let mut r = record("a", &[3.0], 1.0, 0.5);
        r.prob_growth_mean = 0.9;
        assert_eq!(r.point_outcome(3.0, GrowthDecision::MeanDelta), Outcome::Fn);
        assert_eq!(r.point_outcome(3.0, GrowthDecision::MeanProbability), Outcome::Tp);
    }
}
