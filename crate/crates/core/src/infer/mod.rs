//! Monte-Carlo post-processing: repeated sampling of future segmentations and
//! their reduction to growth size, growth probability and appearance maps.

mod stats;

pub use stats::{
    appearance_maps, growth_logistic, growth_probability, growth_stats, longest_diameter, mean_std,
};

use serde::{Deserialize, Serialize};
use uhpnet_autograd::Tensor;

use crate::data::{ConditioningVector, Mask, NormalizationConstants, Patch, PATCH_SIDE};
use crate::net::{cond_batch, image_batch, sample_latents_from, LatentLevelParams, NetworkWeights, SampleMode};
use crate::{Error, Result};

/// Monte-Carlo sample count used when none is given.
pub const DEFAULT_K: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Decoder passes are batched in chunks of this many samples.
pub const SAMPLE_CHUNK: usize = 50;

/// Binarized Monte-Carlo segmentations of one nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub masks: Vec<Mask>,
    pub spacing_mm: f64,
    pub seed: u64,
}

impl SampleSet {
    pub fn new(masks: Vec<Mask>, spacing_mm: f64, seed: u64) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidInput("a sample set needs at least one mask".into()));
        }
        Ok(Self {
            masks,
            spacing_mm,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn diameters(&self) -> Vec<f64> {
        self.masks
            .iter()
            .map(|m| longest_diameter(m, self.spacing_mm))
            .collect()
    }
}

/// Anything that maps a baseline patch and conditioning to future
/// segmentations: the U-HPNet and every baseline network.
pub trait SegmentationSampler {
    fn normalization(&self) -> &NormalizationConstants;

    /// Whether repeated samples can differ. Deterministic predictors are
    /// scored without interval metrics.
    fn is_generative(&self) -> bool;

    /// Soft maps of samples `first .. first + count`; sample `i` depends
    /// only on `(seed, i)`.
    fn sample_probs(
        &self,
        i0: &Patch,
        cond: &ConditioningVector,
        first: u64,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>>;

    /// Single point prediction: latent means, or the network without noise.
    fn mean_probs(&self, i0: &Patch, cond: &ConditioningVector) -> Result<Vec<f64>>;
}

fn split_probs(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    (0..n).map(|i| t.item(i).to_vec()).collect()
}

fn repeat_params(params: &[LatentLevelParams], n: usize) -> Result<Vec<LatentLevelParams>> {
    params
        .iter()
        .map(|p| {
            Ok(LatentLevelParams {
                mean: p.mean.repeat_batch(n)?,
                log_variance: p.log_variance.repeat_batch(n)?,
            })
        })
        .collect()
}

impl SegmentationSampler for NetworkWeights {
    fn normalization(&self) -> &NormalizationConstants {
        &self.normalization
    }

    fn is_generative(&self) -> bool {
        true
    }

    fn sample_probs(
        &self,
        i0: &Patch,
        cond: &ConditioningVector,
        first: u64,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let x = image_batch(&[i0])?;
        let c = cond_batch(&[*cond], self.config.use_sz0)?;
        let (pyr, prior) = self.prior_forward(&x, &c)?;
        let mut out = Vec::with_capacity(count);
        let mut done = 0;
        while done < count {
            let n = SAMPLE_CHUNK.min(count - done);
            let params = repeat_params(&prior, n)?;
            let z = sample_latents_from(&params, SampleMode::Random, seed, first + done as u64)?;
            out.extend(split_probs(&self.decode(&pyr.repeat(n)?, &z)?));
            done += n;
        }
        Ok(out)
    }

    fn mean_probs(&self, i0: &Patch, cond: &ConditioningVector) -> Result<Vec<f64>> {
        let x = image_batch(&[i0])?;
        let c = cond_batch(&[*cond], self.config.use_sz0)?;
        let (pyr, prior) = self.prior_forward(&x, &c)?;
        let z = sample_latents_from(&prior, SampleMode::Mean, 0, 0)?;
        Ok(split_probs(&self.decode(&pyr, &z)?).remove(0))
    }
}

fn binarize(probs: &[f64], threshold: f64) -> Result<Mask> {
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("network produced a non-finite probability".into()));
    }
    Mask::new(
        PATCH_SIDE,
        PATCH_SIDE,
        probs.iter().map(|&p| p > threshold).collect(),
    )
}

/// `k` binarized samples. In mean mode every sample is the point
/// prediction.
pub fn mc_sample_mode(
    sampler: &dyn SegmentationSampler,
    i0: &Patch,
    cond: &ConditioningVector,
    k: usize,
    threshold: f64,
    seed: u64,
    mode: SampleMode,
    spacing_mm: f64,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold {threshold} must lie strictly between 0 and 1"
        )));
    }
    let masks = match mode {
        SampleMode::Mean => {
            let m = binarize(&sampler.mean_probs(i0, cond)?, threshold)?;
            vec![m; k]
        }
        SampleMode::Random => sampler
            .sample_probs(i0, cond, 0, k, seed)?
            .iter()
            .map(|p| binarize(p, threshold))
            .collect::<Result<_>>()?,
    };
    SampleSet::new(masks, spacing_mm, seed)
}

pub fn mc_sample(
    sampler: &dyn SegmentationSampler,
    i0: &Patch,
    cond: &ConditioningVector,
    k: usize,
    threshold: f64,
    seed: u64,
    spacing_mm: f64,
) -> Result<SampleSet> {
    mc_sample_mode(sampler, i0, cond, k, threshold, seed, SampleMode::Random, spacing_mm)
}

/// Growth distribution and appearance summary of one nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEstimate {
    pub growth_mean_mm: f64,
    pub growth_std_mm: f64,
    pub prob_growth_mean: f64,
    pub prob_growth_std: f64,
    pub appearance_mean: Vec<f64>,
    pub appearance_std: Vec<f64>,
    pub k: usize,
    pub d0_used_mm: f64,
    /// Per-sample growth `D1'ᵢ − D0`.
    pub deltas_mm: Vec<f64>,
}

impl GrowthEstimate {
    pub fn from_samples(samples: &SampleSet, d0_mm: f64) -> Result<Self> {
        let diameters = samples.diameters();
        let (growth_mean_mm, growth_std_mm) = growth_stats(&diameters, d0_mm)?;
        let deltas_mm: Vec<f64> = diameters.iter().map(|d| d - d0_mm).collect();
        let (prob_growth_mean, prob_growth_std) = growth_probability(&deltas_mm)?;
        let (appearance_mean, appearance_std) = appearance_maps(&samples.masks)?;
        Ok(Self {
            growth_mean_mm,
            growth_std_mm,
            prob_growth_mean,
            prob_growth_std,
            appearance_mean,
            appearance_std,
            k: samples.k(),
            d0_used_mm: d0_mm,
            deltas_mm,
        })
    }
}

/// Baseline information needed to predict one nodule's future.
#[derive(Clone, Debug)]
pub struct PredictionRequest<'a> {
    pub i0: &'a Patch,
    pub spacing_mm: f64,
    pub days_between: u32,
    pub d0_mm: f64,
}

impl PredictionRequest<'_> {
    pub fn conditioning(&self, norm: &NormalizationConstants) -> Result<ConditioningVector> {
        ConditioningVector::from_measurements(i64::from(self.days_between), self.d0_mm, norm)
    }
}

/// Samples and their growth summary.
pub fn predict_with_samples(
    sampler: &dyn SegmentationSampler,
    req: &PredictionRequest,
    k: usize,
    seed: u64,
) -> Result<(GrowthEstimate, SampleSet)> {
    let cond = req.conditioning(sampler.normalization())?;
    let samples = mc_sample(sampler, req.i0, &cond, k, DEFAULT_THRESHOLD, seed, req.spacing_mm)?;
    Ok((GrowthEstimate::from_samples(&samples, req.d0_mm)?, samples))
}

pub fn predict(
    sampler: &dyn SegmentationSampler,
    req: &PredictionRequest,
    k: usize,
    seed: u64,
) -> Result<GrowthEstimate> {
    Ok(predict_with_samples(sampler, req, k, seed)?.0)
}
