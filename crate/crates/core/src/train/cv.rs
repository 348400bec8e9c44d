use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hpu_weights, train, TrainConfig};
use crate::data::{ConditioningVector, DatasetManifest, Mask, Split, PATCH_SIDE};
use crate::infer::{SegmentationSampler, DEFAULT_THRESHOLD};
use crate::metrics::dice;
use crate::{Error, Result};

/// Outcome of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_nodules: usize,
    pub held_out_nodules: usize,
    pub final_loss: f64,
    /// Mean Dice of the point prediction against the held-out follow-up masks.
    pub held_out_dice: f64,
}

/// `folds`-fold cross-validation over every nodule of `manifest`, with
/// nodules (not annotations) assigned to folds so no nodule is split.
pub fn cross_validate(manifest: &DatasetManifest, config: &TrainConfig, folds: usize) -> Result<Vec<FoldReport>> {
    if folds < 2 || folds > manifest.len() {
        return Err(Error::InvalidInput(format!(
            "{folds} folds for {} nodules",
            manifest.len()
        )));
    }
    let mut ids: Vec<String> = manifest.entries().iter().map(|e| e.id().to_string()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut reports = Vec::with_capacity(folds);
    for fold in 0..folds {
        let split: BTreeMap<String, Split> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let s = if i % folds == fold { Split::Test } else { Split::Train };
                (id.clone(), s)
            })
            .collect();
        let m = DatasetManifest::new(manifest.entries().to_vec(), split)?;
        let outcome = train(&m, config)?;
        let weights = hpu_weights(&outcome.checkpoint)?;
        let held_out = m.subset(Split::Test);
        let mut total = 0.0;
        for e in held_out.entries() {
            let d0 = e.annotations.iter().map(|a| a.d0_mm).sum::<f64>() / e.annotations.len() as f64;
            let cond = ConditioningVector::from_measurements(
                i64::from(e.pair.days_between),
                d0,
                weights.normalization(),
            )?;
            let probs = weights.mean_probs(&e.pair.i0, &cond)?;
            let pred = Mask::new(
                PATCH_SIDE,
                PATCH_SIDE,
                probs.iter().map(|&p| p > DEFAULT_THRESHOLD).collect(),
            )?;
            total += dice(&pred, &e.pair.y1)?;
        }
        reports.push(FoldReport {
            fold,
            train_nodules: m.len() - held_out.len(),
            held_out_nodules: held_out.len(),
            final_loss: outcome.log.last().map_or(f64::NAN, |l| l.total),
            held_out_dice: total / held_out.len().max(1) as f64,
        });
    }
    Ok(reports)
}
