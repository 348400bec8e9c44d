//! ELBO training of the U-HPNet: batching with dihedral augmentation, the
//! hierarchical KL terms, Adam updates, loss logging and resumable
//! checkpoints.

mod cv;
mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use uhpnet_autograd::{Adam, AdamConfig, Gradients, ParamStore, Tensor, Var};

pub use cv::{cross_validate, FoldReport};
pub use loss::{
    bce, graph_kl, graph_moment_diameter, graph_recon, graph_recon_from_probs, graph_soft_diameter,
    graph_soft_iou, kl_diag_gaussian, moment_diameter, proxy_diameter, recon_loss, soft_diameter,
    soft_iou_loss, DiameterProxy, ReconMode, ReconTargets, IOU_EPS,
};

use crate::data::{
    ConditioningVector, DatasetManifest, Mask, NoduleEntry, NormalizationConstants, Patch, Split,
    PATCH_SIDE,
};
use crate::net::layers::Ctx;
use crate::net::{
    cond_batch, image_batch, Activation, Checkpoint, HpuConfig, LatentLevelParams, ModelSpec,
    NetworkWeights, OptimizerState,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub gamma: f64,
    pub recon_mode: ReconMode,
    pub diameter_proxy: DiameterProxy,
    pub attention_enabled: bool,
    pub use_sz0: bool,
    pub augment_flips: bool,
    pub augment_rotations: bool,
    pub base_filters: usize,
    pub num_latent_levels: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 200,
            beta: 1.0,
            gamma: 1.0,
            recon_mode: ReconMode::IouL1Diam,
            diameter_proxy: DiameterProxy::Moments,
            attention_enabled: true,
            use_sz0: true,
            augment_flips: true,
            augment_rotations: true,
            base_filters: 32,
            num_latent_levels: 4,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

/// Network setups of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// BCE reconstruction, no attention, with D0.
    Bd0,
    /// IoU reconstruction, no attention, with D0.
    Id0,
    /// IoU + diameter L1, no attention, with D0.
    Idd0,
    /// IoU + diameter L1, attention, without D0.
    Idaod0,
    /// IoU + diameter L1, attention, with D0.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Bd0,
        Ablation::Id0,
        Ablation::Idd0,
        Ablation::Idaod0,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Bd0 => "BD0",
            Ablation::Id0 => "ID0",
            Ablation::Idd0 => "IDD0",
            Ablation::Idaod0 => "IDAOD0",
            Ablation::Full => "U-HPNet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '_'], "");
        Ok(match norm.as_str() {
            "BD0" => Ablation::Bd0,
            "ID0" => Ablation::Id0,
            "IDD0" => Ablation::Idd0,
            "IDAOD0" => Ablation::Idaod0,
            "UHPNET" | "FULL" => Ablation::Full,
            _ => return Err(Error::InvalidInput(format!("unknown network setup {s:?}"))),
        })
    }

    /// Overrides the loss, attention and D0 switches of `base`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (recon_mode, attention_enabled, use_sz0) = match self {
            Ablation::Bd0 => (ReconMode::Bce, false, true),
            Ablation::Id0 => (ReconMode::Iou, false, true),
            Ablation::Idd0 => (ReconMode::IouL1Diam, false, true),
            Ablation::Idaod0 => (ReconMode::IouL1Diam, true, false),
            Ablation::Full => (ReconMode::IouL1Diam, true, true),
        };
        TrainConfig {
            recon_mode,
            attention_enabled,
            use_sz0,
            ..base.clone()
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidInput("beta and gamma must be nonnegative".into()));
        }
        self.hpu_config().validate()
    }

    pub fn hpu_config(&self) -> HpuConfig {
        HpuConfig {
            num_latent_levels: self.num_latent_levels,
            base_filters: self.base_filters,
            attention_enabled: self.attention_enabled,
            use_sz0: self.use_sz0,
            activation: self.activation,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One epoch's batch-size weighted mean losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub kl: Vec<f64>,
    pub total: f64,
}

impl EpochLoss {
    pub fn header(levels: usize) -> String {
        let mut s = String::from("# epoch,recon");
        for l in 0..levels {
            let _ = write!(s, ",kl_{l}");
        }
        s.push_str(",total");
        s
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.recon);
        for k in &self.kl {
            let _ = write!(s, ",{k}");
        }
        let _ = write!(s, ",{}", self.total);
        s
    }
}

/// Symmetry `t` of the square (`t & 3` quarter turns, `t & 4` mirror),
/// expressed as the source pixel for destination `(y, x)`.
pub fn dihedral_source(t: u8, y: usize, x: usize) -> (usize, usize) {
    let n = PATCH_SIDE - 1;
    let (mut y, mut x) = (y, x);
    if t & 4 != 0 {
        x = n - x;
    }
    for _ in 0..(t & 3) {
        (y, x) = (x, n - y);
    }
    (y, x)
}

/// Training example: a nodule seen through one rater's readings, possibly
/// transformed by a symmetry of the square.
#[derive(Clone, Debug)]
pub struct Example {
    pub i0: Patch,
    pub i1: Patch,
    pub y1: Mask,
    pub cond: ConditioningVector,
    pub d1_mm: f64,
    pub spacing_mm: f64,
}

impl Example {
    pub fn new(entry: &NoduleEntry, rater: usize, transform: u8, norm: &NormalizationConstants) -> Result<Self> {
        let a = entry.annotations.get(rater).ok_or_else(|| {
            Error::InvalidInput(format!("{} has no annotation #{rater}", entry.id()))
        })?;
        let p = &entry.pair;
        let map = |y, x| dihedral_source(transform, y, x);
        Ok(Self {
            i0: p.i0.map_coords(map),
            i1: p.i1.map_coords(map),
            y1: p.y1.map_coords(map),
            cond: ConditioningVector::from_measurements(i64::from(p.days_between), a.d0_mm, norm)?,
            d1_mm: a.d1_mm,
            spacing_mm: p.spacing_mm,
        })
    }
}

/// Stacked tensors of a list of examples.
pub struct Batch {
    pub i0: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub cond: Tensor<f32>,
    pub targets: ReconTargets<f32>,
}

impl Batch {
    pub fn new(examples: &[Example], use_sz0: bool) -> Result<Self> {
        let n = examples.len();
        let i0 = image_batch(&examples.iter().map(|e| &e.i0).collect::<Vec<_>>())?;
        let i1 = image_batch(&examples.iter().map(|e| &e.i1).collect::<Vec<_>>())?;
        let conds: Vec<_> = examples.iter().map(|e| e.cond).collect();
        let mut masks = Vec::with_capacity(n * PATCH_SIDE * PATCH_SIDE);
        for e in examples {
            masks.extend(e.y1.to_values());
        }
        Ok(Self {
            i0,
            i1,
            cond: cond_batch(&conds, use_sz0)?,
            targets: ReconTargets {
                masks: Tensor::new(&[n, 1, PATCH_SIDE, PATCH_SIDE], masks)?,
                d1_mm: Tensor::new(&[n], examples.iter().map(|e| e.d1_mm as f32).collect())?,
                spacing_mm: Tensor::new(
                    &[n],
                    examples.iter().map(|e| e.spacing_mm as f32).collect(),
                )?,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.i0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator for epoch `epoch`: stream `epoch` of the run seed, so a resumed
/// run replays exactly the batches an uninterrupted one would have seen.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over every (nodule, rater) annotation in shuffled order, each
/// seen through a random symmetry.
pub(crate) fn epoch_batches(
    entries: &[&NoduleEntry],
    config: &TrainConfig,
    norm: &NormalizationConstants,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    let mut order: Vec<(usize, usize)> = entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.annotations.len()).map(move |r| (i, r)))
        .collect();
    order.shuffle(rng);
    let mut examples = Vec::with_capacity(order.len());
    for (i, rater) in order {
        let rot = if config.augment_rotations { rng.random_range(0..4u8) } else { 0 };
        let flip = if config.augment_flips && rng.random_bool(0.5) { 4 } else { 0 };
        examples.push(Example::new(entries[i], rater, rot | flip, norm)?);
    }
    examples
        .chunks(config.batch_size)
        .map(|c| Batch::new(c, config.use_sz0))
        .collect()
}

pub(crate) fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub(crate) struct ElboVars {
    pub total: Var,
    pub recon: Var,
    pub prior: Vec<(Var, Var)>,
    pub posterior: Vec<(Var, Var)>,
}

/// Records the training objective: posterior latents drive the decoder and
/// each level contributes `β · KL(q ‖ p)`.
pub(crate) fn elbo_graph(
    ctx: &mut Ctx,
    cfg: &HpuConfig,
    tc: &TrainConfig,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<ElboVars> {
    use crate::net::{decode_vars, posterior_vars, prior_vars, reparameterize};
    let i0 = ctx.input(batch.i0.clone());
    let i1 = ctx.input(batch.i1.clone());
    let cond = ctx.input(batch.cond.clone());
    let (pyr, prior) = prior_vars(ctx, cfg, i0, cond)?;
    let posterior = posterior_vars(ctx, cfg, i0, i1, cond)?;
    let mut zs = Vec::with_capacity(posterior.len());
    for &(m, lv) in &posterior {
        let eps = standard_normal(ctx.value(m).shape(), rng)?;
        zs.push(reparameterize(ctx, m, lv, eps)?);
    }
    let logits = decode_vars(ctx, cfg, &pyr, &zs)?;
    let recon = graph_recon(&mut ctx.g, logits, &batch.targets, tc.gamma, tc.recon_mode, tc.diameter_proxy)?;
    let mut total = recon;
    for (&q, &p) in posterior.iter().zip(&prior) {
        let kl = graph_kl(&mut ctx.g, q, p)?;
        let kl = ctx.g.scale(kl, tc.beta);
        total = ctx.g.add(total, kl)?;
    }
    Ok(ElboVars {
        total,
        recon,
        prior,
        posterior,
    })
}

fn level_params(ctx: &Ctx, v: (Var, Var)) -> LatentLevelParams {
    LatentLevelParams {
        mean: ctx.value(v.0).clone(),
        log_variance: ctx.value(v.1).clone(),
    }
}

/// Batch-mean KL per level, recomputed in double precision.
pub(crate) fn level_kls(ctx: &Ctx, vars: &ElboVars, n: usize) -> Result<Vec<f64>> {
    vars.posterior
        .iter()
        .zip(&vars.prior)
        .map(|(&q, &p)| Ok(kl_diag_gaussian(&level_params(ctx, q), &level_params(ctx, p))? / n as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: Vec<f64>,
}

/// Objective value on one batch, latent noise drawn from `seed`.
pub fn elbo_loss(weights: &NetworkWeights, batch: &Batch, config: &TrainConfig, seed: u64) -> Result<ElboTerms> {
    let mut ctx = Ctx::frozen(&weights.params, weights.config.activation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = elbo_graph(&mut ctx, &weights.config, config, batch, &mut rng)?;
    let kl = level_kls(&ctx, &vars, batch.len())?;
    let terms = ElboTerms {
        total: ctx.value(vars.total).data()[0] as f64,
        recon: ctx.value(vars.recon).data()[0] as f64,
        kl,
    };
    check_terms(&terms)?;
    Ok(terms)
}

fn check_terms(t: &ElboTerms) -> Result<()> {
    if !(t.total.is_finite() && t.recon.is_finite() && t.kl.iter().all(|k| k.is_finite())) {
        return Err(Error::Numerical(format!(
            "non-finite loss: total {}, recon {}, kl {:?}",
            t.total, t.recon, t.kl
        )));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLoss>,
    /// Training-health notices, such as a collapsed discriminator.
    pub warnings: Vec<String>,
}

/// Mutable training state handed to a step function.
pub(crate) struct Session {
    pub params: ParamStore<f32>,
    pub optimizers: BTreeMap<String, Adam<f32>>,
}

impl Session {
    /// Applies `grads` with optimizer `name`, creating it on first use.
    pub fn step(&mut self, name: &str, config: AdamConfig, grads: &Gradients<f32>) {
        self.optimizers
            .entry(name.to_string())
            .or_insert_with(|| Adam::new(config))
            .step(&mut self.params, grads);
    }
}

pub(crate) fn restore_optimizers(states: &BTreeMap<String, OptimizerState>) -> BTreeMap<String, Adam<f32>> {
    states
        .iter()
        .map(|(name, s)| {
            let cfg = AdamConfig {
                learning_rate: s.learning_rate,
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
            };
            (
                name.clone(),
                Adam::restore(cfg, s.step, s.first.clone(), s.second.clone()),
            )
        })
        .collect()
}

fn optimizer_states(opts: &BTreeMap<String, Adam<f32>>) -> BTreeMap<String, OptimizerState> {
    opts.iter()
        .map(|(name, o)| {
            let (step, m, v) = o.state();
            (
                name.clone(),
                OptimizerState {
                    learning_rate: o.config.learning_rate,
                    beta1: o.config.beta1,
                    beta2: o.config.beta2,
                    eps: o.config.eps,
                    step,
                    first: m.clone(),
                    second: v.clone(),
                },
            )
        })
        .collect()
}

/// Losses of one optimization step, already averaged over its batch.
pub(crate) struct StepLosses {
    pub recon: f64,
    pub kl: Vec<f64>,
    pub total: f64,
}

/// Everything a training loop needs besides the step itself.
pub(crate) struct RunSpec<'a> {
    pub manifest: &'a DatasetManifest,
    pub config: &'a TrainConfig,
    pub model: ModelSpec,
    pub resume: Option<Checkpoint>,
    pub kl_levels: usize,
}

pub(crate) fn training_entries(manifest: &DatasetManifest) -> Result<Vec<&NoduleEntry>> {
    let entries: Vec<&NoduleEntry> = manifest
        .entries()
        .iter()
        .filter(|e| manifest.split_of(e.id()) == Some(Split::Train))
        .collect();
    if entries.is_empty() {
        return Err(Error::Validation("the training split is empty".into()));
    }
    Ok(entries)
}

pub(crate) fn training_normalization(manifest: &DatasetManifest) -> Result<NormalizationConstants> {
    manifest.normalization().ok_or_else(|| {
        Error::Validation("training D0 values span no range; sz0 cannot be normalized".into())
    })
}

/// Shared epoch loop: batching, divergence detection, logging, and the
/// final checkpoint. `init` builds fresh parameters when not resuming.
pub(crate) fn run_training<F>(
    spec: RunSpec,
    init: impl FnOnce(&NormalizationConstants) -> Result<ParamStore<f32>>,
    mut step: F,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<TrainOutcome>
where
    F: FnMut(&mut Session, &Batch, &mut ChaCha8Rng) -> Result<StepLosses>,
{
    let config = spec.config;
    config.validate()?;
    let entries = training_entries(spec.manifest)?;
    let (norm, mut session, start) = match spec.resume {
        Some(ck) => {
            if ck.model != spec.model {
                return Err(Error::Checkpoint(
                    "cannot resume: checkpoint holds a different architecture".into(),
                ));
            }
            let optimizers = restore_optimizers(&ck.optimizers);
            (
                ck.normalization,
                Session {
                    params: ck.params,
                    optimizers,
                },
                ck.epochs_trained,
            )
        }
        None => {
            let norm = training_normalization(spec.manifest)?;
            let params = init(&norm)?;
            (
                norm,
                Session {
                    params,
                    optimizers: BTreeMap::new(),
                },
                0,
            )
        }
    };
    let snapshot = |s: &Session, epochs: usize| Checkpoint {
        model: spec.model.clone(),
        normalization: norm,
        train_config: Some(config.clone()),
        epochs_trained: epochs,
        params: s.params.clone(),
        optimizers: optimizer_states(&s.optimizers),
    };
    let mut last_good = snapshot(&session, start);
    let mut log = Vec::new();
    for epoch in start..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let batches = epoch_batches(&entries, config, &norm, &mut rng)?;
        let mut acc = StepLosses {
            recon: 0.0,
            kl: vec![0.0; spec.kl_levels],
            total: 0.0,
        };
        let mut seen = 0usize;
        for batch in &batches {
            let out = step(&mut session, batch, &mut rng);
            let out = match out {
                Ok(o) if o.total.is_finite() && o.recon.is_finite() && o.kl.iter().all(|k| k.is_finite()) => o,
                Ok(o) => {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        message: format!("total {}, recon {}, kl {:?}", o.total, o.recon, o.kl),
                        last_good: Box::new(last_good),
                    })
                }
                Err(Error::Numerical(message)) => {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        message,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            let w = batch.len() as f64;
            acc.recon += w * out.recon;
            acc.total += w * out.total;
            for (a, k) in acc.kl.iter_mut().zip(&out.kl) {
                *a += w * k;
            }
            seen += batch.len();
        }
        let n = seen as f64;
        let entry = EpochLoss {
            epoch: epoch + 1,
            recon: acc.recon / n,
            kl: acc.kl.iter().map(|k| k / n).collect(),
            total: acc.total / n,
        };
        on_epoch(&entry);
        log.push(entry);
        last_good = snapshot(&session, epoch + 1);
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        log,
        warnings: Vec::new(),
    })
}

/// Trains a U-HPNet on the training split of `manifest`.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(manifest, config, None, &mut |_| {})
}

/// As [`train`], optionally resuming from `resume` (the epoch count of
/// `config` is the total to reach) and reporting each epoch as it ends.
pub fn train_with(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    let hpu = config.hpu_config();
    let spec = RunSpec {
        manifest,
        config,
        model: ModelSpec::Hpu(hpu.clone()),
        resume,
        kl_levels: hpu.num_latent_levels,
    };
    let adam = config.adam();
    run_training(
        spec,
        |norm| Ok(NetworkWeights::init(hpu.clone(), *norm, config.seed)?.params),
        |session, batch, rng| {
            let (grads, losses) = {
                let mut ctx = Ctx::frozen(&session.params, hpu.activation);
                let vars = elbo_graph(&mut ctx, &hpu, config, batch, rng)?;
                let kl = level_kls(&ctx, &vars, batch.len())?;
                let losses = StepLosses {
                    recon: ctx.value(vars.recon).data()[0] as f64,
                    kl,
                    total: ctx.value(vars.total).data()[0] as f64,
                };
                if !losses.total.is_finite() {
                    return Ok(losses);
                }
                (ctx.g.backward(vars.total)?, losses)
            };
            if !grads.all_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
            session.step("main", adam, &grads);
            Ok(losses)
        },
        on_epoch,
    )
}

/// Weights of a U-HPNet checkpoint.
pub fn hpu_weights(ckpt: &Checkpoint) -> Result<NetworkWeights> {
    match &ckpt.model {
        ModelSpec::Hpu(cfg) => Ok(NetworkWeights {
            config: cfg.clone(),
            normalization: ckpt.normalization,
            params: ckpt.params.clone(),
        }),
        ModelSpec::Baseline(_) => Err(Error::Checkpoint(
            "checkpoint holds a baseline network, not a U-HPNet".into(),
        )),
    }
}
