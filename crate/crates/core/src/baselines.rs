//! Comparison networks on the same residual U-Net backbone and the same
//! input/output contract as the U-HPNet:
//!
//! * `URESNET` – deterministic segmentation trained with pixel-wise BCE.
//! * `BAYES_TD` – the same network with dropout in the three coarsest
//!   encoder and decoder blocks, kept active when sampling.
//! * `SPU` – a single 6-dimensional Gaussian latent from the bottleneck,
//!   broadcast over the output and fused by three 1×1 convolutions.
//! * `P2P_GAN` – a dropout generator trained against a conditional
//!   discriminator with an L1 term.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use uhpnet_autograd::{ParamStore, Tensor, Var};

use crate::data::{ConditioningVector, DatasetManifest, NormalizationConstants, Patch};
use crate::infer::SegmentationSampler;
use crate::net::layers::{self, Ctx, DecoderOpts, Dropout, EncoderOpts, Init, PyramidVars};
use crate::net::{
    cond_batch, image_batch, probabilities, reparameterize, sample_latents_from, width_at,
    Activation, Checkpoint, LatentLevelParams, ModelSpec, SampleMode, INPUT_SIDE,
};
use crate::train::{
    graph_kl, kl_diag_gaussian, run_training, standard_normal, EpochLoss, RunSpec,
    StepLosses, TrainConfig, TrainOutcome,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "URESNET")]
    UResNet,
    #[serde(rename = "BAYES_TD")]
    BayesTd,
    #[serde(rename = "SPU")]
    Spu,
    #[serde(rename = "P2P_GAN")]
    P2pGan,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::UResNet,
        BaselineKind::BayesTd,
        BaselineKind::Spu,
        BaselineKind::P2pGan,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::UResNet => "URESNET",
            BaselineKind::BayesTd => "BAYES_TD",
            BaselineKind::Spu => "SPU",
            BaselineKind::P2pGan => "P2P_GAN",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "URESNET" => Ok(BaselineKind::UResNet),
            "BAYES_TD" => Ok(BaselineKind::BayesTd),
            "SPU" => Ok(BaselineKind::Spu),
            "P2P_GAN" => Ok(BaselineKind::P2pGan),
            other => Err(Error::InvalidInput(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub base_filters: usize,
    pub use_sz0: bool,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Dropout in training and sampling for the kinds that use it.
    pub dropout_enabled: bool,
    pub spu_latent_dim: usize,
    pub gan_lambda: f64,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, base_filters: usize) -> Self {
        Self {
            kind,
            base_filters,
            use_sz0: true,
            activation: Activation::Relu,
            dropout_rate: 0.5,
            dropout_enabled: true,
            spu_latent_dim: 6,
            gan_lambda: 100.0,
        }
    }

    /// Baseline sharing the switches of a U-HPNet training configuration.
    pub fn from_train(kind: BaselineKind, tc: &TrainConfig) -> Self {
        Self {
            use_sz0: tc.use_sz0,
            activation: tc.activation,
            ..Self::new(kind, tc.base_filters)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {} outside (0, 1)",
                self.dropout_rate
            )));
        }
        if self.spu_latent_dim == 0 || self.base_filters == 0 {
            return Err(Error::InvalidInput(
                "latent dimension and base filters must be positive".into(),
            ));
        }
        if !(self.gan_lambda >= 0.0) {
            return Err(Error::InvalidInput("gan_lambda must be nonnegative".into()));
        }
        Ok(())
    }

    fn encoder_dropout(&self) -> &'static [usize] {
        match self.kind {
            BaselineKind::BayesTd if self.dropout_enabled => &[3, 4, 5],
            _ => &[],
        }
    }

    fn decoder_dropout(&self) -> &'static [usize] {
        match self.kind {
            BaselineKind::BayesTd if self.dropout_enabled => &[5, 4, 3],
            BaselineKind::P2pGan if self.dropout_enabled => &[5, 4, 3, 2, 1],
            _ => &[],
        }
    }

    fn uses_dropout(&self) -> bool {
        !self.encoder_dropout().is_empty() || !self.decoder_dropout().is_empty()
    }

    fn cond_channels(&self) -> usize {
        if self.use_sz0 {
            2
        } else {
            1
        }
    }
}

/// Trained (or freshly initialized) baseline network.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineNet {
    pub config: BaselineConfig,
    pub normalization: NormalizationConstants,
    pub params: ParamStore<f32>,
}

fn prefix(kind: BaselineKind) -> &'static str {
    match kind {
        BaselineKind::P2pGan => "gen",
        _ => "net",
    }
}

/// Backbone segmentation logits for the deterministic and dropout kinds.
fn backbone_logits(ctx: &mut Ctx, cfg: &BaselineConfig, i0: Var, cond: Var) -> Result<Var> {
    let p = prefix(cfg.kind);
    let pyr = layers::encoder(
        ctx,
        &format!("{p}/enc"),
        i0,
        Some(cond),
        &EncoderOpts {
            base: cfg.base_filters,
            dropout_scales: cfg.encoder_dropout(),
        },
    )?;
    let d = layers::decoder(
        ctx,
        &format!("{p}/dec"),
        &pyr,
        &DecoderOpts {
            base: cfg.base_filters,
            attention: false,
            latents: &[],
            dropout_scales: cfg.decoder_dropout(),
        },
    )?;
    layers::seg_head(ctx, &format!("{p}/dec"), d)
}

/// Gaussian over a `[N, D, 1, 1]` latent from an encoder bottleneck.
fn spu_latent(ctx: &mut Ctx, cfg: &BaselineConfig, name: &str, pyr: &PyramidVars) -> Result<(Var, Var)> {
    let out = ctx.conv(name, pyr.bottleneck, 2 * cfg.spu_latent_dim, 1, Init::Zero)?;
    let mean = ctx.g.slice_channels(out, 0, cfg.spu_latent_dim)?;
    let logvar = ctx.g.slice_channels(out, cfg.spu_latent_dim, cfg.spu_latent_dim)?;
    Ok((mean, logvar))
}

fn spu_encoder(ctx: &mut Ctx, cfg: &BaselineConfig, name: &str, image: Var, cond: Var) -> Result<PyramidVars> {
    layers::encoder(
        ctx,
        name,
        image,
        Some(cond),
        &EncoderOpts {
            base: cfg.base_filters,
            dropout_scales: &[],
        },
    )
}

fn spu_prior(ctx: &mut Ctx, cfg: &BaselineConfig, i0: Var, cond: Var) -> Result<(PyramidVars, (Var, Var))> {
    let pyr = spu_encoder(ctx, cfg, "prior/enc", i0, cond)?;
    let z = spu_latent(ctx, cfg, "prior/z", &pyr)?;
    Ok((pyr, z))
}

fn spu_posterior(ctx: &mut Ctx, cfg: &BaselineConfig, i0: Var, i1: Var, cond: Var) -> Result<(Var, Var)> {
    let both = ctx.g.concat(&[i0, i1])?;
    let pyr = spu_encoder(ctx, cfg, "post/enc", both, cond)?;
    spu_latent(ctx, cfg, "post/z", &pyr)
}

/// Decoder features joined with the broadcast latent and fused by three
/// 1×1 convolutions.
fn spu_decode(ctx: &mut Ctx, cfg: &BaselineConfig, pyr: &PyramidVars, z: Var) -> Result<Var> {
    let d = layers::decoder(
        ctx,
        "dec",
        pyr,
        &DecoderOpts {
            base: cfg.base_filters,
            attention: false,
            latents: &[],
            dropout_scales: &[],
        },
    )?;
    let zmap = ctx.g.broadcast_spatial(z, INPUT_SIDE, INPUT_SIDE)?;
    let c0 = width_at(cfg.base_filters, 0);
    let mut h = ctx.g.concat(&[d, zmap])?;
    for i in 0..2 {
        h = ctx.conv(&format!("fcomb/{i}"), h, c0, 1, Init::He(1.0))?;
        h = ctx.act(h);
    }
    ctx.conv("fcomb/2", h, 1, 1, Init::He(0.1))
}

/// Conditional discriminator: encoder over the baseline image and a
/// (real or generated) follow-up map, reduced to one logit per item.
fn discriminator(ctx: &mut Ctx, cfg: &BaselineConfig, i0: Var, y: Var, cond: Var) -> Result<Var> {
    let x = ctx.g.concat(&[i0, y])?;
    let pyr = layers::encoder(
        ctx,
        "disc/enc",
        x,
        Some(cond),
        &EncoderOpts {
            base: cfg.base_filters,
            dropout_scales: &[],
        },
    )?;
    ctx.conv("disc/out", pyr.bottleneck, 1, 1, Init::He(1.0))
}

fn scalar(ctx: &Ctx, v: Var) -> f64 {
    ctx.value(v).data()[0] as f64
}

/// Generator objective: adversarial term plus `λ` times the L1 term.
pub fn gan_generator_loss(adversarial: f64, l1: f64, lambda: f64) -> f64 {
    adversarial + lambda * l1
}

impl BaselineNet {
    pub fn init(config: BaselineConfig, normalization: NormalizationConstants, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut ctx = Ctx::init(&mut params, seed, config.activation);
            let img = || Tensor::zeros(&[1, 1, INPUT_SIDE, INPUT_SIDE]);
            let i0 = ctx.input(img());
            let i1 = ctx.input(img());
            let cond = ctx.input(Tensor::zeros(&[1, config.cond_channels(), 1, 1]));
            match config.kind {
                BaselineKind::UResNet | BaselineKind::BayesTd => {
                    backbone_logits(&mut ctx, &config, i0, cond)?;
                }
                BaselineKind::Spu => {
                    let (pyr, (m, _)) = spu_prior(&mut ctx, &config, i0, cond)?;
                    spu_posterior(&mut ctx, &config, i0, i1, cond)?;
                    spu_decode(&mut ctx, &config, &pyr, m)?;
                }
                BaselineKind::P2pGan => {
                    let logits = backbone_logits(&mut ctx, &config, i0, cond)?;
                    let p = ctx.g.sigmoid(logits);
                    discriminator(&mut ctx, &config, i0, p, cond)?;
                }
            }
        }
        Ok(Self {
            config,
            normalization,
            params,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match &ckpt.model {
            ModelSpec::Baseline(cfg) => Ok(Self {
                config: cfg.clone(),
                normalization: ckpt.normalization,
                params: ckpt.params.clone(),
            }),
            ModelSpec::Hpu(_) => Err(Error::Checkpoint(
                "checkpoint holds a U-HPNet, not a baseline".into(),
            )),
        }
    }

    fn inputs(&self, i0: &Patch, cond: &ConditioningVector, n: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let x = image_batch(&[i0])?.repeat_batch(n)?;
        let c = cond_batch(&[*cond], self.config.use_sz0)?.repeat_batch(n)?;
        Ok((x, c))
    }

    /// Logits for `n` copies of one input. `noise` selects per-sample
    /// dropout or latent streams; `None` gives the noise-free prediction.
    fn logits(&self, i0: &Patch, cond: &ConditioningVector, n: usize, noise: Option<(u64, u64)>) -> Result<Tensor<f32>> {
        let cfg = &self.config;
        let (x, c) = self.inputs(i0, cond, n)?;
        let mut ctx = Ctx::frozen(&self.params, cfg.activation);
        if let (Some((seed, first)), true) = (noise, cfg.uses_dropout()) {
            ctx.dropout = Some(Dropout::per_item(cfg.dropout_rate, seed, first, n));
        }
        let xi = ctx.input(x);
        let ci = ctx.input(c);
        let out = match cfg.kind {
            BaselineKind::UResNet | BaselineKind::BayesTd | BaselineKind::P2pGan => {
                backbone_logits(&mut ctx, cfg, xi, ci)?
            }
            BaselineKind::Spu => {
                let (pyr, (m, lv)) = spu_prior(&mut ctx, cfg, xi, ci)?;
                let params = [LatentLevelParams {
                    mean: ctx.value(m).clone(),
                    log_variance: ctx.value(lv).clone(),
                }];
                let z = match noise {
                    Some((seed, first)) => sample_latents_from(&params, SampleMode::Random, seed, first)?,
                    None => sample_latents_from(&params, SampleMode::Mean, 0, 0)?,
                };
                let z = ctx.input(z.into_iter().next().expect("one level"));
                spu_decode(&mut ctx, cfg, &pyr, z)?
            }
        };
        Ok(ctx.value(out).clone())
    }

    fn is_stochastic(&self) -> bool {
        match self.config.kind {
            BaselineKind::UResNet => false,
            BaselineKind::BayesTd | BaselineKind::P2pGan => self.config.dropout_enabled,
            BaselineKind::Spu => true,
        }
    }
}

fn to_maps(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.item(i).to_vec()).collect()
}

impl SegmentationSampler for BaselineNet {
    fn normalization(&self) -> &NormalizationConstants {
        &self.normalization
    }

    fn is_generative(&self) -> bool {
        self.is_stochastic()
    }

    /// Deterministic kinds repeat their single prediction.
    fn sample_probs(
        &self,
        i0: &Patch,
        cond: &ConditioningVector,
        first: u64,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        if !self.is_stochastic() {
            let m = self.mean_probs(i0, cond)?;
            return Ok(vec![m; count]);
        }
        let mut out = Vec::with_capacity(count);
        let mut done = 0;
        while done < count {
            let n = crate::infer::SAMPLE_CHUNK.min(count - done);
            let logits = self.logits(i0, cond, n, Some((seed, first + done as u64)))?;
            out.extend(to_maps(&probabilities(&logits)));
            done += n;
        }
        Ok(out)
    }

    fn mean_probs(&self, i0: &Patch, cond: &ConditioningVector) -> Result<Vec<f64>> {
        let logits = self.logits(i0, cond, 1, None)?;
        Ok(to_maps(&probabilities(&logits)).remove(0))
    }
}

/// Per-epoch discriminator losses below this value count as collapse.
pub const GAN_COLLAPSE_LOSS: f64 = 1e-4;
pub const GAN_COLLAPSE_EPOCHS: usize = 10;

/// Trains a baseline with the optimizer, batching and augmentation of
/// `config`; the switches of `baseline` select the architecture.
pub fn train_baseline(
    baseline: &BaselineConfig,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_baseline_with(baseline, manifest, config, None, &mut |_| {})
}

pub fn train_baseline_with(
    baseline: &BaselineConfig,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    baseline.validate()?;
    let cfg = baseline.clone();
    let tc = TrainConfig {
        use_sz0: cfg.use_sz0,
        activation: cfg.activation,
        base_filters: cfg.base_filters,
        ..config.clone()
    };
    let adam = tc.adam();
    let kl_levels = usize::from(cfg.kind == BaselineKind::Spu);
    let spec = RunSpec {
        manifest,
        config: &tc,
        model: ModelSpec::Baseline(cfg.clone()),
        resume,
        kl_levels,
    };
    let disc_losses = RefCell::new(Vec::<f64>::new());
    let warnings = RefCell::new(Vec::<String>::new());
    let mut low_epochs = 0usize;
    let mut epoch_hook = |e: &EpochLoss| {
        if cfg.kind == BaselineKind::P2pGan {
            let mut d = disc_losses.borrow_mut();
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            d.clear();
            low_epochs = if mean < GAN_COLLAPSE_LOSS { low_epochs + 1 } else { 0 };
            if low_epochs == GAN_COLLAPSE_EPOCHS {
                warnings.borrow_mut().push(format!(
                    "discriminator loss below {GAN_COLLAPSE_LOSS} for {GAN_COLLAPSE_EPOCHS} consecutive epochs (epoch {})",
                    e.epoch
                ));
            }
        }
        on_epoch(e);
    };
    let mut outcome = run_training(
        spec,
        |norm| Ok(BaselineNet::init(cfg.clone(), *norm, tc.seed)?.params),
        |session, batch, rng| {
            let n = batch.len();
            match cfg.kind {
                BaselineKind::UResNet | BaselineKind::BayesTd => {
                    let (grads, loss) = {
                        let mut ctx = Ctx::frozen(&session.params, cfg.activation);
                        if cfg.uses_dropout() {
                            ctx.dropout = Some(Dropout::per_item(cfg.dropout_rate, rng.next_u64(), 0, n));
                        }
                        let x = ctx.input(batch.i0.clone());
                        let c = ctx.input(batch.cond.clone());
                        let logits = backbone_logits(&mut ctx, &cfg, x, c)?;
                        let loss = ctx.g.bce_with_logits(logits, batch.targets.masks.clone())?;
                        let v = scalar(&ctx, loss);
                        if !v.is_finite() {
                            return Err(Error::Numerical(format!("BCE loss {v}")));
                        }
                        (ctx.g.backward(loss)?, v)
                    };
                    session.step("main", adam, &grads);
                    Ok(StepLosses {
                        recon: loss,
                        kl: vec![],
                        total: loss,
                    })
                }
                BaselineKind::Spu => {
                    let (grads, losses) = {
                        let mut ctx = Ctx::frozen(&session.params, cfg.activation);
                        let x0 = ctx.input(batch.i0.clone());
                        let x1 = ctx.input(batch.i1.clone());
                        let c = ctx.input(batch.cond.clone());
                        let (pyr, prior) = spu_prior(&mut ctx, &cfg, x0, c)?;
                        let post = spu_posterior(&mut ctx, &cfg, x0, x1, c)?;
                        let eps = standard_normal(ctx.value(post.0).shape(), rng)?;
                        let z = reparameterize(&mut ctx, post.0, post.1, eps)?;
                        let logits = spu_decode(&mut ctx, &cfg, &pyr, z)?;
                        let recon = ctx.g.bce_with_logits(logits, batch.targets.masks.clone())?;
                        let kl = graph_kl(&mut ctx.g, post, prior)?;
                        let kl_w = ctx.g.scale(kl, tc.beta);
                        let total = ctx.g.add(recon, kl_w)?;
                        let lp = |v: (Var, Var)| LatentLevelParams {
                            mean: ctx.value(v.0).clone(),
                            log_variance: ctx.value(v.1).clone(),
                        };
                        let kl64 = kl_diag_gaussian(&lp(post), &lp(prior))? / n as f64;
                        let losses = StepLosses {
                            recon: scalar(&ctx, recon),
                            kl: vec![kl64],
                            total: scalar(&ctx, total),
                        };
                        if !losses.total.is_finite() {
                            return Err(Error::Numerical(format!("SPU loss {}", losses.total)));
                        }
                        (ctx.g.backward(total)?, losses)
                    };
                    session.step("main", adam, &grads);
                    Ok(losses)
                }
                BaselineKind::P2pGan => {
                    let drop_seed = rng.next_u64();
                    let ones = Tensor::ones(&[n, 1, 1, 1]);
                    let zeros = Tensor::zeros(&[n, 1, 1, 1]);
                    // Discriminator step against the current generator.
                    let (d_grads, d_loss) = {
                        let mut ctx = Ctx::frozen(&session.params, cfg.activation);
                        let x = ctx.input(batch.i0.clone());
                        let c = ctx.input(batch.cond.clone());
                        let fake = {
                            ctx.dropout = cfg
                                .uses_dropout()
                                .then(|| Dropout::per_item(cfg.dropout_rate, drop_seed, 0, n));
                            let logits = backbone_logits(&mut ctx, &cfg, x, c)?;
                            ctx.dropout = None;
                            let p = ctx.g.sigmoid(logits);
                            let detached = ctx.value(p).clone();
                            ctx.input(detached)
                        };
                        let real = ctx.input(batch.targets.masks.clone());
                        let dr = discriminator(&mut ctx, &cfg, x, real, c)?;
                        let df = discriminator(&mut ctx, &cfg, x, fake, c)?;
                        let lr = ctx.g.bce_with_logits(dr, ones.clone())?;
                        let lf = ctx.g.bce_with_logits(df, zeros)?;
                        let sum = ctx.g.add(lr, lf)?;
                        let loss = ctx.g.scale(sum, 0.5);
                        let v = scalar(&ctx, loss);
                        if !v.is_finite() {
                            return Err(Error::Numerical(format!("discriminator loss {v}")));
                        }
                        let mut grads = ctx.g.backward(loss)?;
                        grads.retain_params(|name| name.starts_with("disc/"));
                        (grads, v)
                    };
                    session.step("disc", adam, &d_grads);
                    disc_losses.borrow_mut().push(d_loss);
                    // Generator step against the updated discriminator.
                    let (g_grads, adv, l1) = {
                        let mut ctx = Ctx::frozen(&session.params, cfg.activation);
                        ctx.dropout = cfg
                            .uses_dropout()
                            .then(|| Dropout::per_item(cfg.dropout_rate, drop_seed, 0, n));
                        let x = ctx.input(batch.i0.clone());
                        let c = ctx.input(batch.cond.clone());
                        let logits = backbone_logits(&mut ctx, &cfg, x, c)?;
                        ctx.dropout = None;
                        let p = ctx.g.sigmoid(logits);
                        let df = discriminator(&mut ctx, &cfg, x, p, c)?;
                        let adv = ctx.g.bce_with_logits(df, ones)?;
                        let y = ctx.input(batch.targets.masks.clone());
                        let diff = ctx.g.sub(p, y)?;
                        let l1 = ctx.g.abs(diff);
                        let l1 = ctx.g.mean_all(l1);
                        let l1w = ctx.g.scale(l1, cfg.gan_lambda);
                        let total = ctx.g.add(adv, l1w)?;
                        let (a, l) = (scalar(&ctx, adv), scalar(&ctx, l1));
                        if !(a.is_finite() && l.is_finite()) {
                            return Err(Error::Numerical(format!("generator loss {a} + {l}")));
                        }
                        let mut grads = ctx.g.backward(total)?;
                        grads.retain_params(|name| name.starts_with("gen/"));
                        (grads, a, l)
                    };
                    session.step("gen", adam, &g_grads);
                    Ok(StepLosses {
                        recon: l1,
                        kl: vec![],
                        total: gan_generator_loss(adv, l1, cfg.gan_lambda),
                    })
                }
            }
        },
        &mut epoch_hook,
    )?;
    outcome.warnings.extend(warnings.into_inner());
    Ok(outcome)
}
