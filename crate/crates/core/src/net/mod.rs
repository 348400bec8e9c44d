//! The U-HPNet: prior and posterior residual encoders emitting Gaussian
//! latent grids of side 1, 2, 4 and 8, and an attention-gated decoder that
//! consumes one latent per level, coarsest first.

mod checkpoint;
pub(crate) mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use uhpnet_autograd::{ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelSpec, OptimizerState, FORMAT_VERSION};
pub use layers::{side_at, width_at, Activation, INPUT_SIDE, NUM_SCALES};

use crate::data::{ConditioningVector, NormalizationConstants, Patch, PATCH_SIDE};
use crate::{Error, Result};
use layers::{Ctx, DecoderOpts, EncoderOpts, PyramidVars};

pub const MAX_LATENT_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpuConfig {
    pub num_latent_levels: usize,
    pub base_filters: usize,
    pub attention_enabled: bool,
    pub use_sz0: bool,
    pub activation: Activation,
}

impl Default for HpuConfig {
    fn default() -> Self {
        Self {
            num_latent_levels: 4,
            base_filters: 32,
            attention_enabled: true,
            use_sz0: true,
            activation: Activation::Relu,
        }
    }
}

impl HpuConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LATENT_LEVELS).contains(&self.num_latent_levels) {
            return Err(Error::InvalidInput(format!(
                "num_latent_levels {} outside 1..={MAX_LATENT_LEVELS}",
                self.num_latent_levels
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::InvalidInput("base_filters must be positive".into()));
        }
        Ok(())
    }

    /// Side of the square latent grid at each level: 1, 2, 4, 8.
    pub fn latent_sides(&self) -> Vec<usize> {
        (0..self.num_latent_levels).map(|l| 1 << l).collect()
    }

    pub fn cond_channels(&self) -> usize {
        if self.use_sz0 {
            2
        } else {
            1
        }
    }
}

/// Gaussian parameters of one latent level, batched as `[N, 1, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentLevelParams {
    pub mean: Tensor<f32>,
    pub log_variance: Tensor<f32>,
}

impl LatentLevelParams {
    pub fn side(&self) -> usize {
        self.mean.shape()[2]
    }
}

/// Prior encoder output reused by every decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub features: Vec<Tensor<f32>>,
    pub bottleneck: Tensor<f32>,
}

impl Pyramid {
    pub fn batch(&self) -> usize {
        self.bottleneck.shape()[0]
    }

    /// Copies of a single-item pyramid.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        Ok(Self {
            features: self
                .features
                .iter()
                .map(|f| f.repeat_batch(n))
                .collect::<std::result::Result<_, _>>()?,
            bottleneck: self.bottleneck.repeat_batch(n)?,
        })
    }

    pub(crate) fn to_vars(&self, ctx: &mut Ctx) -> PyramidVars {
        PyramidVars {
            features: self.features.iter().map(|f| ctx.input(f.clone())).collect(),
            bottleneck: ctx.input(self.bottleneck.clone()),
        }
    }

    pub(crate) fn from_vars(ctx: &Ctx, p: &PyramidVars) -> Self {
        Self {
            features: p.features.iter().map(|&f| ctx.value(f).clone()).collect(),
            bottleneck: ctx.value(p.bottleneck).clone(),
        }
    }
}

/// Learned parameters of a U-HPNet with its configuration and the frozen
/// training-split normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub config: HpuConfig,
    pub normalization: NormalizationConstants,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Mean,
}

/// `[N, 1, 32, 32]` batch of intensity patches.
pub fn image_batch(patches: &[&Patch]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(patches.len() * PATCH_SIDE * PATCH_SIDE);
    for p in patches {
        data.extend_from_slice(p.values());
    }
    Ok(Tensor::new(&[patches.len(), 1, PATCH_SIDE, PATCH_SIDE], data)?)
}

/// `[N, C, 1, 1]` conditioning maps: Tdiff, then sz0 when enabled.
pub fn cond_batch(conds: &[ConditioningVector], use_sz0: bool) -> Result<Tensor<f32>> {
    let c = if use_sz0 { 2 } else { 1 };
    let mut data = Vec::with_capacity(conds.len() * c);
    for v in conds {
        data.push(v.tdiff_norm as f32);
        if use_sz0 {
            data.push(v.sz0_norm as f32);
        }
    }
    Ok(Tensor::new(&[conds.len(), c, 1, 1], data)?)
}

fn enc_opts(cfg: &HpuConfig) -> EncoderOpts<'static> {
    EncoderOpts {
        base: cfg.base_filters,
        dropout_scales: &[],
    }
}

pub(crate) fn prior_vars(
    ctx: &mut Ctx,
    cfg: &HpuConfig,
    i0: Var,
    cond: Var,
) -> Result<(PyramidVars, Vec<(Var, Var)>)> {
    let pyr = layers::encoder(ctx, "prior/enc", i0, Some(cond), &enc_opts(cfg))?;
    let heads = (0..cfg.num_latent_levels)
        .map(|l| layers::latent_head(ctx, "prior/head", &pyr, l, cfg.base_filters))
        .collect::<Result<_>>()?;
    Ok((pyr, heads))
}

pub(crate) fn posterior_vars(
    ctx: &mut Ctx,
    cfg: &HpuConfig,
    i0: Var,
    i1: Var,
    cond: Var,
) -> Result<Vec<(Var, Var)>> {
    let both = ctx.g.concat(&[i0, i1])?;
    let pyr = layers::encoder(ctx, "post/enc", both, Some(cond), &enc_opts(cfg))?;
    (0..cfg.num_latent_levels)
        .map(|l| layers::latent_head(ctx, "post/head", &pyr, l, cfg.base_filters))
        .collect()
}

pub(crate) fn decode_vars(ctx: &mut Ctx, cfg: &HpuConfig, pyr: &PyramidVars, latents: &[Var]) -> Result<Var> {
    if latents.len() != cfg.num_latent_levels {
        return Err(Error::InvalidInput(format!(
            "decoder expects {} latent levels, got {}",
            cfg.num_latent_levels,
            latents.len()
        )));
    }
    let opts = DecoderOpts {
        base: cfg.base_filters,
        attention: cfg.attention_enabled,
        latents,
        dropout_scales: &[],
    };
    let d = layers::decoder(ctx, "dec", pyr, &opts)?;
    layers::seg_head(ctx, "dec", d)
}

/// Reparameterized draw `mean + exp(logvar / 2) * eps` recorded on the graph.
pub(crate) fn reparameterize(ctx: &mut Ctx, mean: Var, logvar: Var, eps: Tensor<f32>) -> Result<Var> {
    let std = ctx.g.affine(logvar, 0.5, 0.0);
    let std = ctx.g.exp(std);
    let noise = ctx.g.mul_const(std, eps)?;
    Ok(ctx.g.add(mean, noise)?)
}

fn check_batch(i0: &Tensor<f32>, cond: &Tensor<f32>, cfg: &HpuConfig) -> Result<()> {
    let (n, c, h, w) = i0.dims4()?;
    if (c, h, w) != (1, INPUT_SIDE, INPUT_SIDE) {
        return Err(Error::InvalidInput(format!(
            "image batch must be [N, 1, {INPUT_SIDE}, {INPUT_SIDE}], got {:?}",
            i0.shape()
        )));
    }
    if cond.shape() != [n, cfg.cond_channels(), 1, 1] {
        return Err(Error::InvalidInput(format!(
            "conditioning must be [{n}, {}, 1, 1], got {:?}",
            cfg.cond_channels(),
            cond.shape()
        )));
    }
    Ok(())
}

fn collect_params(ctx: &Ctx, heads: &[(Var, Var)]) -> Vec<LatentLevelParams> {
    heads
        .iter()
        .map(|&(m, lv)| LatentLevelParams {
            mean: ctx.value(m).clone(),
            log_variance: ctx.value(lv).clone(),
        })
        .collect()
}

impl NetworkWeights {
    /// Fresh weights; deterministic in `seed`.
    pub fn init(config: HpuConfig, normalization: NormalizationConstants, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut ctx = Ctx::init(&mut params, seed, config.activation);
            let i0 = ctx.input(Tensor::zeros(&[1, 1, INPUT_SIDE, INPUT_SIDE]));
            let i1 = ctx.input(Tensor::zeros(&[1, 1, INPUT_SIDE, INPUT_SIDE]));
            let cond = ctx.input(Tensor::zeros(&[1, config.cond_channels(), 1, 1]));
            let (pyr, heads) = prior_vars(&mut ctx, &config, i0, cond)?;
            posterior_vars(&mut ctx, &config, i0, i1, cond)?;
            let zs: Vec<Var> = heads.iter().map(|h| h.0).collect();
            decode_vars(&mut ctx, &config, &pyr, &zs)?;
        }
        Ok(Self {
            config,
            normalization,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Prior encoder features and prior latent parameters for a batch.
    pub fn prior_forward(&self, i0: &Tensor<f32>, cond: &Tensor<f32>) -> Result<(Pyramid, Vec<LatentLevelParams>)> {
        check_batch(i0, cond, &self.config)?;
        let mut ctx = Ctx::frozen(&self.params, self.config.activation);
        let x = ctx.input(i0.clone());
        let c = ctx.input(cond.clone());
        let (pyr, heads) = prior_vars(&mut ctx, &self.config, x, c)?;
        Ok((Pyramid::from_vars(&ctx, &pyr), collect_params(&ctx, &heads)))
    }

    pub fn posterior_forward(
        &self,
        i0: &Tensor<f32>,
        i1: &Tensor<f32>,
        cond: &Tensor<f32>,
    ) -> Result<Vec<LatentLevelParams>> {
        check_batch(i0, cond, &self.config)?;
        if i1.shape() != i0.shape() {
            return Err(Error::InvalidInput(format!(
                "follow-up batch {:?} does not match baseline {:?}",
                i1.shape(),
                i0.shape()
            )));
        }
        let mut ctx = Ctx::frozen(&self.params, self.config.activation);
        let x0 = ctx.input(i0.clone());
        let x1 = ctx.input(i1.clone());
        let c = ctx.input(cond.clone());
        let heads = posterior_vars(&mut ctx, &self.config, x0, x1, c)?;
        Ok(collect_params(&ctx, &heads))
    }

    /// Soft segmentations `[N, 1, 32, 32]`, each value in the open unit
    /// interval.
    pub fn decode(&self, pyramid: &Pyramid, latents: &[Tensor<f32>]) -> Result<Tensor<f64>> {
        let logits = self.decode_logits(pyramid, latents)?;
        Ok(probabilities(&logits))
    }

    pub fn decode_logits(&self, pyramid: &Pyramid, latents: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let n = pyramid.batch();
        for (l, z) in latents.iter().enumerate() {
            let s = 1 << l;
            if z.shape() != [n, 1, s, s] {
                return Err(Error::InvalidInput(format!(
                    "latent level {l} must be [{n}, 1, {s}, {s}], got {:?}",
                    z.shape()
                )));
            }
        }
        let mut ctx = Ctx::frozen(&self.params, self.config.activation);
        let pyr = pyramid.to_vars(&mut ctx);
        let zs: Vec<Var> = latents.iter().map(|z| ctx.input(z.clone())).collect();
        let logits = decode_vars(&mut ctx, &self.config, &pyr, &zs)?;
        Ok(ctx.value(logits).clone())
    }
}

/// Logistic of each logit in double precision, kept strictly inside (0, 1).
pub fn probabilities(logits: &Tensor<f32>) -> Tensor<f64> {
    let lo = f64::EPSILON;
    logits
        .cast::<f64>()
        .map(|z| uhpnet_autograd::sigmoid(z).clamp(lo, 1.0 - lo))
}

/// Latent grids from level parameters. Random draws for batch item `i` come
/// from stream `first_stream + i` of the ChaCha generator keyed by `seed`.
pub fn sample_latents_from(
    params: &[LatentLevelParams],
    mode: SampleMode,
    seed: u64,
    first_stream: u64,
) -> Result<Vec<Tensor<f32>>> {
    if mode == SampleMode::Mean {
        return Ok(params.iter().map(|p| p.mean.clone()).collect());
    }
    let n = params.first().map_or(0, |p| p.mean.shape()[0]);
    let mut eps: Vec<Vec<f32>> = params.iter().map(|p| Vec::with_capacity(p.mean.numel())).collect();
    for i in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(first_stream + i);
        for (p, e) in params.iter().zip(eps.iter_mut()) {
            let per = p.mean.numel() / n;
            e.extend((0..per).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            }));
        }
    }
    params
        .iter()
        .zip(eps)
        .map(|(p, e)| {
            if p.log_variance.shape() != p.mean.shape() {
                return Err(Error::InvalidInput("mean and log-variance shapes differ".into()));
            }
            let data = p
                .mean
                .data()
                .iter()
                .zip(p.log_variance.data())
                .zip(&e)
                .map(|((&m, &lv), &z)| m + (lv * 0.5).exp() * z)
                .collect();
            Ok(Tensor::new(p.mean.shape(), data)?)
        })
        .collect()
}

pub fn sample_latents(params: &[LatentLevelParams], mode: SampleMode, seed: u64) -> Result<Vec<Tensor<f32>>> {
    sample_latents_from(params, mode, seed, 0)
}

/// Gated features and the attention map of decoder gate `gate_name` (for
/// example `dec/gate3`). A `forced_map` of shape `[N, 1, h, w]` replaces the
/// computed map.
pub fn attention_gate(
    params: &ParamStore<f32>,
    activation: Activation,
    gate_name: &str,
    features: &Tensor<f32>,
    gating: &Tensor<f32>,
    forced_map: Option<&Tensor<f32>>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut ctx = Ctx::frozen(params, activation);
    let x = ctx.input(features.clone());
    let g = ctx.input(gating.clone());
    let map = ctx.attention_map(gate_name, x, g)?;
    let map = match forced_map {
        Some(m) => ctx.input(m.clone()),
        None => map,
    };
    let out = ctx.g.mul_channel_broadcast(x, map)?;
    Ok((ctx.value(out).clone(), ctx.value(map).clone()))
}
