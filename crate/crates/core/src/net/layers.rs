//! Graph-building blocks shared by the U-HPNet and the baselines.
//!
//! Parameters are defined by the forward code itself: running a forward pass
//! in initialization mode creates every missing weight (fan-in scaled normal
//! draws, in call order), while frozen mode only reads them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use uhpnet_autograd::{Graph, ParamStore, Tensor, Var};

use crate::{Error, Result};

pub const NUM_SCALES: usize = 6;
pub const INPUT_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

/// Number of normalization groups for `c` channels: the largest divisor of
/// `c` up to 8 that leaves at least 4 channels per group.
pub fn norm_groups(c: usize) -> usize {
    (1..=8).rev().find(|&g| c % g == 0 && c / g >= 4).unwrap_or(1)
}

pub fn side_at(scale: usize) -> usize {
    INPUT_SIDE >> scale
}

/// Channel width at `scale`: doubling from `base`, capped at `8 * base`.
pub fn width_at(base: usize, scale: usize) -> usize {
    (base << scale).min(8 * base)
}

pub(crate) enum Params<'a> {
    Frozen(&'a ParamStore<f32>),
    Init(&'a mut ParamStore<f32>, ChaCha8Rng),
}

/// How freshly created weights are drawn.
#[derive(Clone, Copy)]
pub(crate) enum Init {
    /// `N(0, gain² · 2 / fan_in)`.
    He(f64),
    Zero,
    Const(f64),
}

/// Independent dropout streams, one per batch item, so a sample's masks do
/// not depend on what else shares its batch.
pub(crate) struct Dropout {
    pub rate: f64,
    pub rngs: Vec<ChaCha8Rng>,
}

impl Dropout {
    pub fn per_item(rate: f64, seed: u64, first_index: u64, n: usize) -> Self {
        let rngs = (0..n as u64)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(first_index + i);
                r
            })
            .collect();
        Self { rate, rngs }
    }
}

pub(crate) struct Ctx<'a> {
    pub g: Graph<f32>,
    params: Params<'a>,
    pub act: Activation,
    pub dropout: Option<Dropout>,
}

impl<'a> Ctx<'a> {
    pub fn frozen(params: &'a ParamStore<f32>, act: Activation) -> Self {
        Self {
            g: Graph::new(),
            params: Params::Frozen(params),
            act,
            dropout: None,
        }
    }

    pub fn init(params: &'a mut ParamStore<f32>, seed: u64, act: Activation) -> Self {
        Self {
            g: Graph::new(),
            params: Params::Init(params, ChaCha8Rng::seed_from_u64(seed)),
            act,
            dropout: None,
        }
    }

    pub fn input(&mut self, t: Tensor<f32>) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<f32> {
        self.g.value(v)
    }

    pub fn channels(&self, v: Var) -> usize {
        self.g.value(v).shape()[1]
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Var> {
        let t = match &mut self.params {
            Params::Frozen(store) => store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?,
            Params::Init(store, rng) => {
                if !store.contains_key(name) {
                    let numel: usize = shape.iter().product();
                    let data = match init {
                        Init::Zero => vec![0.0; numel],
                        Init::Const(v) => vec![v as f32; numel],
                        Init::He(gain) => {
                            let std = gain * (2.0 / fan_in as f64).sqrt();
                            (0..numel)
                                .map(|_| {
                                    let z: f64 = StandardNormal.sample(rng);
                                    (z * std) as f32
                                })
                                .collect()
                        }
                    };
                    store.insert(name.to_string(), Tensor::new(shape, data)?);
                }
                &store[name]
            }
        };
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(self.g.param(name, t))
    }

    pub fn conv(&mut self, name: &str, x: Var, c_out: usize, k: usize, init: Init) -> Result<Var> {
        self.conv_biased(name, x, c_out, k, init, Init::Zero)
    }

    pub fn conv_biased(&mut self, name: &str, x: Var, c_out: usize, k: usize, init: Init, bias: Init) -> Result<Var> {
        let c_in = self.channels(x);
        let w = self.weight(&format!("{name}/w"), &[c_out, c_in, k, k], c_in * k * k, init)?;
        let b = self.weight(&format!("{name}/b"), &[c_out], 1, bias)?;
        Ok(self.g.conv2d(x, w, Some(b))?)
    }

    pub fn act(&mut self, x: Var) -> Var {
        match self.act {
            Activation::Relu => self.g.relu(x),
            Activation::LeakyRelu => self.g.leaky_relu(x, LEAKY_SLOPE),
        }
    }

    /// Group normalization with a learned per-channel scale and shift.
    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let c = self.channels(x);
        let gamma = self.weight(&format!("{name}/g"), &[c], 1, Init::Const(1.0))?;
        let beta = self.weight(&format!("{name}/b"), &[c], 1, Init::Zero)?;
        Ok(self.g.group_norm(x, gamma, beta, norm_groups(c), NORM_EPS)?)
    }

    /// Pre-activation residual block (normalize, activate, 3×3 convolution,
    /// twice) with a 1×1 projection on the shortcut when the width changes.
    pub fn resblock(&mut self, name: &str, x: Var, c_out: usize) -> Result<Var> {
        let c_in = self.channels(x);
        let h = self.norm(&format!("{name}/n1"), x)?;
        let h = self.act(h);
        let h = self.conv(&format!("{name}/c1"), h, c_out, 3, Init::He(1.0))?;
        let h = self.norm(&format!("{name}/n2"), h)?;
        let h = self.act(h);
        let h = self.conv(&format!("{name}/c2"), h, c_out, 3, Init::He(0.25))?;
        let skip = if c_in == c_out {
            x
        } else {
            self.conv(&format!("{name}/proj"), x, c_out, 1, Init::He(0.5))?
        };
        Ok(self.g.add(h, skip)?)
    }

    /// Inverted dropout with per-item masks; identity when disabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let shape = self.g.value(x).shape().to_vec();
        let n = shape[0];
        if d.rngs.len() != n {
            return Err(Error::InvalidInput(format!(
                "dropout has {} streams for a batch of {n}",
                d.rngs.len()
            )));
        }
        let per = shape[1..].iter().product::<usize>();
        let keep = 1.0 - d.rate;
        let scale = (1.0 / keep) as f32;
        let mut mask = Vec::with_capacity(n * per);
        for rng in d.rngs.iter_mut() {
            mask.extend((0..per).map(|_| if rng.random_bool(keep) { scale } else { 0.0 }));
        }
        Ok(self.g.mul_const(x, Tensor::new(&shape, mask)?)?)
    }

    /// Additive attention gate: `x` at side `h` is scaled by a `[0, 1]` map
    /// computed from `x` and the coarser gating signal `gate` at side `h/2`.
    pub fn attention_gate(&mut self, name: &str, x: Var, gate: Var) -> Result<Var> {
        let alpha = self.attention_map(name, x, gate)?;
        Ok(self.g.mul_channel_broadcast(x, alpha)?)
    }

    pub fn attention_map(&mut self, name: &str, x: Var, gate: Var) -> Result<Var> {
        let (_, c, h, _) = self.value(x).dims4()?;
        let (_, _, hg, _) = self.value(gate).dims4()?;
        if hg * 2 != h {
            return Err(Error::InvalidInput(format!(
                "gating signal of side {hg} cannot gate features of side {h}"
            )));
        }
        let inter = (c / 2).max(1);
        let theta = self.conv(&format!("{name}/theta"), x, inter, 1, Init::He(1.0))?;
        let theta = self.g.avg_pool2(theta)?;
        let phi = self.conv(&format!("{name}/phi"), gate, inter, 1, Init::He(1.0))?;
        let s = self.g.add(theta, phi)?;
        let s = self.g.relu(s);
        let psi = self.conv(&format!("{name}/psi"), s, 1, 1, Init::He(1.0))?;
        let psi = self.g.sigmoid(psi);
        Ok(self.g.upsample(psi, 2)?)
    }
}

/// Encoder features at every scale plus the conditioned bottleneck.
pub(crate) struct PyramidVars {
    pub features: Vec<Var>,
    pub bottleneck: Var,
}

pub(crate) struct EncoderOpts<'a> {
    pub base: usize,
    /// Scales whose block output passes through dropout.
    pub dropout_scales: &'a [usize],
}

/// Stem, one residual block per scale with average pooling in between, and
/// a 1×1 fusion of the coarsest features with the conditioning maps.
pub(crate) fn encoder(
    ctx: &mut Ctx,
    prefix: &str,
    image: Var,
    cond: Option<Var>,
    opts: &EncoderOpts,
) -> Result<PyramidVars> {
    let mut x = ctx.conv(&format!("{prefix}/stem"), image, width_at(opts.base, 0), 3, Init::He(1.0))?;
    let mut features = Vec::with_capacity(NUM_SCALES);
    for s in 0..NUM_SCALES {
        if s > 0 {
            x = ctx.g.avg_pool2(x)?;
        }
        x = ctx.resblock(&format!("{prefix}/s{s}"), x, width_at(opts.base, s))?;
        if opts.dropout_scales.contains(&s) {
            x = ctx.dropout(x)?;
        }
        features.push(x);
    }
    let top = features[NUM_SCALES - 1];
    let fused = match cond {
        Some(c) => ctx.g.concat(&[top, c])?,
        None => top,
    };
    let b = ctx.conv(
        &format!("{prefix}/bottleneck"),
        fused,
        width_at(opts.base, NUM_SCALES - 1),
        1,
        Init::He(1.0),
    )?;
    let bottleneck = ctx.act(b);
    Ok(PyramidVars {
        features,
        bottleneck,
    })
}

pub(crate) struct DecoderOpts<'a> {
    pub base: usize,
    pub attention: bool,
    /// `latents[l]` is concatenated at scale `5 - l` (side `2^l`).
    pub latents: &'a [Var],
    pub dropout_scales: &'a [usize],
}

/// Coarse-to-fine decoder. Returns the full-resolution feature map.
pub(crate) fn decoder(
    ctx: &mut Ctx,
    prefix: &str,
    pyr: &PyramidVars,
    opts: &DecoderOpts,
) -> Result<Var> {
    let top = NUM_SCALES - 1;
    let latent_at = |s: usize| opts.latents.get(top - s).copied();
    let mut parts = vec![pyr.bottleneck];
    if let Some(z) = latent_at(top) {
        parts.push(z);
    }
    let x = ctx.g.concat(&parts)?;
    let mut d = ctx.resblock(&format!("{prefix}/s{top}"), x, width_at(opts.base, top))?;
    if opts.dropout_scales.contains(&top) {
        d = ctx.dropout(d)?;
    }
    for s in (0..top).rev() {
        let up = ctx.g.upsample(d, 2)?;
        let skip = if opts.attention {
            ctx.attention_gate(&format!("{prefix}/gate{s}"), pyr.features[s], d)?
        } else {
            pyr.features[s]
        };
        let mut parts = vec![up, skip];
        if let Some(z) = latent_at(s) {
            parts.push(z);
        }
        let x = ctx.g.concat(&parts)?;
        d = ctx.resblock(&format!("{prefix}/s{s}"), x, width_at(opts.base, s))?;
        if opts.dropout_scales.contains(&s) {
            d = ctx.dropout(d)?;
        }
    }
    Ok(d)
}

/// Initial bias of the output logit.
pub const HEAD_BIAS_INIT: f64 = 0.0;

/// Activation and 1×1 projection to a single logit channel.
pub(crate) fn seg_head(ctx: &mut Ctx, prefix: &str, d: Var) -> Result<Var> {
    let h = ctx.act(d);
    ctx.conv_biased(&format!("{prefix}/head"), h, 1, 1, Init::He(1.0), Init::Const(HEAD_BIAS_INIT))
}

/// Gaussian parameter head for latent level `level`: features at scale
/// `5 - level` joined with the broadcast bottleneck, two 1×1 convolutions,
/// and a final zero-initialized projection to (mean, log-variance).
pub(crate) fn latent_head(ctx: &mut Ctx, prefix: &str, pyr: &PyramidVars, level: usize, base: usize) -> Result<(Var, Var)> {
    let s = NUM_SCALES - 1 - level;
    let side = side_at(s);
    let b = ctx.g.broadcast_spatial(pyr.bottleneck, side, side)?;
    let x = ctx.g.concat(&[pyr.features[s], b])?;
    let h = ctx.conv(&format!("{prefix}/l{level}/c1"), x, width_at(base, s), 1, Init::He(1.0))?;
    let h = ctx.act(h);
    let out = ctx.conv(&format!("{prefix}/l{level}/out"), h, 2, 1, Init::Zero)?;
    let mean = ctx.g.slice_channels(out, 0, 1)?;
    let logvar = ctx.g.slice_channels(out, 1, 1)?;
    Ok((mean, logvar))
}
