use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use uhpnet_autograd::{Graph, Real, Tensor, Var};

use crate::data::Mask;
use crate::net::LatentLevelParams;
use crate::{Error, Result};

pub const IOU_EPS: f64 = 1e-6;
/// Keeps the square root of the soft area differentiable at zero.
const AREA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    Bce,
    Iou,
    IouL1Diam,
}

/// Differentiable stand-in for the longest diameter of a soft mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiameterProxy {
    /// Diameter of the circle with the mask's mass as area.
    EquivalentCircle,
    /// `4·√λ` with `λ` the largest eigenvalue of the mass covariance: the
    /// full major axis of a uniform ellipse.
    Moments,
}

/// Closed-form KL divergence between diagonal Gaussians, summed over every
/// element of the grids.
pub fn kl_diag_gaussian(q: &LatentLevelParams, p: &LatentLevelParams) -> Result<f64> {
    for t in [&q.log_variance, &p.mean, &p.log_variance] {
        if t.shape() != q.mean.shape() {
            return Err(Error::InvalidInput(format!(
                "KL between grids of shape {:?} and {:?}",
                q.mean.shape(),
                t.shape()
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..q.mean.numel() {
        let (mq, lq) = (q.mean.data()[i] as f64, q.log_variance.data()[i] as f64);
        let (mp, lp) = (p.mean.data()[i] as f64, p.log_variance.data()[i] as f64);
        total += 0.5 * (lp - lq + ((lq).exp() + (mq - mp).powi(2)) / lp.exp() - 1.0);
    }
    Ok(total)
}

fn check_len(pred: &[f64], target: &Mask) -> Result<()> {
    if pred.len() != target.bits().len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.bits().len()
        )));
    }
    Ok(())
}

/// `1 − (Σpy + ε) / (Σp + Σy − Σpy + ε)`.
pub fn soft_iou_loss(pred: &[f64], target: &Mask) -> Result<f64> {
    check_len(pred, target)?;
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    for (&p, &y) in pred.iter().zip(target.bits()) {
        let y = if y { 1.0 } else { 0.0 };
        inter += p * y;
        sp += p;
        sy += y;
    }
    Ok(1.0 - (inter + IOU_EPS) / (sp + sy - inter + IOU_EPS))
}

/// Diameter of the circle whose area equals the soft mask's mass.
pub fn soft_diameter(pred: &[f64], spacing_mm: f64) -> f64 {
    let area: f64 = pred.iter().sum();
    2.0 * (area.max(0.0) / PI).sqrt() * spacing_mm
}

/// Pixels subtracted from the moment estimate so that, on rasterized
/// ellipses, it tracks the centre-to-centre longest diameter.
pub const MOMENT_DIAMETER_OFFSET_PX: f64 = 0.5;

/// Major-axis length of a soft mask from its second moments, in mm.
pub fn moment_diameter(pred: &[f64], side: usize, spacing_mm: f64) -> f64 {
    let mass: f64 = pred.iter().sum();
    if mass <= 0.0 {
        return 0.0;
    }
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &p) in pred.iter().enumerate() {
        let (y, x) = ((i / side) as f64, (i % side) as f64);
        sx += p * x;
        sy += p * y;
        sxx += p * x * x;
        syy += p * y * y;
        sxy += p * x * y;
    }
    let (mx, my) = (sx / mass, sy / mass);
    let cxx = sxx / mass - mx * mx;
    let cyy = syy / mass - my * my;
    let cxy = sxy / mass - mx * my;
    let half = (cxx - cyy) / 2.0;
    let lambda = (cxx + cyy) / 2.0 + (half * half + cxy * cxy).sqrt();
    (4.0 * lambda.max(0.0).sqrt() - MOMENT_DIAMETER_OFFSET_PX).max(0.0) * spacing_mm
}

/// Soft diameter under `proxy` of a square soft mask.
pub fn proxy_diameter(pred: &[f64], spacing_mm: f64, proxy: DiameterProxy) -> f64 {
    match proxy {
        DiameterProxy::EquivalentCircle => soft_diameter(pred, spacing_mm),
        DiameterProxy::Moments => {
            let side = (pred.len() as f64).sqrt().round() as usize;
            moment_diameter(pred, side, spacing_mm)
        }
    }
}

/// Mean pixel-wise binary cross-entropy of probabilities.
pub fn bce(pred: &[f64], target: &Mask) -> Result<f64> {
    check_len(pred, target)?;
    let eps = 1e-12;
    let total: f64 = pred
        .iter()
        .zip(target.bits())
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn recon_loss(
    pred: &[f64],
    target: &Mask,
    d1_gt_mm: f64,
    spacing_mm: f64,
    gamma: f64,
    mode: ReconMode,
    proxy: DiameterProxy,
) -> Result<f64> {
    match mode {
        ReconMode::Bce => bce(pred, target),
        ReconMode::Iou => soft_iou_loss(pred, target),
        ReconMode::IouL1Diam => Ok(soft_iou_loss(pred, target)?
            + gamma * (proxy_diameter(pred, spacing_mm, proxy) - d1_gt_mm).abs()),
    }
}

/// Per-item targets of a reconstruction term.
pub struct ReconTargets<T: Real> {
    /// `[N, 1, H, W]` binary masks.
    pub masks: Tensor<T>,
    /// `[N]` follow-up diameters in mm.
    pub d1_mm: Tensor<T>,
    /// `[N]` pixel spacings in mm.
    pub spacing_mm: Tensor<T>,
}

/// Batch-mean soft IoU loss of probabilities `p` recorded on `g`.
pub fn graph_soft_iou<T: Real>(g: &mut Graph<T>, p: Var, masks: &Tensor<T>) -> Result<Var> {
    let n = masks.shape()[0];
    let y = g.constant(masks.clone());
    let py = g.mul(p, y)?;
    let inter = g.sum_per_item(py);
    let sp = g.sum_per_item(p);
    let sy: Vec<T> = (0..n).map(|i| masks.item(i).iter().fold(T::zero(), |a, &b| a + b)).collect();
    let sy = g.constant(Tensor::new(&[n], sy)?);
    let union = g.add(sp, sy)?;
    let union = g.sub(union, inter)?;
    let union = g.affine(union, 1.0, IOU_EPS);
    let num = g.affine(inter, 1.0, IOU_EPS);
    let iou = g.div(num, union)?;
    let mean = g.mean_all(iou);
    Ok(g.affine(mean, -1.0, 1.0))
}

/// `[N]` equivalent-circle diameters in mm.
pub fn graph_soft_diameter<T: Real>(g: &mut Graph<T>, p: Var, spacing_mm: &Tensor<T>) -> Result<Var> {
    let area = g.sum_per_item(p);
    let r2 = g.affine(area, 1.0 / PI, AREA_FLOOR);
    let r = g.sqrt(r2);
    let d = g.scale(r, 2.0);
    Ok(g.mul_const(d, spacing_mm.clone())?)
}

/// `[N]` second-moment major-axis lengths in mm.
pub fn graph_moment_diameter<T: Real>(g: &mut Graph<T>, p: Var, spacing_mm: &Tensor<T>) -> Result<Var> {
    let (n, _, h, w) = g.value(p).dims4()?;
    let coord = |f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor<T>> {
        let mut v = Vec::with_capacity(n * h * w);
        for _ in 0..n {
            for i in 0..h * w {
                v.push(T::from_f64(f((i / w) as f64, (i % w) as f64)));
            }
        }
        Ok(Tensor::new(&[n, 1, h, w], v)?)
    };
    let mass = g.sum_per_item(p);
    let mass = g.affine(mass, 1.0, AREA_FLOOR);
    let mut moment = |f: &dyn Fn(f64, f64) -> f64| -> Result<Var> {
        let weighted = g.mul_const(p, coord(f)?)?;
        let s = g.sum_per_item(weighted);
        Ok(g.div(s, mass)?)
    };
    let mx = moment(&|_, x| x)?;
    let my = moment(&|y, _| y)?;
    let ex2 = moment(&|_, x| x * x)?;
    let ey2 = moment(&|y, _| y * y)?;
    let exy = moment(&|y, x| x * y)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let cxx = g.sub(ex2, mx2)?;
    let cyy = g.sub(ey2, my2)?;
    let cxy = g.sub(exy, mxy)?;
    let diff = g.sub(cxx, cyy)?;
    let half = g.scale(diff, 0.5);
    let half2 = g.mul(half, half)?;
    let cxy2 = g.mul(cxy, cxy)?;
    let r2 = g.add(half2, cxy2)?;
    let r2 = g.affine(r2, 1.0, AREA_FLOOR);
    let r = g.sqrt(r2);
    let tr = g.add(cxx, cyy)?;
    let mean = g.scale(tr, 0.5);
    let lambda = g.add(mean, r)?;
    let lambda = g.affine(lambda, 1.0, AREA_FLOOR);
    let root = g.sqrt(lambda);
    let d = g.affine(root, 4.0, -MOMENT_DIAMETER_OFFSET_PX);
    let d = g.relu(d);
    Ok(g.mul_const(d, spacing_mm.clone())?)
}

/// Batch-mean reconstruction loss from logits.
pub fn graph_recon<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &ReconTargets<T>,
    gamma: f64,
    mode: ReconMode,
    proxy: DiameterProxy,
) -> Result<Var> {
    if mode == ReconMode::Bce {
        return Ok(g.bce_with_logits(logits, targets.masks.clone())?);
    }
    let p = g.sigmoid(logits);
    graph_recon_from_probs(g, p, targets, gamma, mode, proxy)
}

/// Reconstruction loss from probabilities; `mode` must not be BCE.
pub fn graph_recon_from_probs<T: Real>(
    g: &mut Graph<T>,
    p: Var,
    targets: &ReconTargets<T>,
    gamma: f64,
    mode: ReconMode,
    proxy: DiameterProxy,
) -> Result<Var> {
    let iou = graph_soft_iou(g, p, &targets.masks)?;
    match mode {
        ReconMode::Iou => Ok(iou),
        ReconMode::IouL1Diam => {
            let d = match proxy {
                DiameterProxy::EquivalentCircle => graph_soft_diameter(g, p, &targets.spacing_mm)?,
                DiameterProxy::Moments => graph_moment_diameter(g, p, &targets.spacing_mm)?,
            };
            let gt = g.constant(targets.d1_mm.clone());
            let diff = g.sub(d, gt)?;
            let l1 = g.abs(diff);
            let l1 = g.mean_all(l1);
            let l1 = g.scale(l1, gamma);
            Ok(g.add(iou, l1)?)
        }
        ReconMode::Bce => Err(Error::InvalidInput(
            "BCE reconstruction is computed from logits".into(),
        )),
    }
}

/// Batch-mean KL between diagonal Gaussians `q` and `p` on the graph.
pub fn graph_kl<T: Real>(g: &mut Graph<T>, q: (Var, Var), p: (Var, Var)) -> Result<Var> {
    let n = g.value(q.0).shape()[0] as f64;
    let d = g.sub(q.0, p.0)?;
    let d2 = g.mul(d, d)?;
    let vq = g.exp(q.1);
    let num = g.add(vq, d2)?;
    let neg_lp = g.scale(p.1, -1.0);
    let inv_vp = g.exp(neg_lp);
    let ratio = g.mul(num, inv_vp)?;
    let dl = g.sub(p.1, q.1)?;
    let s = g.add(dl, ratio)?;
    let s = g.affine(s, 0.5, -0.5);
    let total = g.sum_all(s);
    Ok(g.scale(total, 1.0 / n))
}
