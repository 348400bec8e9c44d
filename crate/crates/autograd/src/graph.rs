use std::collections::BTreeMap;

use crate::kernels::{self, ConvGeom};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Tensor<T>),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    SumAll(Var),
    SumPerItem(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    MulChannelBroadcast(Var, Var),
    BroadcastSpatial(Var),
    BceWithLogits(Var, Tensor<T>),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
///
/// Every op validates shapes eagerly and returns [`Error::Shape`] on
/// mismatch. Parameters registered with [`Graph::param`] are deduplicated
/// by name, so a weight used twice accumulates both contributions.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that gradients are computed for.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable leaf. Repeated calls with the same name return the
    /// same node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let v = self.value(x).map(|a| s * a + c);
        let rg = self.rg(x);
        self.push(v, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Element-wise product with a constant tensor (dropout masks, per-item
    /// weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        same_shape(self.value(x), &c, "mul_const")?;
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        let rg = self.rg(x);
        Ok(self.push(v, Op::MulConst(x, c), rg))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |a| a.exp())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |a| a.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |a| a.sqrt())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |a| a.abs())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| if a > T::zero() { a } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(x, Op::LeakyRelu(x, slope), move |a| {
            if a > T::zero() {
                a
            } else {
                a * s
            }
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Reduces every axis but the leading one: `[N, ...] -> [N]`.
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let data = (0..n)
            .map(|i| t.item(i).iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let v = Tensor::new(&[n], data).expect("shape");
        let rg = self.rg(x);
        self.push(v, Op::SumPerItem(x), rg)
    }

    /// Stride-1 convolution with `k x k` kernel (`k` odd) and same padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} for {c_out} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            c_out,
            h,
            w: wd,
            k,
            pad: k / 2,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(&[n, c_out, h, wd], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 on odd size {h}x{w}")));
        }
        let out = kernels::avg_pool2(self.value(x).data(), n * c, h, w);
        let v = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour upsampling by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample(self.value(x).data(), n * c, h, w, factor);
        let v = Tensor::new(&[n, c, h * factor, w * factor], out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Upsample(x, factor), rg))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (nx, cx, hx, wx) = self.value(x).dims4()?;
            if (nx, hx, wx) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(x).shape()
                )));
            }
            channels.push(cx);
        }
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for i in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(x).data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let v = Tensor::new(&[n, c_total, h, w], out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(v, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "slice_channels {start}+{len} out of {c}"
            )));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        let v = Tensor::new(&[n, len, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceChannels(x, start), rg))
    }

    /// `x[n, c, y, x] * a[n, 0, y, x]`
    pub fn mul_channel_broadcast(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        if (na, ca, ha, wa) != (n, 1, h, w) {
            return Err(Error::Shape(format!(
                "mul_channel_broadcast: {:?} by {:?}",
                self.value(x).shape(),
                self.value(a).shape()
            )));
        }
        let hw = h * w;
        let (xd, ad) = (self.value(x).data(), self.value(a).data());
        let mut out = Vec::with_capacity(n * c * hw);
        for i in 0..n {
            let am = &ad[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let xs = &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                out.extend(xs.iter().zip(am).map(|(&p, &q)| p * q));
            }
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(a);
        Ok(self.push(v, Op::MulChannelBroadcast(x, a), rg))
    }

    /// `[N, C, 1, 1] -> [N, C, h, w]` by replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, hx, wx) = self.value(x).dims4()?;
        if (hx, wx) != (1, 1) {
            return Err(Error::Shape(format!(
                "broadcast_spatial needs 1x1 input, got {hx}x{wx}"
            )));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::BroadcastSpatial(x), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        same_shape(self.value(logits), &target, "bce_with_logits")?;
        let n = T::from_f64(target.numel() as f64);
        let total = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&z, &y)| {
                let l = z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
                acc + l
            });
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits(logits, target),
            rg,
        ))
    }

    /// Per-item group normalization followed by a per-channel affine map:
    /// channels are split into `groups` contiguous groups and each group of
    /// each item is standardized over its channels and pixels.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("group_norm: {c} channels in {groups} groups")));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "group_norm: {name} has shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let m = c / groups * h * w;
        let eps = T::from_f64(eps);
        let mf = T::from_f64(m as f64);
        let xd = self.value(x).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(n * groups);
        for chunk in xd.chunks(m) {
            let mean = chunk.iter().fold(T::zero(), |a, &b| a + b) / mf;
            let var = chunk.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(chunk.iter().map(|&v| (v - mean) * is));
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let hw = h * w;
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                gd[ch] * v + bd[ch]
            })
            .collect();
        let v = Tensor::new(&[n, c, h, w], out)?;
        let xhat = Tensor::new(&[n, c, h, w], xhat)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.shape()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                acc(*a, dy.zip_map(val(*b), |g, y| g * y));
                acc(*b, dy.zip_map(val(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, dy.zip_map(bv, |g, y| g / y));
                let q = node.value.zip_map(bv, |q, y| q / y);
                acc(*b, dy.zip_map(&q, |g, r| -g * r));
            }
            Op::Affine(x, s) => {
                let s = T::from_f64(*s);
                acc(*x, dy.map(|g| g * s));
            }
            Op::MulConst(x, c) => acc(*x, dy.zip_map(c, |g, k| g * k)),
            Op::Exp(x) => acc(*x, dy.zip_map(&node.value, |g, e| g * e)),
            Op::Log(x) => acc(*x, dy.zip_map(val(*x), |g, a| g / a)),
            Op::Sqrt(x) => {
                let half = T::from_f64(0.5);
                acc(*x, dy.zip_map(&node.value, |g, r| g * half / r));
            }
            Op::Abs(x) => acc(
                *x,
                dy.zip_map(val(*x), |g, a| {
                    if a > T::zero() {
                        g
                    } else if a < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                dy.zip_map(&node.value, |g, s| g * s * (T::one() - s)),
            ),
            Op::Relu(x) => acc(
                *x,
                dy.zip_map(val(*x), |g, a| if a > T::zero() { g } else { T::zero() }),
            ),
            Op::LeakyRelu(x, slope) => {
                let s = T::from_f64(*slope);
                acc(
                    *x,
                    dy.zip_map(val(*x), |g, a| if a > T::zero() { g } else { g * s }),
                )
            }
            Op::SumAll(x) => {
                let g = dy.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), g));
            }
            Op::SumPerItem(x) => {
                let xv = val(*x);
                let per = xv.numel() / xv.shape()[0];
                let data = dy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, per))
                    .collect();
                acc(*x, Tensor::new(xv.shape(), data)?);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let g = kernels::conv2d_backward(
                    geom,
                    val(*x).data(),
                    val(*w).data(),
                    dy.data(),
                    need,
                );
                if let Some(dx) = g.dx {
                    acc(*x, Tensor::new(val(*x).shape(), dx)?);
                }
                if let Some(dw) = g.dw {
                    acc(*w, Tensor::new(val(*w).shape(), dw)?);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    acc(*b, Tensor::new(val(*b).shape(), db)?);
                }
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let dx = kernels::avg_pool2_backward(dy.data(), n * c, h, w);
                acc(*x, Tensor::new(val(*x).shape(), dx)?);
            }
            Op::Upsample(x, f) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let dx = kernels::upsample_backward(dy.data(), n * c, h, w, *f);
                acc(*x, Tensor::new(val(*x).shape(), dx)?);
            }
            Op::Concat(xs) => {
                let (n, c_total, h, w) = dy.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).shape()[1];
                    if self.rg(x) {
                        let mut part = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let base = (i * c_total + offset) * hw;
                            part.extend_from_slice(&dy.data()[base..base + c * hw]);
                        }
                        acc(x, Tensor::new(val(x).shape(), part)?);
                    }
                    offset += c;
                }
            }
            Op::SliceChannels(x, start) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let len = dy.shape()[1];
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let dst = (i * c + start) * hw;
                    dx.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&dy.data()[i * len * hw..(i + 1) * len * hw]);
                }
                acc(*x, dx);
            }
            Op::MulChannelBroadcast(x, a) => {
                let (n, c, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let (xd, ad, gd) = (val(*x).data(), val(*a).data(), dy.data());
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(n * c * hw);
                    for i in 0..n {
                        let am = &ad[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let gs = &gd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            dx.extend(gs.iter().zip(am).map(|(&g, &q)| g * q));
                        }
                    }
                    acc(*x, Tensor::new(&[n, c, h, w], dx)?);
                }
                if self.rg(*a) {
                    let mut da = vec![T::zero(); n * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                da[i * hw + p] = da[i * hw + p] + gd[base + p] * xd[base + p];
                            }
                        }
                    }
                    acc(*a, Tensor::new(&[n, 1, h, w], da)?);
                }
            }
            Op::BroadcastSpatial(x) => {
                let xv = val(*x);
                let per = dy.numel() / xv.numel();
                let dx = dy
                    .data()
                    .chunks(per)
                    .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
                    .collect();
                acc(*x, Tensor::new(xv.shape(), dx)?);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (_, c, h, w) = xhat.dims4()?;
                let hw = h * w;
                let m = c / groups * hw;
                let (gd, xh) = (dy.data(), xhat.data());
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (&g, &v)) in gd.iter().zip(xh).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] = dgamma[ch] + g * v;
                    dbeta[ch] = dbeta[ch] + g;
                }
                if self.rg(*x) {
                    let mf = T::from_f64(m as f64);
                    let mut dx = Vec::with_capacity(gd.len());
                    for (k, (gs, xs)) in gd.chunks(m).zip(xh.chunks(m)).enumerate() {
                        let base = k * m;
                        let dxh: Vec<T> = gs
                            .iter()
                            .enumerate()
                            .map(|(j, &g)| g * gam[((base + j) / hw) % c])
                            .collect();
                        let s1 = dxh.iter().fold(T::zero(), |a, &b| a + b);
                        let s2 = dxh.iter().zip(xs).fold(T::zero(), |a, (&d, &v)| a + d * v);
                        let is = inv_std[k];
                        dx.extend(
                            dxh.iter()
                                .zip(xs)
                                .map(|(&d, &v)| is / mf * (mf * d - s1 - v * s2)),
                        );
                    }
                    acc(*x, Tensor::new(xhat.shape(), dx)?);
                }
                acc(*gamma, Tensor::new(&[c], dgamma)?);
                acc(*beta, Tensor::new(&[c], dbeta)?);
            }
            Op::BceWithLogits(z, target) => {
                let scale = dy.data()[0] / T::from_f64(target.numel() as f64);
                acc(
                    *z,
                    val(*z).zip_map(target, |zv, y| (sigmoid(zv) - y) * scale),
                );
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drops named parameters for which `keep` is false, so an optimizer
    /// step leaves them untouched.
    pub fn retain_params(&mut self, keep: impl Fn(&str) -> bool) {
        self.params.retain(|name, _| keep(name));
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|(_, g)| g.all_finite())
    }

    /// Gradients of every named parameter that influenced the output.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.wrt(*v).map(|g| (name.as_str(), g)))
    }
}
