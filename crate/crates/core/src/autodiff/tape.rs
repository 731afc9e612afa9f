use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f32,
    pub momentum: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        op: UnaryOp,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    Reduce {
        a: Var,
        // input flat index -> output flat index
        map: Vec<usize>,
        factor: f32,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<f32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: BnMode,
        batch: usize,
        plane: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
        channels: usize,
        plane: usize,
    },
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        outputs: usize,
        inputs: usize,
    },
    Softmax {
        a: Var,
        width: usize,
    },
    LogisticBce {
        logit: Var,
        target: Vec<f32>,
    },
    Reshape {
        a: Var,
    },
    Select {
        a: Var,
        offset: usize,
    },
    Mask {
        a: Var,
        mask: Vec<bool>,
    },
    NonzeroMean {
        a: Var,
        plane: usize,
        counts: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Execution-ordered record of tensor operations for reverse-mode
/// differentiation. Each training step records onto a fresh tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    stable_sigmoid(x)
}

/// Per-element stable logistic BCE: `max(x,0) - x t + ln(1 + exp(-|x|))`.
pub fn logistic_bce_value(x: f32, t: f32) -> f32 {
    let x = x as f64;
    let t = t as f64;
    (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()) as f32
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Value-equal copy of `v` through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.node(v);
        if !node.requires_grad || !self.consumed {
            return None;
        }
        let shape = node.value.shape();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        };
        let out_shape = if va.shape() == vb.shape() || vb.len() == 1 {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let ia = |i: usize| if da.len() == 1 { 0 } else { i };
        let ib = |i: usize| if db.len() == 1 { 0 } else { i };
        let data: Vec<f32> = (0..n)
            .map(|i| match op {
                BinaryOp::Add => da[ia(i)] + db[ib(i)],
                BinaryOp::Mul => da[ia(i)] * db[ib(i)],
            })
            .collect();
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, rg, Op::Binary { op, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Result<Var> {
        let va = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = va.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
                return Err(Error::domain("log", format!("nonpositive input {bad}")));
            }
        }
        let value = va.map(|x| match op {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => stable_sigmoid(x),
            UnaryOp::Log => x.ln(),
            UnaryOp::Neg => -x,
        });
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Unary { op, a }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Log)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Neg)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Scale { a, factor }))
    }

    /// Adds a constant scalar.
    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    /// Sum or mean over `axes`, which are removed from the shape.
    /// An empty `axes` slice reduces over every axis.
    pub fn reduce(&mut self, a: Var, op: ReduceOp, axes: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let all: Vec<usize> = (0..shape.len()).collect();
        let axes = if axes.is_empty() { &all[..] } else { axes };
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::shape(
                    "reduce",
                    format!("axis {ax} out of range for shape {shape:?}"),
                ));
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let reduced: usize = axes.iter().map(|&ax| shape[ax]).product();
        let out_len: usize = out_shape.iter().product();
        let map = reduction_map(&shape, axes);
        let mut acc = vec![0.0f64; out_len];
        for (&x, &o) in va.data().iter().zip(&map) {
            acc[o] += x as f64;
        }
        let factor = match op {
            ReduceOp::Sum => 1.0,
            ReduceOp::Mean => 1.0 / reduced as f32,
        };
        let data = acc.iter().map(|&s| (s * factor as f64) as f32).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reduce { a, map, factor }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, ReduceOp::Sum, &[])
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, ReduceOp::Sum, axes)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, ReduceOp::Mean, &[])
    }

    /// Bias-free 2-D cross-correlation. `input: [N, Cin, H, W]`,
    /// `weight: [Cout, Cin, k, k]` with `k` in {1, 3}.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.value(input), self.value(weight));
        let xs = xi.shape();
        let ws = wi.shape();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be 4-D, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be 4-D, got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {}, weight expects {}", xs[1], ws[1]),
            ));
        }
        if ws[2] != ws[3] || !(ws[2] == 1 || ws[2] == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size must be 1x1 or 3x3, got {}x{}", ws[2], ws[3]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let k = ws[2];
        if xs[2] + 2 * padding < k || xs[3] + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("spatial size {}x{} too small for kernel {k}", xs[2], xs[3]),
            ));
        }
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad: padding,
            ho: (xs[2] + 2 * padding - k) / stride + 1,
            wo: (xs[3] + 2 * padding - k) / stride + 1,
        };
        let batch = xs[0];
        let (data, cols) = kernels::conv_forward(&geom, batch, xi.data(), wi.data());
        let value = Tensor::new(vec![batch, geom.cout, geom.ho, geom.wo], data)?;
        let rg = self.rg(&[input, weight]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                geom,
                batch,
                cols,
            },
        ))
    }

    /// Batch normalization over the channel axis of `[N, C, H, W]`.
    /// Train mode updates `stats` in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: BnMode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        if config.eps <= 0.0 {
            return Err(Error::domain("batchnorm2d", "eps must be positive"));
        }
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("input must be 4-D, got {xs:?}")));
        }
        let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [ch] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} has shape {:?}, expected [{ch}]", self.value(v).shape()),
                ));
            }
        }
        if stats.mean.shape() != [ch] || stats.var.shape() != [ch] {
            return Err(Error::shape("batchnorm2d", "running statistics channel count"));
        }
        let count = batch * plane;
        if mode == BnMode::Train && count < 2 {
            return Err(Error::domain(
                "batchnorm2d",
                "train mode needs at least 2 values per channel",
            ));
        }
        let xd = x.data();
        let (mut mean, mut inv_std) = (vec![0.0f32; ch], vec![0.0f32; ch]);
        for c in 0..ch {
            let (m, var) = match mode {
                BnMode::Train => {
                    let mut s = 0.0f64;
                    for b in 0..batch {
                        let off = (b * ch + c) * plane;
                        s += xd[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for b in 0..batch {
                        let off = (b * ch + c) * plane;
                        ss += xd[off..off + plane]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    let biased = ss / count as f64;
                    let unbiased = ss / (count - 1) as f64;
                    let mom = config.momentum;
                    let rm = &mut stats.mean.data_mut()[c];
                    *rm = (1.0 - mom) * *rm + mom * m as f32;
                    let rv = &mut stats.var.data_mut()[c];
                    *rv = (1.0 - mom) * *rv + mom * unbiased as f32;
                    (m, biased)
                }
                BnMode::Eval => (stats.mean.data()[c] as f64, stats.var.data()[c] as f64),
            };
            mean[c] = m as f32;
            inv_std[c] = (1.0 / (var + config.eps as f64).sqrt()) as f32;
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                batch,
                plane,
            },
        ))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [N, C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (channels, plane) = match *xv.shape() {
            [_, c, h, w] => (c, h * w),
            ref s => {
                return Err(Error::shape(
                    "channel_bias",
                    format!("input must be [N, C, H, W], got {s:?}"),
                ))
            }
        };
        if bv.shape() != [channels] {
            return Err(Error::shape(
                "channel_bias",
                format!("bias {:?}, expected [{channels}]", bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = bv.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, rg, Op::ChannelBias { x, b, channels, plane }))
    }

    /// `y = x Wᵀ + b` for `x: [n]` or `[rows, n]`, `W: [m, n]`, `b: [m]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ws = wv.shape();
        if ws.len() != 2 {
            return Err(Error::shape(
                "fully_connected",
                format!("weight must be 2-D, got {ws:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let (rows, out_shape) = match xv.shape() {
            [k] if *k == n => (1, vec![m]),
            [r, k] if *k == n => (*r, vec![*r, m]),
            s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("input {s:?} does not end in weight input width {n}"),
                ))
            }
        };
        if bv.shape() != [m] {
            return Err(Error::shape(
                "fully_connected",
                format!("bias {:?}, expected [{m}]", bv.shape()),
            ));
        }
        let mut out = vec![0.0f32; rows * m];
        for r in 0..rows {
            out[r * m..(r + 1) * m].copy_from_slice(bv.data());
        }
        kernels::gemm(rows, n, m, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            value,
            rg,
            Op::FullyConnected {
                x,
                w,
                b,
                rows,
                outputs: m,
                inputs: n,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let width = *va
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = vec![0.0f32; va.len()];
        for (src, dst) in va.data().chunks(width).zip(out.chunks_mut(width)) {
            let mx = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = src.iter().map(|&v| ((v - mx) as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (d, e) in dst.iter_mut().zip(&exps) {
                *d = (e / z) as f32;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Softmax { a, width }))
    }

    /// Per-element logistic binary cross entropy against a constant target.
    pub fn logistic_bce(&mut self, logit: Var, target: &Tensor) -> Result<Var> {
        let lv = self.value(logit);
        if lv.shape() != target.shape() {
            return Err(Error::shape(
                "logistic_bce",
                format!("logit {:?} vs target {:?}", lv.shape(), target.shape()),
            ));
        }
        if let Some(t) = target.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::domain("logistic_bce", format!("target {t} outside [0, 1]")));
        }
        let data = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| logistic_bce_value(x, t))
            .collect();
        let value = Tensor::new(lv.shape().to_vec(), data)?;
        let rg = self.rg(&[logit]);
        Ok(self.push(
            value,
            rg,
            Op::LogisticBce {
                logit,
                target: target.data().to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    /// Sub-tensor at `index` of the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let value = self.value(a).index(index)?;
        let offset = index * value.len();
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Select { a, offset }))
    }

    /// Keeps entries where `mask` is set and zeroes the rest; gradient
    /// passes only through kept entries.
    pub fn mask(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(Error::shape(
                "mask",
                format!("mask length {} vs tensor length {}", mask.len(), va.len()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Mask { a, mask }))
    }

    /// Mean of the nonzero entries of each trailing `[H, W]` plane; 0 for a
    /// plane with no nonzero entry. Output drops the last two axes.
    pub fn nonzero_mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() < 2 {
            return Err(Error::shape("nonzero_mean", format!("need at least 2-D, got {s:?}")));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let out_shape = s[..s.len() - 2].to_vec();
        let mut counts = Vec::new();
        let mut out = Vec::new();
        for chunk in va.data().chunks(plane) {
            let (mut sum, mut k) = (0.0f64, 0usize);
            for &v in chunk {
                if v != 0.0 {
                    sum += v as f64;
                    k += 1;
                }
            }
            counts.push(k);
            out.push(if k == 0 { 0.0 } else { (sum / k as f64) as f32 });
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::NonzeroMean { a, plane, counts }))
    }

    /// Back-propagates from the scalar `loss` into every reachable
    /// `requires_grad` node. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let nd = shape.len();
    // stride of each kept axis within the output
    let mut out_stride = vec![0usize; nd];
    let mut acc = 1usize;
    for ax in (0..nd).rev() {
        if !axes.contains(&ax) {
            out_stride[ax] = acc;
            acc *= shape[ax];
        }
    }
    let mut idx = vec![0usize; nd];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], node: &Node, g: &[f32]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { op, a, b } => {
            let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let at = |d: &[f32], i: usize| if d.len() == 1 { d[0] } else { d[i] };
            for (this, other, this_data) in [(*a, db, da), (*b, da, db)] {
                accumulate(nodes, grads, this, |buf| {
                    let broadcast = this_data.len() == 1 && g.len() != 1;
                    if broadcast {
                        let s: f64 = (0..g.len())
                            .map(|i| match op {
                                BinaryOp::Add => g[i] as f64,
                                BinaryOp::Mul => (g[i] * at(other, i)) as f64,
                            })
                            .sum();
                        buf[0] += s as f32;
                    } else {
                        for i in 0..g.len() {
                            buf[i] += match op {
                                BinaryOp::Add => g[i],
                                BinaryOp::Mul => g[i] * at(other, i),
                            };
                        }
                    }
                });
            }
        }
        Op::Unary { op, a } => {
            let x = nodes[a.0].value.data();
            accumulate(nodes, grads, *a, |buf| {
                for i in 0..g.len() {
                    buf[i] += match op {
                        UnaryOp::Relu => {
                            if x[i] > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Sigmoid => g[i] * out[i] * (1.0 - out[i]),
                        UnaryOp::Log => g[i] / x[i],
                        UnaryOp::Neg => -g[i],
                    };
                }
            });
        }
        Op::Scale { a, factor } => accumulate(nodes, grads, *a, |buf| {
            for (b, &gi) in buf.iter_mut().zip(g) {
                *b += gi * factor;
            }
        }),
        Op::Reduce { a, map, factor } => accumulate(nodes, grads, *a, |buf| {
            for (b, &o) in buf.iter_mut().zip(map) {
                *b += g[o] * factor;
            }
        }),
        Op::Conv2d {
            input,
            weight,
            geom,
            batch,
            cols,
        } => {
            let x = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            let need_x = nodes[input.0].requires_grad;
            let need_w = nodes[weight.0].requires_grad;
            let mut gx = need_x.then(|| grads[input.0].take().unwrap_or_else(|| vec![0.0; x.len()]));
            let mut gw = need_w.then(|| grads[weight.0].take().unwrap_or_else(|| vec![0.0; w.len()]));
            kernels::conv_backward(geom, *batch, x, cols, w, g, gx.as_deref_mut(), gw.as_deref_mut());
            if let Some(gx) = gx {
                grads[input.0] = Some(gx);
            }
            if let Some(gw) = gw {
                grads[weight.0] = Some(gw);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
            batch,
            plane,
        } => {
            let ch = inv_std.len();
            let gam = nodes[gamma.0].value.data();
            let mut sum_g = vec![0.0f64; ch];
            let mut sum_gx = vec![0.0f64; ch];
            for b in 0..*batch {
                for c in 0..ch {
                    let off = (b * ch + c) * plane;
                    for i in off..off + plane {
                        sum_g[c] += g[i] as f64;
                        sum_gx[c] += (g[i] * xhat[i]) as f64;
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |buf| {
                for c in 0..ch {
                    buf[c] += sum_gx[c] as f32;
                }
            });
            accumulate(nodes, grads, *beta, |buf| {
                for c in 0..ch {
                    buf[c] += sum_g[c] as f32;
                }
            });
            let m = (*batch * *plane) as f64;
            accumulate(nodes, grads, *input, |buf| {
                for b in 0..*batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * plane;
                        let k = (gam[c] * inv_std[c]) as f64;
                        for i in off..off + plane {
                            buf[i] += match mode {
                                BnMode::Eval => (k * g[i] as f64) as f32,
                                BnMode::Train => {
                                    (k / m * (m * g[i] as f64 - sum_g[c] - xhat[i] as f64 * sum_gx[c])) as f32
                                }
                            };
                        }
                    }
                }
            });
        }
        Op::ChannelBias { x, b, channels, plane } => {
            accumulate(nodes, grads, *x, |buf| {
                buf.iter_mut().zip(g).for_each(|(bi, gi)| *bi += gi);
            });
            accumulate(nodes, grads, *b, |buf| {
                for (i, chunk) in g.chunks(*plane).enumerate() {
                    buf[i % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            });
        }
        Op::FullyConnected {
            x,
            w,
            b,
            rows,
            outputs,
            inputs,
        } => {
            let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
            accumulate(nodes, grads, *x, |buf| {
                kernels::gemm(*rows, *outputs, *inputs, g, false, wd, false, 1.0, buf);
            });
            accumulate(nodes, grads, *w, |buf| {
                kernels::gemm(*outputs, *rows, *inputs, g, true, xd, false, 1.0, buf);
            });
            accumulate(nodes, grads, *b, |buf| {
                for r in 0..*rows {
                    for (bi, gi) in buf.iter_mut().zip(&g[r * outputs..(r + 1) * outputs]) {
                        *bi += gi;
                    }
                }
            });
        }
        Op::Softmax { a, width } => accumulate(nodes, grads, *a, |buf| {
            for ((y, gr), bb) in out.chunks(*width).zip(g.chunks(*width)).zip(buf.chunks_mut(*width)) {
                let dot: f64 = y.iter().zip(gr).map(|(&yi, &gi)| (yi * gi) as f64).sum();
                for i in 0..*width {
                    bb[i] += y[i] * (gr[i] - dot as f32);
                }
            }
        }),
        Op::LogisticBce { logit, target } => {
            let x = nodes[logit.0].value.data();
            accumulate(nodes, grads, *logit, |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * (stable_sigmoid(x[i]) - target[i]);
                }
            });
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, |buf| {
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }),
        Op::Select { a, offset } => accumulate(nodes, grads, *a, |buf| {
            for (b, gi) in buf[*offset..*offset + g.len()].iter_mut().zip(g) {
                *b += gi;
            }
        }),
        Op::Mask { a, mask } => accumulate(nodes, grads, *a, |buf| {
            for i in 0..g.len() {
                if mask[i] {
                    buf[i] += g[i];
                }
            }
        }),
        Op::NonzeroMean { a, plane, counts } => {
            let x = nodes[a.0].value.data();
            accumulate(nodes, grads, *a, |buf| {
                for (p, &k) in counts.iter().enumerate() {
                    if k == 0 {
                        continue;
                    }
                    let share = g[p] / k as f32;
                    for i in p * plane..(p + 1) * plane {
                        if x[i] != 0.0 {
                            buf[i] += share;
                        }
                    }
                }
            });
        }
    }
}
