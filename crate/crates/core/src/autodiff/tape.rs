use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBroadcast(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Relu(Var),
    AvgPool2x2(Var),
    GlobalAvgPool(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax { input: Var, tau: f64 },
    LogSoftmax(Var),
    KlDiv { p: Var, q: Var, floor: f64 },
    SoftmaxKl {
        target: Var,
        logits: Var,
        tau: f64,
        floor: f64,
        q: Vec<f64>,
    },
    SelectRows { input: Var, rows: Vec<usize> },
    Pick { input: Var, cols: Vec<usize> },
    MeanRows(Var),
    ChannelMean(Var),
    ChannelStd { input: Var, mean: Vec<f64> },
    Standardize {
        input: Var,
        eps: f64,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    ChannelAffine { input: Var, scale: Var, shift: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::AvgPool2x2(_) => "avgpool2x2",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax { .. } => "softmax_temperature",
            Op::LogSoftmax(_) => "log_softmax",
            Op::KlDiv { .. } => "kl_divergence",
            Op::SoftmaxKl { .. } => "softmax_kl",
            Op::SelectRows { .. } => "select_rows",
            Op::Pick { .. } => "pick",
            Op::MeanRows(_) => "mean_rows",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelStd { .. } => "channel_std",
            Op::Standardize { .. } => "standardize",
            Op::ChannelAffine { .. } => "channel_affine",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
///
/// Every op's inputs are recorded before the op itself, so node order is a
/// topological order and [`Tape::backward`] is a single reverse sweep. A tape
/// supports one backward pass; build a fresh tape for every step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    root: Option<Var>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(leading, channels, spatial)` for an `[N, C, ...]` tensor.
fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(dim_err(op, shape, &[0, 0, 0]));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn softmax_rows(x: &[f64], width: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / tau).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
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

    pub fn root(&self) -> Option<Var> {
        self.root
    }

    /// Record a tensor; gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Record a trainable input.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an op output; tracking is on iff any input tracks.
    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::from_parts(shape, data).with_requires_grad(tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Same values, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detach();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.record(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    /// `x[m×n] + row[n]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 2 || sr != [sx[1]] {
            return Err(dim_err("add_row_broadcast", sx, sr));
        }
        let n = sx[1];
        let r = self.data(row);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % n])
            .collect();
        let shape = sx.to_vec();
        Ok(self.record(shape, out, Op::AddRowBroadcast(x, row), &[x, row]))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if si.len() != 4 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(dim_err("conv2d", si, sk));
        }
        if si[1] != sk[1] {
            return Err(dim_err("conv2d", si, sk));
        }
        if sb != [sk[0]] {
            return Err(dim_err("conv2d", sk, sb));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_channels: si[1],
            out_channels: sk[0],
            height: si[2],
            width: si[3],
        };
        let cols = kernels::im2col(self.data(input), geom);
        let out = kernels::conv_forward(&cols, self.data(kernel), self.data(bias), geom);
        let shape = vec![geom.batch, geom.out_channels, geom.height, geom.width];
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        };
        Ok(self.record(shape, out, op, &[input, kernel, bias]))
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.data(a).iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.record(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.data(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.record(Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    /// Mean of each non-overlapping 2×2 window of an `[N, C, H, W]` tensor.
    pub fn avgpool2x2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(dim_err("avgpool2x2", s, &[0, 0, 2, 2]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data(a);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &x[p * h * w..][..h * w];
            let dst = &mut out[p * ho * wo..][..ho * wo];
            for y in 0..ho {
                for xo in 0..wo {
                    let i = 2 * y * w + 2 * xo;
                    dst[y * wo + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let shape = vec![s[0], s[1], ho, wo];
        Ok(self.record(shape, out, Op::AvgPool2x2(a), &[a]))
    }

    /// `[N, C, ...]` to `[N, C]` by averaging the trailing axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, m) = channel_layout(self.shape(a), "global_avg_pool")?;
        let out: Vec<f64> = self
            .data(a)
            .chunks(m)
            .map(|ch| ch.iter().sum::<f64>() / m as f64)
            .collect();
        Ok(self.record(vec![n, c], out, Op::GlobalAvgPool(a), &[a]))
    }

    /// Softmax of `z / tau` along the last axis.
    pub fn softmax_temperature(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::param("tau", format!("must be positive, got {tau}")));
        }
        let s = self.shape(a);
        let width = *s.last().ok_or_else(|| dim_err("softmax_temperature", s, &[1]))?;
        let out = softmax_rows(self.data(a), width, tau);
        let shape = s.to_vec();
        Ok(self.record(shape, out, Op::Softmax { input: a, tau }, &[a]))
    }

    /// Log-softmax along the last axis (temperature 1).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let width = *s.last().ok_or_else(|| dim_err("log_softmax", s, &[1]))?;
        let mut out = vec![0.0; self.value(a).numel()];
        for (src, dst) in self.data(a).chunks(width).zip(out.chunks_mut(width)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v - lse;
            }
        }
        let shape = s.to_vec();
        Ok(self.record(shape, out, Op::LogSoftmax(a), &[a]))
    }

    /// `Σ p (ln p − ln max(q, floor))` summed over every row; rows along the
    /// last axis must be probability distributions. Terms with `p = 0` vanish.
    pub fn kl_divergence(&mut self, p: Var, q: Var, floor: f64) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let width = *self.shape(p).last().unwrap_or(&1);
        for (name, v) in [("p", p), ("q", q)] {
            for (row, chunk) in self.data(v).chunks(width).enumerate() {
                let total: f64 = chunk.iter().sum();
                if chunk.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "kl_divergence: row {row} of {name} is not a distribution (sum {total})"
                    )));
                }
            }
        }
        let kl: f64 = self
            .data(p)
            .iter()
            .zip(self.data(q))
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(floor).ln()))
            .sum();
        Ok(self.record(Vec::new(), vec![kl], Op::KlDiv { p, q, floor }, &[p, q]))
    }

    /// `KL(target ‖ softmax(logits / tau))` summed over rows, fused so the
    /// logit gradient is `(q − p) / tau` and vanishes exactly when the two
    /// distributions coincide. The student probabilities are floored at
    /// `floor` before the log; floored entries pass no gradient.
    pub fn softmax_kl(&mut self, target: Var, logits: Var, tau: f64, floor: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::param("tau", format!("must be positive, got {tau}")));
        }
        self.same_shape("softmax_kl", target, logits)?;
        let width = *self.shape(logits).last().unwrap_or(&1);
        for (row, chunk) in self.data(target).chunks(width).enumerate() {
            let total: f64 = chunk.iter().sum();
            if chunk.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "softmax_kl: target row {row} is not a distribution (sum {total})"
                )));
            }
        }
        let q = softmax_rows(self.data(logits), width, tau);
        let kl: f64 = self
            .data(target)
            .iter()
            .zip(&q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(floor).ln()))
            .sum();
        let op = Op::SoftmaxKl {
            target,
            logits,
            tau,
            floor,
            q,
        };
        Ok(self.record(Vec::new(), vec![kl], op, &[target, logits]))
    }

    /// Gather leading-axis slices; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::Contract(format!(
                "select_rows: indices {rows:?} invalid for shape {s:?}"
            )));
        }
        let out = self.value(a).select(rows);
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        let op = Op::SelectRows {
            input: a,
            rows: rows.to_vec(),
        };
        Ok(self.record(shape, data, op, &[a]))
    }

    /// `out[i] = a[i, cols[i]]` for an `[N, C]` tensor.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(dim_err("pick", s, &[cols.len()]));
        }
        let c = s[1];
        let x = self.data(a);
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        let op = Op::Pick {
            input: a,
            cols: cols.to_vec(),
        };
        Ok(self.record(vec![cols.len()], out, op, &[a]))
    }

    /// Mean over the leading axis.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(dim_err("mean_rows", s, &[1]));
        }
        let rows = s[0];
        let width = self.value(a).numel() / rows;
        let mut out = vec![0.0; width];
        for chunk in self.data(a).chunks(width) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let shape = s[1..].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        Ok(self.record(shape, out, Op::MeanRows(a), &[a]))
    }

    /// Per-sample, per-channel mean of an `[N, C, ...]` tensor.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (n, c, m) = channel_layout(self.shape(a), "channel_mean")?;
        let out: Vec<f64> = self
            .data(a)
            .chunks(m)
            .map(|ch| ch.iter().sum::<f64>() / m as f64)
            .collect();
        Ok(self.record(vec![n, c], out, Op::ChannelMean(a), &[a]))
    }

    /// Per-sample, per-channel population standard deviation.
    pub fn channel_std(&mut self, a: Var) -> Result<Var> {
        let (n, c, m) = channel_layout(self.shape(a), "channel_std")?;
        let (mean, std) = channel_moments(self.data(a), m);
        let op = Op::ChannelStd { input: a, mean };
        Ok(self.record(vec![n, c], std, op, &[a]))
    }

    /// `(x − μ) / (σ + eps)` per sample and channel, with gradients through
    /// both statistics.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, _, m) = channel_layout(&shape, "standardize")?;
        if m < 2 {
            return Err(Error::Contract(format!(
                "standardize needs at least two spatial positions, shape {shape:?}"
            )));
        }
        let (mean, std) = channel_moments(self.data(a), m);
        let mut out = Vec::with_capacity(self.value(a).numel());
        for (k, ch) in self.data(a).chunks(m).enumerate() {
            let denom = std[k] + eps;
            out.extend(ch.iter().map(|&x| (x - mean[k]) / denom));
        }
        let op = Op::Standardize {
            input: a,
            eps,
            mean,
            std,
        };
        Ok(self.record(shape, out, op, &[a]))
    }

    /// `x · scale[n, c] + shift[n, c]` broadcast over the trailing axes.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (n, c, m) = channel_layout(&sx, "channel_affine")?;
        for v in [scale, shift] {
            if self.shape(v) != [n, c] {
                return Err(dim_err("channel_affine", &sx, self.shape(v)));
            }
        }
        let (sc, sh) = (self.data(scale), self.data(shift));
        let mut out = Vec::with_capacity(n * c * m);
        for (k, ch) in self.data(x).chunks(m).enumerate() {
            out.extend(ch.iter().map(|&v| v * sc[k] + sh[k]));
        }
        let op = Op::ChannelAffine {
            input: x,
            scale,
            shift,
        };
        Ok(self.record(sx, out, op, &[x, scale, shift]))
    }

    /// Reverse sweep from a scalar root, summing gradients over fan-out.
    ///
    /// Afterwards every tracked node has a gradient (zero when the root does
    /// not depend on it); untracked nodes keep none.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.root.is_some() {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.root = Some(root);
        if self.requires_grad(root) {
            *self.nodes[root.0].value.grad_slot() = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(grad) = self.nodes[i].value.grad_slot().take() else {
                continue;
            };
            let contributions = self.input_grads(i, &grad);
            *self.nodes[i].value.grad_slot() = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        for node in &mut self.nodes {
            if node.value.requires_grad() && node.value.grad().is_none() {
                let n = node.value.numel();
                *node.value.grad_slot() = Some(vec![0.0; n]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.value.requires_grad() {
            return;
        }
        match node.value.grad_slot() {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let tracked = |v: Var| self.requires_grad(v);
        let mut grads = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if tracked(a) {
                    grads.push((a, kernels::matmul_nt(g, self.data(b), m, n, k)));
                }
                if tracked(b) {
                    grads.push((b, kernels::matmul_tn(self.data(a), g, m, k, n)));
                }
            }
            &Op::Transpose(a) => {
                let s = node.value.shape();
                let (rows, cols) = (s[0], s[1]);
                let mut ga = vec![0.0; g.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        ga[c * rows + r] = g[r * cols + c];
                    }
                }
                grads.push((a, ga));
            }
            &Op::AddRowBroadcast(x, row) => {
                if tracked(x) {
                    grads.push((x, g.to_vec()));
                }
                if tracked(row) {
                    let n = self.value(row).numel();
                    let mut gr = vec![0.0; n];
                    for (k, &v) in g.iter().enumerate() {
                        gr[k % n] += v;
                    }
                    grads.push((row, gr));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (d_cols, d_kernel, d_bias) =
                    kernels::conv_backward(cols, self.data(*kernel), g, *geom, tracked(*input));
                if tracked(*input) {
                    grads.push((*input, kernels::col2im(&d_cols, *geom)));
                }
                if tracked(*kernel) {
                    grads.push((*kernel, d_kernel));
                }
                if tracked(*bias) {
                    grads.push((*bias, d_bias));
                }
            }
            &Op::Add(a, b) => {
                grads.push((a, g.to_vec()));
                grads.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                grads.push((a, g.to_vec()));
                grads.push((b, g.iter().map(|x| -x).collect()));
            }
            &Op::Mul(a, b) => {
                let (xa, xb) = (self.data(a), self.data(b));
                if tracked(a) {
                    grads.push((a, g.iter().zip(xb).map(|(g, y)| g * y).collect()));
                }
                if tracked(b) {
                    grads.push((b, g.iter().zip(xa).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::MulScalar(a, s) => grads.push((a, g.iter().map(|x| x * s).collect())),
            &Op::AddScalar(a) => grads.push((a, g.to_vec())),
            &Op::Relu(a) => {
                let x = self.data(a);
                grads.push((
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                ));
            }
            &Op::Exp(a) => grads.push((a, g.iter().zip(out).map(|(g, y)| g * y).collect())),
            &Op::Log(a) => {
                let x = self.data(a);
                grads.push((a, g.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            &Op::ClampMin(a, floor) => {
                let x = self.data(a);
                grads.push((
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > floor { g } else { 0.0 })
                        .collect(),
                ));
            }
            &Op::Sum(a) => grads.push((a, vec![g[0]; self.value(a).numel()])),
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                grads.push((a, vec![g[0] / n as f64; n]));
            }
            &Op::AvgPool2x2(a) => {
                let s = self.shape(a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut ga = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = 0.25 * g[p * ho * wo + y * wo + x];
                            let i = p * h * w + 2 * y * w + 2 * x;
                            ga[i] += v;
                            ga[i + 1] += v;
                            ga[i + w] += v;
                            ga[i + w + 1] += v;
                        }
                    }
                }
                grads.push((a, ga));
            }
            &Op::GlobalAvgPool(a) | &Op::ChannelMean(a) => {
                let n = self.value(a).numel();
                let m = n / g.len();
                let mut ga = Vec::with_capacity(n);
                for &gv in g {
                    ga.extend(std::iter::repeat_n(gv / m as f64, m));
                }
                grads.push((a, ga));
            }
            &Op::Softmax { input, tau } => {
                let width = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gy, y), dst) in g
                    .chunks(width)
                    .zip(out.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let inner: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gy).zip(y) {
                        *d = yv * (gv - inner) / tau;
                    }
                }
                grads.push((input, ga));
            }
            &Op::LogSoftmax(a) => {
                let width = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gy, y), dst) in g
                    .chunks(width)
                    .zip(out.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let total: f64 = gy.iter().sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gy).zip(y) {
                        *d = gv - yv.exp() * total;
                    }
                }
                grads.push((a, ga));
            }
            &Op::KlDiv { p, q, floor } => {
                let (pv, qv) = (self.data(p), self.data(q));
                if tracked(p) {
                    let gp = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| {
                            if pi > 0.0 {
                                g[0] * (pi.ln() - qi.max(floor).ln() + 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    grads.push((p, gp));
                }
                if tracked(q) {
                    let gq = pv
                        .iter()
                        .zip(qv)
                        .map(|(&pi, &qi)| if qi > floor { -g[0] * pi / qi } else { 0.0 })
                        .collect();
                    grads.push((q, gq));
                }
            }
            Op::SoftmaxKl {
                target,
                logits,
                tau,
                floor,
                q,
            } => {
                let p = self.data(*target);
                let width = *self.shape(*logits).last().unwrap_or(&1);
                if tracked(*logits) {
                    let mut gz = vec![0.0; q.len()];
                    for ((qr, pr), dst) in q.chunks(width).zip(p.chunks(width)).zip(gz.chunks_mut(width)) {
                        if qr.iter().all(|&qi| qi > *floor) {
                            for ((d, &qi), &pi) in dst.iter_mut().zip(qr).zip(pr) {
                                *d = g[0] * (qi - pi) / tau;
                            }
                        } else {
                            // Only unfloored entries depend on the logits.
                            let mass: f64 = qr
                                .iter()
                                .zip(pr)
                                .filter(|(&qi, _)| qi > *floor)
                                .map(|(_, &pi)| pi)
                                .sum();
                            for ((d, &qi), &pi) in dst.iter_mut().zip(qr).zip(pr) {
                                let own = if qi > *floor { pi } else { 0.0 };
                                *d = g[0] * (qi * mass - own) / tau;
                            }
                        }
                    }
                    grads.push((*logits, gz));
                }
                if tracked(*target) {
                    let gp = p
                        .iter()
                        .zip(q)
                        .map(|(&pi, &qi)| {
                            if pi > 0.0 {
                                g[0] * (pi.ln() - qi.max(*floor).ln() + 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    grads.push((*target, gp));
                }
            }
            Op::SelectRows { input, rows } => {
                let width = g.len() / rows.len();
                let mut ga = vec![0.0; self.value(*input).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &s) in ga[r * width..][..width].iter_mut().zip(&g[k * width..][..width]) {
                        *d += s;
                    }
                }
                grads.push((*input, ga));
            }
            Op::Pick { input, cols } => {
                let c = self.shape(*input)[1];
                let mut ga = vec![0.0; self.value(*input).numel()];
                for (i, &j) in cols.iter().enumerate() {
                    ga[i * c + j] = g[i];
                }
                grads.push((*input, ga));
            }
            &Op::MeanRows(a) => {
                let rows = self.shape(a)[0];
                let scaled: Vec<f64> = g.iter().map(|v| v / rows as f64).collect();
                let mut ga = Vec::with_capacity(rows * g.len());
                for _ in 0..rows {
                    ga.extend_from_slice(&scaled);
                }
                grads.push((a, ga));
            }
            Op::ChannelStd { input, mean } => {
                let x = self.data(*input);
                let m = x.len() / g.len();
                let mut ga = vec![0.0; x.len()];
                for (k, (src, dst)) in x.chunks(m).zip(ga.chunks_mut(m)).enumerate() {
                    let sd = out[k];
                    if sd > 0.0 {
                        for (d, &xv) in dst.iter_mut().zip(src) {
                            *d = g[k] * (xv - mean[k]) / (m as f64 * sd);
                        }
                    }
                }
                grads.push((*input, ga));
            }
            Op::Standardize {
                input,
                eps,
                mean,
                std,
            } => {
                let x = self.data(*input);
                let m = mean.len();
                let width = x.len() / m;
                let mut ga = vec![0.0; x.len()];
                for k in 0..m {
                    let src = &x[k * width..][..width];
                    let gy = &g[k * width..][..width];
                    let denom = std[k] + eps;
                    let g_mean = gy.iter().sum::<f64>() / width as f64;
                    let g_dot_centered: f64 =
                        gy.iter().zip(src).map(|(&gv, &xv)| gv * (xv - mean[k])).sum();
                    let std_term = if std[k] > 0.0 {
                        g_dot_centered / (denom * denom * width as f64 * std[k])
                    } else {
                        0.0
                    };
                    for ((d, &gv), &xv) in ga[k * width..][..width].iter_mut().zip(gy).zip(src) {
                        *d = (gv - g_mean) / denom - std_term * (xv - mean[k]);
                    }
                }
                grads.push((*input, ga));
            }
            &Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let x = self.data(input);
                let sc = self.data(scale);
                let m = x.len() / sc.len();
                if tracked(input) {
                    let mut ga = vec![0.0; x.len()];
                    for (k, (d, gy)) in ga.chunks_mut(m).zip(g.chunks(m)).enumerate() {
                        for (dv, &gv) in d.iter_mut().zip(gy) {
                            *dv = gv * sc[k];
                        }
                    }
                    grads.push((input, ga));
                }
                if tracked(scale) {
                    let gs = g
                        .chunks(m)
                        .zip(x.chunks(m))
                        .map(|(gy, xs)| gy.iter().zip(xs).map(|(a, b)| a * b).sum())
                        .collect();
                    grads.push((scale, gs));
                }
                if tracked(shift) {
                    let gs = g.chunks(m).map(|gy| gy.iter().sum()).collect();
                    grads.push((shift, gs));
                }
            }
        }
        grads
    }
}

/// Per-chunk mean and population standard deviation.
fn channel_moments(x: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(x.len() / m);
    let mut stds = Vec::with_capacity(x.len() / m);
    for ch in x.chunks(m) {
        let mu = ch.iter().sum::<f64>() / m as f64;
        let var = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        means.push(mu);
        stds.push(var.sqrt());
    }
    (means, stds)
}
