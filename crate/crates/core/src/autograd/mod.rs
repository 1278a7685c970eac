//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every operation appends a node to a [`Tape`] holding its output value and
//! whatever it needs for its backward rule. [`Tape::backward`] walks the nodes
//! in reverse recording order and accumulates gradients into every leaf that
//! was created with `requires_grad` set.

mod conv;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub(crate) use conv::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        /// Per-sample column matrices; empty for pointwise kernels.
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Pointwise(Var, Activation),
    MatMul(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulMap {
        map: Var,
        input: Var,
    },
    SumSpatial(Var),
    AvgPoolRegion {
        input: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        range: Range<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Scale(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::BatchNormTrain { input, gamma, beta, .. }
            | Op::BatchNormEval { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Pointwise(a, _) | Op::SumSpatial(a) | Op::Reshape(a) | Op::Softmax(a) | Op::Sum(a) | Op::Scale(a, _) => {
                vec![*a]
            }
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MulMap { map, input } => vec![*map, *input],
            Op::AvgPoolRegion { input, .. } | Op::Slice { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch-norm output plus the batch statistics used to update running averages.
#[derive(Debug)]
pub struct BatchNormOutput {
    pub output: Var,
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

/// Ordered record of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- forward operations -------------------------------------------

    /// Batched 2-d convolution: `[N, C, H, W] * [O, C, kh, kw] -> [N, O, oh, ow]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("conv2d", "input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(Error::dim("conv2d", "weight rank", 4, ws.len()));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim("conv2d", "input channels", ws[1], xs[1]));
        }
        if stride == 0 {
            return Err(Error::Range {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad).ok_or_else(|| Error::Shape {
            op: "conv2d",
            detail: format!("kernel {}x{} larger than padded input {}x{}", ws[2], ws[3], xs[2] + 2 * pad, xs[3] + 2 * pad),
        })?;
        let (n, o) = (xs[0], ws[0]);
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.c * geom.h * geom.w;
        let mut out = vec![0.0; n * o * ol];
        let mut cols = Vec::new();
        {
            let x = self.data(input);
            let w = self.data(weight);
            if geom.is_pointwise() {
                for s in 0..n {
                    gemm(o, pl, ol, 1.0, w, false, &x[s * in_len..(s + 1) * in_len], false, 0.0, &mut out[s * o * ol..(s + 1) * o * ol]);
                }
            } else {
                cols = vec![0.0; n * pl * ol];
                for s in 0..n {
                    let c = &mut cols[s * pl * ol..(s + 1) * pl * ol];
                    conv::im2col(&geom, &x[s * in_len..(s + 1) * in_len], c);
                    gemm(o, pl, ol, 1.0, w, false, c, false, 0.0, &mut out[s * o * ol..(s + 1) * o * ol]);
                }
            }
        }
        let value = Tensor::new(&[n, o, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of `[N, C, ...]`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::dim("channel_bias", "channels", xs.get(1).copied().unwrap_or(0), bs.iter().product()));
        }
        let (n, c, inner) = axis_split(&xs, 1);
        let b = self.data(bias).to_vec();
        let mut out = self.data(input).to_vec();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::ChannelBias { input, bias }))
    }

    fn check_bn(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(input);
        if xs.len() < 2 {
            return Err(Error::dim("batch_norm", "input rank", 2, xs.len()));
        }
        let (n, c, inner) = axis_split(xs, 1);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s.len() != 1 || s[0] != c {
                return Err(Error::dim("batch_norm", name, c, s.iter().product()));
            }
        }
        Ok((n, c, inner))
    }

    /// Batch normalization with batch statistics over every axis but 1.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<BatchNormOutput> {
        let (n, c, inner) = self.check_bn(input, gamma, beta)?;
        if n < 2 {
            return Err(Error::Config(format!("batch norm in train mode needs a batch of at least 2, got {n}")));
        }
        let m = (n * inner) as f64;
        let x = self.data(input);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                mean[ch] += x[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                var[ch] += x[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1.0).max(1.0)).collect();
        let value = Tensor::new(self.shape(input), out)?;
        let output = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok(BatchNormOutput {
            output,
            mean,
            var: unbiased,
        })
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (n, c, inner) = self.check_bn(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics", c, mean.len().min(var.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let x = self.data(input);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = g[ch] * (x[i] - mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input), out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        ))
    }

    pub fn pointwise(&mut self, input: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            // NaN passes through so a diverging input is not silently zeroed
            Activation::Relu => |v| if v < 0.0 { 0.0 } else { v },
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let x = &self.nodes[input.0].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.push(value, Op::Pointwise(input, kind))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.pointwise(input, Activation::Sigmoid)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("expected matrices, got {sa:?} and {sb:?}"),
            });
        }
        if sa[1] != sb[0] {
            return Err(Error::dim("matmul", "inner", sa[1], sb[0]));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        gemm(sa[0], sa[1], sb[1], 1.0, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let value = Tensor::new(&[sa[0], sb[1]], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Affine map `x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("expected matrices, got {xs:?} and {ws:?}"),
            });
        }
        if xs[1] != ws[1] {
            return Err(Error::dim("linear", "input features", ws[1], xs[1]));
        }
        let (n, out_f) = (xs[0], ws[0]);
        let mut out = vec![0.0; n * out_f];
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != out_f {
                return Err(Error::dim("linear", "bias", out_f, bs.iter().product()));
            }
            let bd = self.data(b);
            out.chunks_mut(out_f).for_each(|row| row.copy_from_slice(bd));
        }
        gemm(n, xs[1], out_f, 1.0, self.data(input), false, self.data(weight), true, 1.0, &mut out);
        let value = Tensor::new(&[n, out_f], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Multiplies `[N, C, ...]` by a `[N, 1, ...]` map broadcast over channels.
    pub fn mul_map(&mut self, map: Var, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ms = self.shape(map).to_vec();
        if xs.len() < 2 || ms.len() != xs.len() || ms[1] != 1 || ms[0] != xs[0] || ms[2..] != xs[2..] {
            return Err(Error::Shape {
                op: "mul_map",
                detail: format!("map {ms:?} does not broadcast over {xs:?}"),
            });
        }
        let (n, c, inner) = axis_split(&xs, 1);
        let (x, m) = (self.data(input), self.data(map));
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            let mrow = &m[s * inner..(s + 1) * inner];
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in 0..inner {
                    out[base + i] = x[base + i] * mrow[i];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::MulMap { map, input }))
    }

    /// Sums `[N, C, ...]` over every axis after the channel axis.
    pub fn sum_spatial(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim("sum_spatial", "input rank", 3, xs.len()));
        }
        let (n, c, inner) = axis_split(&xs, 1);
        let out = self.data(input).chunks(inner).map(|ch| ch.iter().sum()).collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::SumSpatial(input)))
    }

    /// Per-channel mean of `[N, C, H, W]` over a rectangular region -> `[N, C]`.
    pub fn avg_pool_region(&mut self, input: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("avg_pool_region", "input rank", 4, xs.len()));
        }
        let (h, w) = (xs[2], xs[3]);
        if rows.is_empty() || cols.is_empty() || rows.end > h || cols.end > w {
            return Err(Error::Range {
                op: "avg_pool_region",
                detail: format!("region rows {rows:?} cols {cols:?} invalid for {h}x{w}"),
            });
        }
        let count = (rows.len() * cols.len()) as f64;
        let x = self.data(input);
        let out = x
            .chunks(h * w)
            .map(|plane| {
                let mut s = 0.0;
                for r in rows.clone() {
                    s += plane[r * w + cols.start..r * w + cols.end].iter().sum::<f64>();
                }
                s / count
            })
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::AvgPoolRegion { input, rows, cols }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", "axis", base.len(), axis));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{s:?} incompatible with {base:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim("slice", "axis", xs.len(), axis));
        }
        if range.is_empty() || range.end > xs[axis] {
            return Err(Error::Range {
                op: "slice",
                detail: format!("{range:?} outside extent {} of axis {axis}", xs[axis]),
            });
        }
        let (outer, ext, inner) = axis_split(&xs, axis);
        let x = self.data(input);
        let mut out = Vec::with_capacity(outer * range.len() * inner);
        for o in 0..outer {
            let start = (o * ext + range.start) * inner;
            out.extend_from_slice(&x[start..start + range.len() * inner]);
        }
        let mut shape = xs;
        shape[axis] = range.len();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { input, axis, range }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[input.0].value.clone().reshape(shape)?;
        let mut value = value;
        value.requires_grad = false;
        value.clear_grad();
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let xs = self.shape(input).to_vec();
        let last = *xs.last().expect("non-scalar");
        let mut out = self.data(input).to_vec();
        out.chunks_mut(last).for_each(softmax_in_place);
        let value = Tensor::new(&xs, out).expect("same shape");
        self.push(value, Op::Softmax(input))
    }

    /// Batch-mean softmax cross-entropy of `[N, K]` logits -> scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::dim("cross_entropy", "logits rank", 2, ls.len()));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", "labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let x = self.data(logits);
        let mut probs = x.to_vec();
        let mut loss = 0.0;
        for (s, row) in x.chunks(k).enumerate() {
            loss += log_sum_exp(row) - row[labels[s]];
            softmax_in_place(&mut probs[s * k..(s + 1) * k]);
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = &self.nodes[input.0].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect()).expect("same shape");
        self.push(value, Op::Scale(input, factor))
    }

    // ----- backward -----------------------------------------------------

    /// Back-propagates from a scalar `loss` with seed 1.0, accumulating into
    /// the gradients of every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                accumulate(&mut self.leaf_grads[i], dy);
                continue;
            }
            self.backward_node(i, &dy, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let n = self.shape(*input)[0];
                let o = self.shape(*weight)[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let in_len = geom.c * geom.h * geom.w;
                let w = self.data(*weight);
                let x = self.data(*input);
                if self.wants(*weight) {
                    let dw = accumulate_with(&mut grads[weight.0], o * pl);
                    for s in 0..n {
                        let dys = &dy[s * o * ol..(s + 1) * o * ol];
                        let c = if geom.is_pointwise() {
                            &x[s * in_len..(s + 1) * in_len]
                        } else {
                            &cols[s * pl * ol..(s + 1) * pl * ol]
                        };
                        gemm(o, ol, pl, 1.0, dys, false, c, true, 1.0, dw);
                    }
                }
                if self.wants(*input) {
                    let dx = accumulate_with(&mut grads[input.0], n * in_len);
                    let mut dcols = vec![0.0; pl * ol];
                    for s in 0..n {
                        let dys = &dy[s * o * ol..(s + 1) * o * ol];
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(pl, o, ol, 1.0, w, true, dys, false, 1.0, dxs);
                        } else {
                            gemm(pl, o, ol, 1.0, w, true, dys, false, 0.0, &mut dcols);
                            conv::col2im(geom, &dcols, dxs);
                        }
                    }
                }
            }
            Op::ChannelBias { input, bias } => {
                let (n, c, inner) = axis_split(node.value.shape(), 1);
                if self.wants(*bias) {
                    let db = accumulate_with(&mut grads[bias.0], c);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            db[ch] += dy[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*input) {
                    accumulate(&mut grads[input.0], dy.to_vec());
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = axis_split(node.value.shape(), 1);
                let m = (n * inner) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for j in base..base + inner {
                            sum_dy[ch] += dy[j];
                            sum_dy_xhat[ch] += dy[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], sum_dy_xhat.clone());
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], sum_dy.clone());
                }
                if self.wants(*input) {
                    let g = self.data(*gamma);
                    let dx = accumulate_with(&mut grads[input.0], dy.len());
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            let k = g[ch] * inv_std[ch] / m;
                            for j in base..base + inner {
                                dx[j] += k * (m * dy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, inner) = axis_split(node.value.shape(), 1);
                let x = self.data(*input);
                let g = self.data(*gamma);
                if self.wants(*gamma) {
                    let dg = accumulate_with(&mut grads[gamma.0], c);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            for j in base..base + inner {
                                dg[ch] += dy[j] * (x[j] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = accumulate_with(&mut grads[beta.0], c);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            db[ch] += dy[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*input) {
                    let dx = accumulate_with(&mut grads[input.0], dy.len());
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            for j in base..base + inner {
                                dx[j] += dy[j] * g[ch] * inv_std[ch];
                            }
                        }
                    }
                }
            }
            Op::Pointwise(input, kind) => {
                let dx = accumulate_with(&mut grads[input.0], dy.len());
                match kind {
                    Activation::Relu => {
                        for j in 0..dy.len() {
                            if y[j] > 0.0 {
                                dx[j] += dy[j];
                            }
                        }
                    }
                    Activation::Tanh => {
                        for j in 0..dy.len() {
                            dx[j] += dy[j] * (1.0 - y[j] * y[j]);
                        }
                    }
                    Activation::Sigmoid => {
                        for j in 0..dy.len() {
                            dx[j] += dy[j] * y[j] * (1.0 - y[j]);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let da = accumulate_with(&mut grads[a.0], m * k);
                    gemm(m, n, k, 1.0, dy, false, self.data(*b), true, 1.0, da);
                }
                if self.wants(*b) {
                    let db = accumulate_with(&mut grads[b.0], k * n);
                    gemm(k, m, n, 1.0, self.data(*a), true, dy, false, 1.0, db);
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, in_f) = (xs[0], xs[1]);
                let out_f = self.shape(*weight)[0];
                if self.wants(*input) {
                    let dx = accumulate_with(&mut grads[input.0], n * in_f);
                    gemm(n, out_f, in_f, 1.0, dy, false, self.data(*weight), false, 1.0, dx);
                }
                if self.wants(*weight) {
                    let dw = accumulate_with(&mut grads[weight.0], out_f * in_f);
                    gemm(out_f, n, in_f, 1.0, dy, true, self.data(*input), false, 1.0, dw);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let db = accumulate_with(&mut grads[b.0], out_f);
                        for row in dy.chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = accumulate_with(&mut grads[v.0], dy.len());
                        d.iter_mut().zip(dy).for_each(|(g, v)| *g += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let o = self.data(other);
                        let d = accumulate_with(&mut grads[v.0], dy.len());
                        for j in 0..dy.len() {
                            d[j] += dy[j] * o[j];
                        }
                    }
                }
            }
            Op::MulMap { map, input } => {
                let (n, c, inner) = axis_split(node.value.shape(), 1);
                if self.wants(*input) {
                    let m = self.data(*map);
                    let dx = accumulate_with(&mut grads[input.0], dy.len());
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            for j in 0..inner {
                                dx[base + j] += dy[base + j] * m[s * inner + j];
                            }
                        }
                    }
                }
                if self.wants(*map) {
                    let x = self.data(*input);
                    let dm = accumulate_with(&mut grads[map.0], n * inner);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            for j in 0..inner {
                                dm[s * inner + j] += dy[base + j] * x[base + j];
                            }
                        }
                    }
                }
            }
            Op::SumSpatial(input) => {
                let inner: usize = self.shape(*input)[2..].iter().product();
                let dx = accumulate_with(&mut grads[input.0], dy.len() * inner);
                for (chunk, g) in dx.chunks_mut(inner).zip(dy) {
                    chunk.iter_mut().for_each(|v| *v += g);
                }
            }
            Op::AvgPoolRegion { input, rows, cols } => {
                let xs = self.shape(*input);
                let (h, w) = (xs[2], xs[3]);
                let count = (rows.len() * cols.len()) as f64;
                let dx = accumulate_with(&mut grads[input.0], xs.iter().product());
                for (plane, g) in dx.chunks_mut(h * w).zip(dy) {
                    for r in rows.clone() {
                        plane[r * w + cols.start..r * w + cols.end]
                            .iter_mut()
                            .for_each(|v| *v += g / count);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    if self.wants(*v) {
                        let d = accumulate_with(&mut grads[v.0], outer * len);
                        for o in 0..outer {
                            let src = &dy[o * total + offset..o * total + offset + len];
                            d[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, range } => {
                let xs = self.shape(*input);
                let (outer, ext, inner) = axis_split(xs, *axis);
                let dx = accumulate_with(&mut grads[input.0], outer * ext * inner);
                let len = range.len() * inner;
                for o in 0..outer {
                    let start = (o * ext + range.start) * inner;
                    dx[start..start + len]
                        .iter_mut()
                        .zip(&dy[o * len..(o + 1) * len])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(input) => {
                let d = accumulate_with(&mut grads[input.0], dy.len());
                d.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
            }
            Op::Softmax(input) => {
                let last = *node.value.shape().last().unwrap();
                let dx = accumulate_with(&mut grads[input.0], dy.len());
                for ((yr, dyr), dxr) in y.chunks(last).zip(dy.chunks(last)).zip(dx.chunks_mut(last)) {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..last {
                        dxr[j] += yr[j] * (dyr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = dy[0] / n as f64;
                let dx = accumulate_with(&mut grads[logits.0], n * k);
                for (s, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == label { 1.0 } else { 0.0 };
                        dx[s * k + j] += scale * (probs[s * k + j] - target);
                    }
                }
            }
            Op::Sum(input) => {
                let len = self.nodes[input.0].value.numel();
                let dx = accumulate_with(&mut grads[input.0], len);
                dx.iter_mut().for_each(|v| *v += dy[0]);
            }
            Op::Scale(input, factor) => {
                let dx = accumulate_with(&mut grads[input.0], dy.len());
                dx.iter_mut().zip(dy).for_each(|(a, b)| *a += factor * b);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests;
