//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive executed during one forward pass. Values
//! are referenced through copyable [`Var`] handles. [`Tape::backward`] walks the
//! record from the loss back to the first node, visiting each node once, and
//! returns the gradient of every leaf that was registered with
//! `requires_grad`.
//!
//! There is no broadcasting: elementwise operands must have identical shapes.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{dim_err, Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::norm::{BnObservation, BnRunning, Mode, BN_EPS};
use crate::rng::Rng;
use crate::tensor::{split_at_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op {
    Leaf,
    Constant,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    MulConst {
        x: Var,
        factors: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Transpose {
        x: Var,
        a: usize,
        b: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ReduceMean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Abs {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any gradient can flow into this node.
    tracks: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bn_observations: Vec<BnObservation>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf, or `None` when the leaf is not reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics observed by train-mode normalization, in execution order.
    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    /// Hash of every branch taken by the piecewise primitives: relu and abs
    /// input signs and max-pool winners. Two passes with equal signatures
    /// evaluated the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    0u8.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Abs { x } => {
                    1u8.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v >= 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    2u8.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, tracks: bool) -> Var {
        self.nodes.push(Node { value, op, tracks });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Registers a leaf; gradients are reported for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.push(value, Op::Leaf, true)
        } else {
            self.push(value, Op::Constant, false)
        }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x·weight + bias` over the last axis of `x`; leading axes are treated as rows.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight);
        let d_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != d_in {
            return dim_err(format!("linear: input {xs:?} against weight {ws:?}"));
        }
        let d_out = ws[1];
        if self.shape(bias) != [d_out] {
            return dim_err(format!(
                "linear: bias {:?} for output width {d_out}",
                self.shape(bias)
            ));
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = Vec::with_capacity(rows * d_out);
        let bias_data = self.value(bias).data();
        for _ in 0..rows {
            out.extend_from_slice(bias_data);
        }
        gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            Layout::Normal,
            self.value(weight).data(),
            Layout::Normal,
            1.0,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let tracks = self.tracks(x) || self.tracks(weight) || self.tracks(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w: weight,
                b: bias,
            },
            tracks,
        ))
    }

    /// Cross-correlation of `[C_in, H, W]` or `[B, C_in, H, W]` input with a `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, h, w, batched) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w, false),
            [b, c, h, w] => (b, c, h, w, true),
            _ => return dim_err(format!("conv2d: input must be rank 3 or 4, got {xs:?}")),
        };
        let ks = self.shape(kernel).to_vec();
        let (c_out, k) = match ks.as_slice() {
            &[co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => return dim_err(format!("conv2d: kernel {ks:?} for input {xs:?}")),
        };
        if k % 2 == 0 {
            return dim_err(format!("conv2d: kernel size {k} must be odd"));
        }
        if stride == 0 {
            return Err(TensorError::Parameter("conv2d: stride must be positive".into()));
        }
        if self.shape(bias) != [c_out] {
            return dim_err(format!("conv2d: bias {:?} for {c_out} outputs", self.shape(bias)));
        }
        let extent = |n: usize| -> Result<usize> {
            let span = n + 2 * padding;
            if span < k || !(span - k).is_multiple_of(stride) {
                return dim_err(format!(
                    "conv2d: extent {n} with padding {padding}, kernel {k}, stride {stride} is not integral"
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            h_out: extent(h)?,
            w_out: extent(w)?,
        };
        let area = geom.out_area();
        let plen = geom.patch_len();
        let mut cols = vec![0.0; batch * plen * area];
        let mut out = vec![0.0; batch * c_out * area];
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        for bi in 0..batch {
            let img = &xd[bi * c_in * h * w..(bi + 1) * c_in * h * w];
            let col = &mut cols[bi * plen * area..(bi + 1) * plen * area];
            im2col(img, &geom, col);
            let o = &mut out[bi * c_out * area..(bi + 1) * c_out * area];
            for (co, row) in o.chunks_mut(area).enumerate() {
                row.fill(bd[co]);
            }
            gemm(c_out, plen, area, kd, Layout::Normal, col, Layout::Normal, 1.0, o);
        }
        let shape = if batched {
            vec![batch, c_out, geom.h_out, geom.w_out]
        } else {
            vec![c_out, geom.h_out, geom.w_out]
        };
        let tracks = self.tracks(x) || self.tracks(kernel) || self.tracks(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                k: kernel,
                b: bias,
                geom,
                cols,
            },
            tracks,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let tracks = self.tracks(x);
        self.push(out, Op::Relu { x }, tracks)
    }

    /// Elementwise product with a constant (untracked) factor array.
    pub fn mul_const(&mut self, x: Var, factors: &Tensor) -> Result<Var> {
        if self.shape(x) != factors.shape() {
            return dim_err(format!(
                "mul_const: {:?} against {:?}",
                self.shape(x),
                factors.shape()
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(factors.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracks = self.tracks(x);
        Ok(self.push(
            out,
            Op::MulConst {
                x,
                factors: factors.data().to_vec(),
            },
            tracks,
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with probability `p`
    /// and survivors are scaled by `1/(1-p)`. Eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, mode: Mode) -> Result<Var> {
        check_drop_rate(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(self.shape(x), |_| if rng.bernoulli(p) { 0.0 } else { keep });
        self.mul_const(x, &mask)
    }

    /// Dropout of whole vectors along the last axis: a dropped row is zero across its full width.
    pub fn dropout_rows(&mut self, x: Var, p: f64, rng: &mut Rng, mode: Mode) -> Result<Var> {
        check_drop_rate(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        let rows = self.value(x).numel() / width;
        let mut mask = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let f = if rng.bernoulli(p) { 0.0 } else { keep };
            mask.extend(std::iter::repeat_n(f, width));
        }
        self.mul_const(x, &Tensor::new(shape, mask)?)
    }

    /// Batch normalization with one statistic per index of `axis`, taken over all other axes.
    ///
    /// Train mode normalizes with the batch statistics and records them (see
    /// [`Tape::bn_observations`]) under `layer` so the caller can fold them into
    /// `running`; eval mode uses `running` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnRunning,
        axis: usize,
        mode: Mode,
        layer: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("batch_norm: axis {axis} for shape {shape:?}"));
        }
        let (outer, feat, inner) = split_at_axis(&shape, axis);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [feat] {
                return dim_err(format!(
                    "batch_norm: {name} {:?} for {feat} features",
                    self.shape(v)
                ));
            }
        }
        if running.len() != feat {
            return dim_err(format!(
                "batch_norm: running stats for {} features, input has {feat}",
                running.len()
            ));
        }
        let n = (outer * inner) as f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; feat];
        let mut out = vec![0.0; xd.len()];
        let batch_stats = mode == Mode::Train;
        let mut obs_mean = Vec::new();
        let mut obs_var = Vec::new();
        for f in 0..feat {
            let idx = |o: usize, i: usize| (o * feat + f) * inner + i;
            let (mean, var) = if batch_stats {
                let mut sum = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        sum += xd[idx(o, i)];
                    }
                }
                let mean = sum / n;
                let mut sq = 0.0;
                for o in 0..outer {
                    for i in 0..inner {
                        let d = xd[idx(o, i)] - mean;
                        sq += d * d;
                    }
                }
                let var = sq / n;
                obs_mean.push(mean);
                obs_var.push(if n > 1.0 { sq / (n - 1.0) } else { var });
                (mean, var)
            } else {
                (running.mean[f], running.var[f])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[f] = is;
            for o in 0..outer {
                for i in 0..inner {
                    let j = idx(o, i);
                    let xh = (xd[j] - mean) * is;
                    xhat[j] = xh;
                    out[j] = gd[f] * xh + bd[f];
                }
            }
        }
        if batch_stats {
            self.bn_observations.push(BnObservation {
                layer,
                mean: obs_mean,
                var: obs_var,
            });
        }
        let tracks = self.tracks(x) || self.tracks(gamma) || self.tracks(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims: (outer, feat, inner),
                xhat,
                inv_std,
                batch_stats,
            },
            tracks,
        ))
    }

    /// 2×2 max pooling with stride 2 over the last two axes.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || !shape[r - 2].is_multiple_of(2) || !shape[r - 1].is_multiple_of(2) {
            return dim_err(format!("max_pool2: needs even trailing extents, got {shape:?}"));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = self.value(x).numel() / (h * w);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let c = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[c] > xd[best] {
                            best = c;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut oshape = shape;
        oshape[r - 2] = ho;
        oshape[r - 1] = wo;
        let tracks = self.tracks(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::MaxPool2 { x, argmax }, tracks))
    }

    /// Swaps axes `a` and `b`.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return dim_err(format!("transpose: axes ({a}, {b}) for shape {shape:?}"));
        }
        let (data, oshape) = swap_axes(self.value(x).data(), &shape, a, b);
        let tracks = self.tracks(x);
        Ok(self.push(Tensor::new(oshape, data)?, Op::Transpose { x, a, b }, tracks))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let tracks = self.tracks(x);
        Ok(self.push(out, Op::Reshape { x }, tracks))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat: no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat: axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return dim_err(format!("concat: {s:?} does not match {base:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracks = xs.iter().any(|&v| self.tracks(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            tracks,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("slice: {start}+{len} on axis {axis} of {shape:?}"));
        }
        let (outer, ext, inner) = split_at_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let tracks = self.tracks(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { x, axis, start }, tracks))
    }

    /// Inverse of [`Tape::concat`]: cuts `x` along `axis` into pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let ext = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != ext {
            return dim_err(format!("split: sizes {sizes:?} do not cover extent {ext}"));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return dim_err(format!("gather: index {bad} out of range for {n} elements"));
        }
        let xd = self.value(x).data();
        let data = index.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let tracks = self.tracks(x);
        Ok(self.push(out, Op::Gather { x, index }, tracks))
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input yields shape `[1]`).
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("reduce_mean: axis {axis} for shape {shape:?}"));
        }
        let (outer, ext, inner) = split_at_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &xd[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / ext as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape: Vec<usize> = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let tracks = self.tracks(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::ReduceMean { x, axis }, tracks))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tracks = self.tracks(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracks)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(out, Op::Add { a, b }, tracks))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(out, Op::Sub { a, b }, tracks))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(out, Op::Mul { a, b }, tracks))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let tracks = self.tracks(x);
        self.push(out, Op::Scale { x, c }, tracks)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let tracks = self.tracks(x);
        self.push(out, Op::Abs { x }, tracks)
    }

    /// `|a − b|` for one-element operands.
    pub fn abs_err(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return dim_err(format!(
                "abs_err: expects scalars, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let d = self.sub(a, b)?;
        Ok(self.abs(d))
    }

    /// Propagates `d loss / d node` from a one-element `loss` back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            visited += 1;
            self.backward_node(node, g, &mut grads, &mut leaves, i)?;
        }
        Ok(Gradients {
            grads: leaves,
            visited,
        })
    }

    fn backward_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut [Option<Tensor>],
        index: usize,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {
                leaves[index] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Op::Constant => {}
            Op::Linear { x, w, b } => {
                let d_in = *self.shape(*x).last().unwrap();
                let d_out = self.shape(*w)[1];
                let rows = self.value(*x).numel() / d_in;
                if self.tracks(*x) {
                    let dx = self.slot(grads, *x);
                    let wd = self.value(*w).data();
                    gemm(rows, d_out, d_in, &g, Layout::Normal, wd, Layout::Transposed, 1.0, dx);
                }
                if self.tracks(*w) {
                    let xd = self.value(*x).data();
                    let dw = self.slot(grads, *w);
                    gemm(d_in, rows, d_out, xd, Layout::Transposed, &g, Layout::Normal, 1.0, dw);
                }
                if self.tracks(*b) {
                    let db = self.slot(grads, *b);
                    for row in g.chunks(d_out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cols,
            } => {
                let area = geom.out_area();
                let plen = geom.patch_len();
                let img_len = geom.c_in * geom.h * geom.w;
                if self.tracks(*k) {
                    let dk = self.slot(grads, *k);
                    for bi in 0..geom.batch {
                        let gb = &g[bi * geom.c_out * area..(bi + 1) * geom.c_out * area];
                        let col = &cols[bi * plen * area..(bi + 1) * plen * area];
                        gemm(geom.c_out, area, plen, gb, Layout::Normal, col, Layout::Transposed, 1.0, dk);
                    }
                }
                if self.tracks(*b) {
                    let db = self.slot(grads, *b);
                    for (ci, row) in g.chunks(area).enumerate() {
                        db[ci % geom.c_out] += row.iter().sum::<f64>();
                    }
                }
                if self.tracks(*x) {
                    let kd = self.value(*k).data();
                    let mut dcol = vec![0.0; plen * area];
                    let dx = self.slot(grads, *x);
                    for bi in 0..geom.batch {
                        let gb = &g[bi * geom.c_out * area..(bi + 1) * geom.c_out * area];
                        gemm(plen, geom.c_out, area, kd, Layout::Transposed, gb, Layout::Normal, 0.0, &mut dcol);
                        col2im_add(&dcol, geom, &mut dx[bi * img_len..(bi + 1) * img_len]);
                    }
                }
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = self.slot(grads, *x);
                for ((acc, gv), yv) in dx.iter_mut().zip(&g).zip(y) {
                    if *yv > 0.0 {
                        *acc += gv;
                    }
                }
            }
            Op::MulConst { x, factors } => {
                let dx = self.slot(grads, *x);
                for ((acc, gv), f) in dx.iter_mut().zip(&g).zip(factors) {
                    *acc += gv * f;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims: (outer, feat, inner),
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, feat, inner) = (*outer, *feat, *inner);
                let n = (outer * inner) as f64;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; feat];
                let mut sum_gx = vec![0.0; feat];
                for o in 0..outer {
                    for f in 0..feat {
                        let base = (o * feat + f) * inner;
                        for i in base..base + inner {
                            sum_g[f] += g[i];
                            sum_gx[f] += g[i] * xhat[i];
                        }
                    }
                }
                if self.tracks(*gamma) {
                    let dgamma = self.slot(grads, *gamma);
                    for f in 0..feat {
                        dgamma[f] += sum_gx[f];
                    }
                }
                if self.tracks(*beta) {
                    let dbeta = self.slot(grads, *beta);
                    for f in 0..feat {
                        dbeta[f] += sum_g[f];
                    }
                }
                if self.tracks(*x) {
                    let dx = self.slot(grads, *x);
                    for o in 0..outer {
                        for f in 0..feat {
                            let base = (o * feat + f) * inner;
                            let scale = gd[f] * inv_std[f];
                            for i in base..base + inner {
                                dx[i] += if *batch_stats {
                                    scale * (g[i] - sum_g[f] / n - xhat[i] * sum_gx[f] / n)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = self.slot(grads, *x);
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
            }
            Op::Transpose { x, a, b } => {
                let (back, _) = swap_axes(&g, node.value.shape(), *a, *b);
                add_into(self.slot(grads, *x), &back);
            }
            Op::Reshape { x } => add_into(self.slot(grads, *x), &g),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let ext = self.shape(v)[*axis];
                    if self.tracks(v) {
                        let dv = self.slot(grads, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            add_into(&mut dv[o * ext * inner..(o + 1) * ext * inner], src);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_at_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let dx = self.slot(grads, *x);
                for o in 0..outer {
                    let to = (o * ext + start) * inner;
                    add_into(&mut dx[to..to + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Gather { x, index } => {
                let dx = self.slot(grads, *x);
                for (gv, &src) in g.iter().zip(index) {
                    dx[src] += gv;
                }
            }
            Op::ReduceMean { x, axis } => {
                let (outer, ext, inner) = split_at_axis(self.shape(*x), *axis);
                let inv = 1.0 / ext as f64;
                let dx = self.slot(grads, *x);
                for o in 0..outer {
                    for e in 0..ext {
                        let row = &mut dx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (acc, gv) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *acc += gv * inv;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let dx = self.slot(grads, *x);
                dx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.tracks(v) {
                        add_into(self.slot(grads, v), &g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.tracks(*a) {
                    add_into(self.slot(grads, *a), &g);
                }
                if self.tracks(*b) {
                    let db = self.slot(grads, *b);
                    for (acc, gv) in db.iter_mut().zip(&g) {
                        *acc -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.tracks(this) {
                        let od = self.value(other).data();
                        let dv = self.slot(grads, this);
                        for ((acc, gv), o) in dv.iter_mut().zip(&g).zip(od) {
                            *acc += gv * o;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = self.slot(grads, *x);
                for (acc, gv) in dx.iter_mut().zip(&g) {
                    *acc += c * gv;
                }
            }
            Op::Abs { x } => {
                let xd = self.value(*x).data();
                let dx = self.slot(grads, *x);
                for ((acc, gv), v) in dx.iter_mut().zip(&g).zip(xd) {
                    // subgradient 0 at the kink
                    if *v > 0.0 {
                        *acc += gv;
                    } else if *v < 0.0 {
                        *acc -= gv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer for `v`, created zeroed on first use.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn check_drop_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Parameter(format!(
            "dropout rate {p} outside [0, 1)"
        )));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Copies `data` (of `shape`) with axes `a` and `b` exchanged; returns the new data and shape.
fn swap_axes(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let mut oshape = shape.to_vec();
    oshape.swap(a, b);
    if a == b {
        return (data.to_vec(), oshape);
    }
    let (lo, hi) = (a.min(b), a.max(b));
    let pre: usize = shape[..lo].iter().product();
    let n_lo = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let n_hi = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    // input index  [p][i][m][j][q]  ->  output index [p][j][m][i][q]
    for p in 0..pre {
        for i in 0..n_lo {
            for m in 0..mid {
                for j in 0..n_hi {
                    let src = (((p * n_lo + i) * mid + m) * n_hi + j) * post;
                    let dst = (((p * n_hi + j) * mid + m) * n_lo + i) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    (out, oshape)
}

fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * area..(row + 1) * area];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * area..(row + 1) * area];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            img[base + jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}
