//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every op records its inputs and forward value; `backward` replays the
//! tape in reverse, accumulating gradients into the leaves. A graph is a
//! single-threaded object; run independent graphs on independent data for
//! parallel evaluation.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Relu(Val),
    Silu(Val),
    Sigmoid(Val),
    Softplus(Val),
    Tanh(Val),
    Exp(Val),
    Log(Val),
    Clip { x: Val, lo: f64, hi: f64 },
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    ScalarMul { x: Val, k: f64 },
    ScaleBy { x: Val, s: Val },
    Mean(Val),
    Sum(Val),
    L1Norm(Val),
    L2Norm(Val),
    AvgPool2(Val),
    Upsample2(Val),
    GaussianBlur { x: Val, sigma: f64 },
    Laplacian { x: Val, sigma: f64 },
    ConcatAxis0(Vec<Val>),
    SliceRows { x: Val, start: usize },
    Reshape(Val),
    Transpose2d(Val),
    Softmax(Val),
    LayerNormChannels { x: Val, eps: f64 },
    Standardize { x: Val, eps: f64, sigma: f64 },
    Tv2d(Val),
    Matmul(Val, Val),
    Linear { x: Val, w: Val, b: Val },
    Conv3x3 { x: Val, w: Val, b: Val },
    Conv1x1 { x: Val, w: Val, b: Val },
    BiasChannels { x: Val, b: Val },
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    /// Accumulated leaf gradients; additive across `backward` calls.
    leaf_grads: Vec<Option<Vec<E>>>,
    /// Scan every op output for NaN/Inf and fail loudly.
    pub check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<E>) -> Val {
        let needs = t.requires_grad;
        self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, needs)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<E>) -> Val {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Val) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn value_tensor(&self, v: Val) -> Tensor<E> {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node buffers are consistent")
    }

    pub fn scalar_value(&self, v: Val) -> E {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn needs_grad(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Val) -> Option<&[E]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.leaf_grads.iter_mut() {
            *g = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op, needs_grad: bool) -> Val {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Val(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Val> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        Ok(self.push(shape, data, op, needs_grad))
    }

    fn unary_needs(&self, x: Val) -> bool {
        self.nodes[x.0].needs_grad
    }

    fn require_same_shape(&self, op: &'static str, a: Val, b: Val) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dim {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn require_chw(&self, op: &'static str, x: Val) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::Dim {
                op,
                lhs: s.clone(),
                rhs: vec![0, 0, 0],
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    // ── elementwise unary ───────────────────────────────────────────

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, |v| if v > E::ZERO { v } else { E::ZERO });
        let needs = self.unary_needs(x);
        self.emit("relu", self.nodes[x.0].shape.clone(), data, Op::Relu(x), needs)
    }

    pub fn silu(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, |v| v * sigmoid_scalar(v));
        let needs = self.unary_needs(x);
        self.emit("silu", self.nodes[x.0].shape.clone(), data, Op::Silu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, sigmoid_scalar);
        let needs = self.unary_needs(x);
        self.emit(
            "sigmoid",
            self.nodes[x.0].shape.clone(),
            data,
            Op::Sigmoid(x),
            needs,
        )
    }

    pub fn softplus(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, |v| v.max(E::ZERO) + (-v.abs()).exp().ln_1p());
        let needs = self.unary_needs(x);
        self.emit(
            "softplus",
            self.nodes[x.0].shape.clone(),
            data,
            Op::Softplus(x),
            needs,
        )
    }

    pub fn tanh(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, |v| v.tanh());
        let needs = self.unary_needs(x);
        self.emit("tanh", self.nodes[x.0].shape.clone(), data, Op::Tanh(x), needs)
    }

    pub fn exp(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, |v| v.exp());
        let needs = self.unary_needs(x);
        self.emit("exp", self.nodes[x.0].shape.clone(), data, Op::Exp(x), needs)
    }

    pub fn log(&mut self, x: Val) -> Result<Val> {
        let data = self.map_unary(x, |v| v.ln());
        let needs = self.unary_needs(x);
        self.emit("log", self.nodes[x.0].shape.clone(), data, Op::Log(x), needs)
    }

    pub fn clip(&mut self, x: Val, lo: f64, hi: f64) -> Result<Val> {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let data = self.map_unary(x, |v| v.max(l).min(h));
        let needs = self.unary_needs(x);
        self.emit(
            "clip",
            self.nodes[x.0].shape.clone(),
            data,
            Op::Clip { x, lo, hi },
            needs,
        )
    }

    fn map_unary(&self, x: Val, f: impl Fn(E) -> E) -> Vec<E> {
        self.nodes[x.0].data.iter().map(|v| f(*v)).collect()
    }

    // ── elementwise binary ──────────────────────────────────────────

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<Val> {
        self.require_same_shape(name, a, b)?;
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.emit(name, self.nodes[a.0].shape.clone(), data, op, needs)
    }

    pub fn scalar_mul(&mut self, x: Val, k: f64) -> Result<Val> {
        let ke = E::from_f64(k);
        let data = self.map_unary(x, |v| v * ke);
        let needs = self.unary_needs(x);
        self.emit(
            "scalar_mul",
            self.nodes[x.0].shape.clone(),
            data,
            Op::ScalarMul { x, k },
            needs,
        )
    }

    /// Multiply a tensor by a one-element node (gradient flows to both).
    pub fn scale_by(&mut self, x: Val, s: Val) -> Result<Val> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Dim {
                op: "scale_by",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let k = self.nodes[s.0].data[0];
        let data = self.map_unary(x, |v| v * k);
        let needs = self.nodes[x.0].needs_grad || self.nodes[s.0].needs_grad;
        self.emit(
            "scale_by",
            self.nodes[x.0].shape.clone(),
            data,
            Op::ScaleBy { x, s },
            needs,
        )
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn mean(&mut self, x: Val) -> Result<Val> {
        let n = E::from_f64(self.nodes[x.0].data.len() as f64);
        let s = self.fold_sum(x) / n;
        let needs = self.unary_needs(x);
        self.emit("mean", vec![1], vec![s], Op::Mean(x), needs)
    }

    pub fn sum(&mut self, x: Val) -> Result<Val> {
        let s = self.fold_sum(x);
        let needs = self.unary_needs(x);
        self.emit("sum", vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn l1_norm(&mut self, x: Val) -> Result<Val> {
        let mut s = E::ZERO;
        for v in &self.nodes[x.0].data {
            s += v.abs();
        }
        let needs = self.unary_needs(x);
        self.emit("l1_norm", vec![1], vec![s], Op::L1Norm(x), needs)
    }

    pub fn l2_norm(&mut self, x: Val) -> Result<Val> {
        let mut s = E::ZERO;
        for v in &self.nodes[x.0].data {
            s += *v * *v;
        }
        let needs = self.unary_needs(x);
        self.emit("l2_norm", vec![1], vec![s.sqrt()], Op::L2Norm(x), needs)
    }

    fn fold_sum(&self, x: Val) -> E {
        let mut s = E::ZERO;
        for v in &self.nodes[x.0].data {
            s += *v;
        }
        s
    }

    // ── spatial ops ─────────────────────────────────────────────────

    pub fn avg_pool2(&mut self, x: Val) -> Result<Val> {
        let (c, h, w) = self.require_chw("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim {
                op: "avg_pool2",
                lhs: vec![c, h, w],
                rhs: vec![c, h / 2 * 2, w / 2 * 2],
            });
        }
        let data = kernels::avg_pool2_fwd(&self.nodes[x.0].data, c, h, w);
        let needs = self.unary_needs(x);
        self.emit(
            "avg_pool2",
            vec![c, h / 2, w / 2],
            data,
            Op::AvgPool2(x),
            needs,
        )
    }

    pub fn nearest_upsample2(&mut self, x: Val) -> Result<Val> {
        let (c, h, w) = self.require_chw("nearest_upsample2", x)?;
        let data = kernels::upsample2_fwd(&self.nodes[x.0].data, c, h, w);
        let needs = self.unary_needs(x);
        self.emit(
            "nearest_upsample2",
            vec![c, 2 * h, 2 * w],
            data,
            Op::Upsample2(x),
            needs,
        )
    }

    pub fn gaussian_blur(&mut self, x: Val, sigma: f64) -> Result<Val> {
        if sigma <= 0.0 {
            return Err(Error::Config(format!("gaussian_blur: sigma {sigma} must be > 0")));
        }
        let (c, h, w) = self.require_chw("gaussian_blur", x)?;
        let data = kernels::blur_fwd(&self.nodes[x.0].data, c, h, w, sigma);
        let needs = self.unary_needs(x);
        self.emit(
            "gaussian_blur",
            vec![c, h, w],
            data,
            Op::GaussianBlur { x, sigma },
            needs,
        )
    }

    /// Band-pass map as a difference of blurs at sigma and 2*sigma.
    pub fn laplacian(&mut self, x: Val, sigma: f64) -> Result<Val> {
        if sigma <= 0.0 {
            return Err(Error::Config(format!("laplacian: sigma {sigma} must be > 0")));
        }
        let (c, h, w) = self.require_chw("laplacian", x)?;
        let narrow = kernels::blur_fwd(&self.nodes[x.0].data, c, h, w, sigma);
        let wide = kernels::blur_fwd(&self.nodes[x.0].data, c, h, w, 2.0 * sigma);
        let data: Vec<E> = narrow
            .iter()
            .zip(wide.iter())
            .map(|(a, b)| *a - *b)
            .collect();
        let needs = self.unary_needs(x);
        self.emit(
            "laplacian",
            vec![c, h, w],
            data,
            Op::Laplacian { x, sigma },
            needs,
        )
    }

    // ── structural ops ──────────────────────────────────────────────

    pub fn concat_channels(&mut self, items: &[Val]) -> Result<Val> {
        if items.is_empty() {
            return Err(Error::Contract("concat_channels: empty input list".into()));
        }
        let tail = self.nodes[items[0].0].shape[1..].to_vec();
        let mut axis0 = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &it in items {
            let s = &self.nodes[it.0].shape;
            if s[1..] != tail[..] {
                return Err(Error::Dim {
                    op: "concat_channels",
                    lhs: self.nodes[items[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            axis0 += s[0];
            data.extend_from_slice(&self.nodes[it.0].data);
            needs |= self.nodes[it.0].needs_grad;
        }
        let mut shape = vec![axis0];
        shape.extend_from_slice(&tail);
        self.emit(
            "concat_channels",
            shape,
            data,
            Op::ConcatAxis0(items.to_vec()),
            needs,
        )
    }

    /// Contiguous slice along axis 0.
    pub fn slice_rows(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let s = self.nodes[x.0].shape.clone();
        if start + len > s[0] || len == 0 {
            return Err(Error::Dim {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let stride: usize = s[1..].iter().product();
        let data = self.nodes[x.0].data[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let needs = self.unary_needs(x);
        self.emit("slice_rows", shape, data, Op::SliceRows { x, start }, needs)
    }

    pub fn reshape(&mut self, x: Val, shape: impl Into<Vec<usize>>) -> Result<Val> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::Dim {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.unary_needs(x);
        self.emit("reshape", shape, data, Op::Reshape(x), needs)
    }

    pub fn transpose2d(&mut self, x: Val) -> Result<Val> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Dim {
                op: "transpose2d",
                lhs: s,
                rhs: vec![0, 0],
            });
        }
        let data = kernels::transpose2d(&self.nodes[x.0].data, s[0], s[1]);
        let needs = self.unary_needs(x);
        self.emit("transpose2d", vec![s[1], s[0]], data, Op::Transpose2d(x), needs)
    }

    // ── normalization ───────────────────────────────────────────────

    pub fn softmax(&mut self, x: Val) -> Result<Val> {
        let s = self.nodes[x.0].shape.clone();
        let last = *s.last().expect("softmax needs rank >= 1");
        let data = kernels::softmax_fwd(&self.nodes[x.0].data, last);
        let needs = self.unary_needs(x);
        self.emit("softmax", s, data, Op::Softmax(x), needs)
    }

    pub fn layer_norm_channels(&mut self, x: Val, eps: f64) -> Result<Val> {
        let (c, h, w) = self.require_chw("layer_norm_channels", x)?;
        let data = kernels::layer_norm_channels_fwd(&self.nodes[x.0].data, c, h * w, eps);
        let needs = self.unary_needs(x);
        self.emit(
            "layer_norm_channels",
            vec![c, h, w],
            data,
            Op::LayerNormChannels { x, eps },
            needs,
        )
    }

    /// Whole-tensor zero-mean/unit-variance with an epsilon-guarded divisor.
    pub fn standardize(&mut self, x: Val, eps: f64) -> Result<Val> {
        let xd = &self.nodes[x.0].data;
        let n = E::from_f64(xd.len() as f64);
        let mut mu = E::ZERO;
        for v in xd {
            mu += *v;
        }
        mu /= n;
        let mut var = E::ZERO;
        for v in xd {
            let d = *v - mu;
            var += d * d;
        }
        var /= n;
        let sigma = var.sqrt();
        let denom = sigma + E::from_f64(eps);
        let data: Vec<E> = xd.iter().map(|v| (*v - mu) / denom).collect();
        let needs = self.unary_needs(x);
        self.emit(
            "standardize",
            self.nodes[x.0].shape.clone(),
            data,
            Op::Standardize {
                x,
                eps,
                sigma: sigma.to_f64(),
            },
            needs,
        )
    }

    pub fn tv2d(&mut self, x: Val) -> Result<Val> {
        let (c, h, w) = self.require_chw("tv2d", x)?;
        let v = kernels::tv2d_fwd(&self.nodes[x.0].data, c, h, w);
        let needs = self.unary_needs(x);
        self.emit("tv2d", vec![1], vec![v], Op::Tv2d(x), needs)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = kernels::matmul_fwd(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            sa[0],
            sa[1],
            sb[1],
        );
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.emit("matmul", vec![sa[0], sb[1]], data, Op::Matmul(a, b), needs)
    }

    /// `y = x @ w + b` with `x: [N,K]`, `w: [K,M]`, `b: [M]`.
    pub fn linear(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != vec![sw[1]] {
            return Err(Error::Dim {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut data =
            kernels::matmul_fwd(&self.nodes[x.0].data, &self.nodes[w.0].data, n, k, m);
        for row in data.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(self.nodes[b.0].data.iter()) {
                *o += *bv;
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        self.emit("linear", vec![n, m], data, Op::Linear { x, w, b }, needs)
    }

    /// 3x3 conv, zero padding, stride 1: `x: [C,H,W]`, `w: [Co,C,3,3]`, `b: [Co]`.
    pub fn conv2d_3x3(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let (c, h, wd) = self.require_chw("conv2d_3x3", x)?;
        let sw = self.nodes[w.0].shape.clone();
        if sw.len() != 4 || sw[1] != c || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::Dim {
                op: "conv2d_3x3",
                lhs: vec![c, h, wd],
                rhs: sw,
            });
        }
        let cout = sw[0];
        if self.nodes[b.0].shape != vec![cout] {
            return Err(Error::Dim {
                op: "conv2d_3x3",
                lhs: vec![cout],
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = kernels::conv3x3_fwd(
            &self.nodes[x.0].data,
            c,
            h,
            wd,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            cout,
        );
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        self.emit(
            "conv2d_3x3",
            vec![cout, h, wd],
            data,
            Op::Conv3x3 { x, w, b },
            needs,
        )
    }

    /// 1x1 conv: `x: [C,H,W]`, `w: [Co,C]`, `b: [Co]`.
    pub fn conv2d_1x1(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let (c, h, wd) = self.require_chw("conv2d_1x1", x)?;
        let sw = self.nodes[w.0].shape.clone();
        if sw.len() != 2 || sw[1] != c {
            return Err(Error::Dim {
                op: "conv2d_1x1",
                lhs: vec![c, h, wd],
                rhs: sw,
            });
        }
        let cout = sw[0];
        if self.nodes[b.0].shape != vec![cout] {
            return Err(Error::Dim {
                op: "conv2d_1x1",
                lhs: vec![cout],
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = kernels::conv1x1_fwd(
            &self.nodes[x.0].data,
            c,
            h * wd,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            cout,
        );
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        self.emit(
            "conv2d_1x1",
            vec![cout, h, wd],
            data,
            Op::Conv1x1 { x, w, b },
            needs,
        )
    }

    /// Add a per-channel bias vector to a `[C,H,W]` map.
    pub fn bias_channels(&mut self, x: Val, b: Val) -> Result<Val> {
        let (c, h, w) = self.require_chw("bias_channels", x)?;
        if self.nodes[b.0].shape != vec![c] {
            return Err(Error::Dim {
                op: "bias_channels",
                lhs: vec![c, h, w],
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let plane = h * w;
        let mut data = self.nodes[x.0].data.clone();
        for ch in 0..c {
            let bv = self.nodes[b.0].data[ch];
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v += bv;
            }
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[b.0].needs_grad;
        self.emit(
            "bias_channels",
            vec![c, h, w],
            data,
            Op::BiasChannels { x, b },
            needs,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate d(root)/d(leaf) into every `requires_grad` leaf.
    /// Additive across calls until `zero_grads`.
    pub fn backward(&mut self, root: Val) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![E::ONE]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.leaf_grads[id] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g.iter()) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let dx: Vec<E> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(v, gi)| if *v > E::ZERO { *gi } else { E::ZERO })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx: Vec<E> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(v, gi)| {
                        let s = sigmoid_scalar(*v);
                        *gi * s * (E::ONE + *v * (E::ONE - s))
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<E> = node
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(y, gi)| *gi * *y * (E::ONE - *y))
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let dx: Vec<E> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(v, gi)| *gi * sigmoid_scalar(*v))
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<E> = node
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(y, gi)| *gi * (E::ONE - *y * *y))
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx: Vec<E> = node
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(y, gi)| *gi * *y)
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Log(x) => {
                let dx: Vec<E> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(v, gi)| *gi / *v)
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Clip { x, lo, hi } => {
                let (l, h) = (E::from_f64(*lo), E::from_f64(*hi));
                let dx: Vec<E> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(v, gi)| {
                        if *v >= l && *v <= h {
                            *gi
                        } else {
                            E::ZERO
                        }
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                let db: Vec<E> = g.iter().map(|v| -*v).collect();
                self.acc(grads, *b, db);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<E> = g
                        .iter()
                        .zip(self.nodes[b.0].data.iter())
                        .map(|(gi, bv)| *gi * *bv)
                        .collect();
                    self.acc(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<E> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(gi, av)| *gi * *av)
                        .collect();
                    self.acc(grads, *b, db);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<E> = g
                        .iter()
                        .zip(self.nodes[b.0].data.iter())
                        .map(|(gi, bv)| *gi / *bv)
                        .collect();
                    self.acc(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<E> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter().zip(self.nodes[b.0].data.iter()))
                        .map(|(gi, (av, bv))| -*gi * *av / (*bv * *bv))
                        .collect();
                    self.acc(grads, *b, db);
                }
            }
            Op::ScalarMul { x, k } => {
                let ke = E::from_f64(*k);
                let dx: Vec<E> = g.iter().map(|gi| *gi * ke).collect();
                self.acc(grads, *x, dx);
            }
            Op::ScaleBy { x, s } => {
                let k = self.nodes[s.0].data[0];
                if self.nodes[x.0].needs_grad {
                    let dx: Vec<E> = g.iter().map(|gi| *gi * k).collect();
                    self.acc(grads, *x, dx);
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = E::ZERO;
                    for (gi, xv) in g.iter().zip(self.nodes[x.0].data.iter()) {
                        ds += *gi * *xv;
                    }
                    self.acc(grads, *s, vec![ds]);
                }
            }
            Op::Mean(x) => {
                let n = E::from_f64(self.nodes[x.0].data.len() as f64);
                let gv = g[0] / n;
                self.acc(grads, *x, vec![gv; self.nodes[x.0].data.len()]);
            }
            Op::Sum(x) => {
                self.acc(grads, *x, vec![g[0]; self.nodes[x.0].data.len()]);
            }
            Op::L1Norm(x) => {
                let gv = g[0];
                let dx: Vec<E> = self.nodes[x.0]
                    .data
                    .iter()
                    .map(|v| {
                        if *v > E::ZERO {
                            gv
                        } else if *v < E::ZERO {
                            -gv
                        } else {
                            E::ZERO
                        }
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::L2Norm(x) => {
                let norm = node.data[0];
                if norm == E::ZERO {
                    return;
                }
                let s = g[0] / norm;
                let dx: Vec<E> = self.nodes[x.0].data.iter().map(|v| *v * s).collect();
                self.acc(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let [c, h, w] = chw_of(&self.nodes[x.0].shape);
                self.acc(grads, *x, kernels::avg_pool2_bwd(g, c, h, w));
            }
            Op::Upsample2(x) => {
                let [c, h, w] = chw_of(&self.nodes[x.0].shape);
                self.acc(grads, *x, kernels::upsample2_bwd(g, c, h, w));
            }
            Op::GaussianBlur { x, sigma } => {
                let [c, h, w] = chw_of(&self.nodes[x.0].shape);
                self.acc(grads, *x, kernels::blur_adjoint(g, c, h, w, *sigma));
            }
            Op::Laplacian { x, sigma } => {
                let [c, h, w] = chw_of(&self.nodes[x.0].shape);
                let narrow = kernels::blur_adjoint(g, c, h, w, *sigma);
                let wide = kernels::blur_adjoint(g, c, h, w, 2.0 * *sigma);
                let dx: Vec<E> = narrow
                    .iter()
                    .zip(wide.iter())
                    .map(|(a, b)| *a - *b)
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::ConcatAxis0(items) => {
                let mut off = 0;
                for &it in items {
                    let len = self.nodes[it.0].data.len();
                    if self.nodes[it.0].needs_grad {
                        self.acc(grads, it, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let stride: usize = self.nodes[x.0].shape[1..].iter().product();
                let mut dx = vec![E::ZERO; self.nodes[x.0].data.len()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                self.acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.to_vec());
            }
            Op::Transpose2d(x) => {
                let s = &self.nodes[x.0].shape;
                self.acc(grads, *x, kernels::transpose2d(g, s[1], s[0]));
            }
            Op::Softmax(x) => {
                let last = *node.shape.last().expect("softmax rank >= 1");
                self.acc(grads, *x, kernels::softmax_bwd(&node.data, g, last));
            }
            Op::LayerNormChannels { x, eps } => {
                let [c, h, w] = chw_of(&self.nodes[x.0].shape);
                self.acc(
                    grads,
                    *x,
                    kernels::layer_norm_channels_bwd(&self.nodes[x.0].data, g, c, h * w, *eps),
                );
            }
            Op::Standardize { x, eps, sigma } => {
                let y = &node.data;
                let n = E::from_f64(y.len() as f64);
                let denom = E::from_f64(*sigma + *eps);
                let mut gmean = E::ZERO;
                let mut s = E::ZERO;
                for (gi, yi) in g.iter().zip(y.iter()) {
                    gmean += *gi;
                    s += *gi * *yi;
                }
                gmean /= n;
                let sig = E::from_f64(*sigma);
                let dx: Vec<E> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gi, yi)| {
                        let mut d = (*gi - gmean) / denom;
                        if sig > E::ZERO {
                            d -= *yi * s / (n * sig);
                        }
                        d
                    })
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Tv2d(x) => {
                let [c, h, w] = chw_of(&self.nodes[x.0].shape);
                self.acc(
                    grads,
                    *x,
                    kernels::tv2d_bwd(&self.nodes[x.0].data, g[0], c, h, w),
                );
            }
            Op::Matmul(a, b) => {
                let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let m = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    self.acc(
                        grads,
                        *a,
                        kernels::matmul_bwd_a(g, &self.nodes[b.0].data, n, k, m),
                    );
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(
                        grads,
                        *b,
                        kernels::matmul_bwd_b(g, &self.nodes[a.0].data, n, k, m),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let m = self.nodes[w.0].shape[1];
                if self.nodes[x.0].needs_grad {
                    self.acc(
                        grads,
                        *x,
                        kernels::matmul_bwd_a(g, &self.nodes[w.0].data, n, k, m),
                    );
                }
                if self.nodes[w.0].needs_grad {
                    self.acc(
                        grads,
                        *w,
                        kernels::matmul_bwd_b(g, &self.nodes[x.0].data, n, k, m),
                    );
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![E::ZERO; m];
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row.iter()) {
                            *d += *v;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let [c, h, wd] = chw_of(&self.nodes[x.0].shape);
                let cout = self.nodes[w.0].shape[0];
                if self.nodes[x.0].needs_grad {
                    self.acc(
                        grads,
                        *x,
                        kernels::conv3x3_bwd_input(g, c, h, wd, &self.nodes[w.0].data, cout),
                    );
                }
                if self.nodes[w.0].needs_grad {
                    self.acc(
                        grads,
                        *w,
                        kernels::conv3x3_bwd_weight(&self.nodes[x.0].data, c, h, wd, g, cout),
                    );
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, kernels::bwd_bias_channels(g, cout, h * wd));
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let [c, h, wd] = chw_of(&self.nodes[x.0].shape);
                let cout = self.nodes[w.0].shape[0];
                if self.nodes[x.0].needs_grad {
                    self.acc(
                        grads,
                        *x,
                        kernels::conv1x1_bwd_input(g, c, h * wd, &self.nodes[w.0].data, cout),
                    );
                }
                if self.nodes[w.0].needs_grad {
                    self.acc(
                        grads,
                        *w,
                        kernels::conv1x1_bwd_weight(&self.nodes[x.0].data, c, h * wd, g, cout),
                    );
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, kernels::bwd_bias_channels(g, cout, h * wd));
                }
            }
            Op::BiasChannels { x, b } => {
                let [c, h, w] = chw_of(&node.shape);
                if self.nodes[x.0].needs_grad {
                    self.acc(grads, *x, g.to_vec());
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, kernels::bwd_bias_channels(g, c, h * w));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<E>>], target: Val, delta: Vec<E>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta.iter()) {
                    *a += *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

#[inline]
fn chw_of(shape: &[usize]) -> [usize; 3] {
    [shape[0], shape[1], shape[2]]
}

#[inline]
fn sigmoid_scalar<E: Element>(v: E) -> E {
    if v >= E::ZERO {
        E::ONE / (E::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_conv3x3_preserves_map() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut kw = vec![0.0; 9];
        kw[4] = 1.0;
        let w = g.leaf(t(&[1, 1, 3, 3], &kw));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d_3x3(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(vec![4, 4], 3.5));
        let m = g.mean(x).unwrap();
        assert_eq!(g.scalar_value(m), 3.5);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).requires_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_is_input() {
        let data = [0.3, -1.2, 2.0, 0.7];
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &data).requires_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scalar_mul(s, 0.5).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), &data);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulation_is_linear() {
        let data = [0.3, -1.2, 2.0];
        // grads from backward(a) then backward(b) == grads from backward(a+b)
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &data).requires_grad());
        let a = g.sum(x).unwrap();
        let sq = g.mul(x, x).unwrap();
        let b = g.sum(sq).unwrap();
        g.backward(a).unwrap();
        g.backward(b).unwrap();
        let separate = g.grad(x).unwrap().to_vec();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(t(&[3], &data).requires_grad());
        let a2 = g2.sum(x2).unwrap();
        let sq2 = g2.mul(x2, x2).unwrap();
        let b2 = g2.sum(sq2).unwrap();
        let tot = g2.add(a2, b2).unwrap();
        g2.backward(tot).unwrap();
        assert_eq!(separate, g2.grad(x2).unwrap());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.0, 1.0]));
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log" }));
    }

    #[test]
    fn pool_then_upsample_idempotent_on_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(vec![2, 4, 4], 0.75));
        let p = g.avg_pool2(x).unwrap();
        let u = g.nearest_upsample2(p).unwrap();
        assert_eq!(g.value(u), g.value(x));
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(vec![1, 8, 8], 1.0));
        let y = g.gaussian_blur(x, 1.7).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full(vec![1, 8, 8], 0.6));
        let y = g.laplacian(x, 1.0).unwrap();
        for v in g.value(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 5.0, 5.0]));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dim_error_carries_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::<f64>::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::<f64>::zeros(vec![3, 2]));
        match g.add(a, b) {
            Err(Error::Dim { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected dim error, got {other:?}"),
        }
    }
}
