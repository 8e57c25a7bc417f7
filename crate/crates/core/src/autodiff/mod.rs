//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] appends a node holding its value and enough
//! context to run the vector-Jacobian product later. [`Tape::backward`] walks
//! the nodes in reverse, summing adjoints, and accumulates into the gradient
//! buffer of each leaf that requires it. Leaf gradients persist across
//! `backward` calls until [`Tape::zero_grad`].
//!
//! There is no implicit broadcasting: elementwise operations require equal
//! shapes, and [`Tape::expand`] repeats size-1 axes explicitly.

pub mod kernels;
mod optim;

pub use optim::{AdamW, CosineSchedule};

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::ssm::{self, ScanDims};
use crate::tensor::{numel, Tensor};
use crate::toki::{self, FillPlan, TokiVariant};
use kernels::Conv3dGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Conv3dGeom },
    MaxPool2(Var, Vec<usize>),
    Upsample2(Var),
    Sum(Var),
    Mean(Var),
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    CausalConv1d { x: Var, w: Var, b: Var },
    SelectiveScan { u: Var, delta: Var, a: Var, b: Var, c: Var, states: Vec<T>, dims: ScanDims },
    TokiFill { tokens: Var, a: Var, variant: TokiVariant, plan: Box<FillPlan> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(Error::invalid(op, format!("expected [C, D, H, W], got {shape:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn out(&self, shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data).expect("kernel produced consistent shape")
    }

    /// Records a leaf. It takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: Op<T>) -> Result<Var> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = self.out(self.shape(a), data);
        Ok(self.push(value, mk, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, mk: Op<T>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = self.out(self.shape(x), data);
        self.push(value, mk, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v * kernels::sigmoid(v), Op::Silu(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let value = self.out(&[m, n], data);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.out(shape, self.data(x).to_vec());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", shape, perm));
        }
        let map = kernels::permute_map(shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        let value = self.out(&out_shape, data);
        Ok(self.push(value, Op::Permute(x, map), &[x]))
    }

    /// Repeats size-1 axes to reach `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != 1 && s != d) {
            return Err(Error::shape("expand", src, shape));
        }
        let map = kernels::expand_map(src, shape);
        let d = self.data(x);
        let data = map.iter().map(|&i| d[i]).collect();
        let value = self.out(shape, data);
        Ok(self.push(value, Op::Expand(x, map), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                data.extend_from_slice(&self.data(x)[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = self.out(&shape, data);
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid("slice", format!("{start}+{len} out of range on axis {axis} of {shape:?}")));
        }
        let (outer, ext, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = self.out(&out_shape, data);
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::invalid("gather", "scalar input"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {rows} rows")));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let value = self.out(&out_shape, data);
        Ok(self.push(value, Op::Gather(x, index.to_vec()), &[x]))
    }

    /// Places row `k` of `x` at row `index[k]` of a zero tensor with `rows`
    /// rows. Indices must be distinct.
    pub fn scatter(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&index.len()) {
            return Err(Error::shape("scatter", &shape, &[index.len()]));
        }
        let mut seen = vec![false; rows];
        for &i in index {
            if i >= rows {
                return Err(Error::invalid("scatter", format!("index {i} out of range for {rows} rows")));
            }
            if core::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicatePosition { op: "scatter", index: i });
            }
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut data = vec![T::zero(); rows * inner];
        for (k, &i) in index.iter().enumerate() {
            data[i * inner..(i + 1) * inner].copy_from_slice(&src[k * inner..(k + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let value = self.out(&out_shape, data);
        Ok(self.push(value, Op::Scatter(x, index.to_vec()), &[x]))
    }

    /// Same-padded stride-1 3D convolution. `x: [Cin, D, H, W]`,
    /// `w: [Cout, Cin, k, k, k]` with odd `k`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, dims) = spatial("conv3d", self.shape(x))?;
        let ws = self.shape(w);
        let (cout, k) = match *ws {
            [co, ci, k0, k1, k2] if ci == cin && k0 == k1 && k1 == k2 && k0 % 2 == 1 => (co, k0),
            _ => return Err(Error::shape("conv3d", self.shape(x), ws)),
        };
        if let Some(b) = b {
            same_shape("conv3d", self.shape(b), &[cout])?;
        }
        let geom = Conv3dGeom { cin, cout, dims, kernel: k };
        let data = kernels::conv3d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let value = self.out(&[cout, dims[0], dims[1], dims[2]], data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, &inputs))
    }

    /// 2× max-pool over the spatial axes of `[C, D, H, W]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, dims) = spatial("maxpool2", self.shape(x))?;
        if dims.iter().any(|d| d % 2 != 0) {
            return Err(Error::Indivisible { op: "maxpool2", extents: dims, divisor: 2 });
        }
        let (data, arg) = kernels::maxpool2_forward(self.data(x), c, dims);
        let value = self.out(&[c, dims[0] / 2, dims[1] / 2, dims[2] / 2], data);
        Ok(self.push(value, Op::MaxPool2(x, arg), &[x]))
    }

    /// 2× nearest-neighbour upsample of `[C, D, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, dims) = spatial("upsample2", self.shape(x))?;
        let data = kernels::upsample2_forward(self.data(x), c, dims);
        let value = self.out(&[c, dims[0] * 2, dims[1] * 2, dims[2] * 2], data);
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum();
        let m = s / T::from_usize(d.len().max(1));
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Layer normalization across axis 0 of `[C, ...]`, independently at
    /// every trailing position, with per-channel affine `gamma`, `beta`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| Error::invalid("channel_norm", "scalar input"))?;
        same_shape("channel_norm", self.shape(gamma), &[c])?;
        same_shape("channel_norm", self.shape(beta), &[c])?;
        let p = self.value(x).numel() / c.max(1);
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); p];
        let mut out = vec![T::zero(); xd.len()];
        let cn = T::from_usize(c);
        for j in 0..p {
            let mean = (0..c).map(|ch| xd[ch * p + j]).sum::<T>() / cn;
            let var = (0..c).map(|ch| (xd[ch * p + j] - mean).powi(2)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[j] = is;
            for ch in 0..c {
                let xh = (xd[ch * p + j] - mean) * is;
                xhat[ch * p + j] = xh;
                out[ch * p + j] = gd[ch] * xh + bd[ch];
            }
        }
        let value = self.out(&shape, out);
        Ok(self.push(value, Op::ChannelNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Depthwise causal convolution over a token sequence.
    /// `x: [L, D]`, `w: [D, k]`, `b: [D]`; tap `k-1` multiplies the current
    /// token, tap `k-1-s` the token `s` steps back.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, d) = match *self.shape(x) {
            [l, d] => (l, d),
            _ => return Err(Error::invalid("causal_conv1d", "expected [L, D] input")),
        };
        let k = match *self.shape(w) {
            [dd, k] if dd == d && k >= 1 => k,
            _ => return Err(Error::shape("causal_conv1d", self.shape(x), self.shape(w))),
        };
        same_shape("causal_conv1d", self.shape(b), &[d])?;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); l * d];
        for t in 0..l {
            for ch in 0..d {
                let mut acc = bd[ch];
                for tap in 0..k {
                    let back = k - 1 - tap;
                    if back <= t {
                        acc += wd[ch * k + tap] * xd[(t - back) * d + ch];
                    }
                }
                out[t * d + ch] = acc;
            }
        }
        let value = self.out(&[l, d], out);
        Ok(self.push(value, Op::CausalConv1d { x, w, b }, &[x, w, b]))
    }

    /// Fused multi-channel selective scan (see [`ssm::selective_scan_forward`]).
    /// `u`, `delta`: `[L, D]`; `a`: `[D, N]`; `b`, `c`: `[L, N]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (l, d) = match *self.shape(u) {
            [l, d] => (l, d),
            _ => return Err(Error::invalid("selective_scan", "expected [L, D] input")),
        };
        same_shape("selective_scan", self.shape(delta), &[l, d])?;
        let n = match *self.shape(a) {
            [dd, n] if dd == d => n,
            _ => return Err(Error::shape("selective_scan", &[l, d], self.shape(a))),
        };
        same_shape("selective_scan", self.shape(b), &[l, n])?;
        same_shape("selective_scan", self.shape(c), &[l, n])?;
        let dims = ScanDims { len: l, channels: d, state: n };
        let (y, states) = ssm::selective_scan_forward(
            self.data(u),
            self.data(delta),
            self.data(a),
            self.data(b),
            self.data(c),
            dims,
        );
        let value = self.out(&[l, d], y);
        Ok(self.push(value, Op::SelectiveScan { u, delta, a, b, c, states, dims }, &[u, delta, a, b, c]))
    }

    /// Dense `[T, C]` sequence from visible rows `tokens: [K, C]` placed at
    /// `positions`, masked runs filled by state-space interpolation with
    /// per-channel parameter `a: [C]`.
    pub fn toki_fill(
        &mut self,
        tokens: Var,
        a: Var,
        positions: &[usize],
        total_len: usize,
        variant: TokiVariant,
    ) -> Result<Var> {
        let c = match *self.shape(a) {
            [c] => c,
            _ => return Err(Error::invalid("toki_fill", "parameter must be a vector")),
        };
        same_shape("toki_fill", self.shape(tokens), &[positions.len(), c])?;
        let plan = FillPlan::new(positions, total_len)?;
        let data = toki::fill_forward(self.data(tokens), self.data(a), variant, &plan);
        let value = self.out(&[total_len, c], data);
        Ok(self.push(value, Op::TokiFill { tokens, a, variant, plan: Box::new(plan) }, &[tokens, a]))
    }

    /// Convenience: `x W + b` for `x: [M, K]`, `W: [K, N]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let n = self.shape(b)[0];
                let m = self.shape(y)[0];
                let row = self.reshape(b, &[1, n])?;
                let full = self.expand(row, &[m, n])?;
                self.add(y, full)
            }
        }
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.vjp(i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, &c)| *b += c),
                slot => *slot = Some(contrib),
            }
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(&g, &y)| g * y).collect()),
            Op::Softplus(x) => acc(*x, g.iter().zip(val(*x)).map(|(&g, &v)| g * kernels::sigmoid(v)).collect()),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out).map(|(&g, &s)| g * s * (T::one() - s)).collect()),
            Op::Silu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        let s = kernels::sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect(),
            ),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    acc(*a, kernels::matmul(g, &bt, m, n, k));
                }
                if needs(*b) {
                    let at = kernels::transpose(val(*a), m, k);
                    acc(*b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, map) => {
                let mut gx = vec![T::zero(); g.len()];
                for (&src, &gv) in map.iter().zip(g) {
                    gx[src] = gv;
                }
                acc(*x, gx);
            }
            Op::Expand(x, map) => {
                let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                for (&src, &gv) in map.iter().zip(g) {
                    gx[src] += gv;
                }
                acc(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = kernels::axis_split(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = nodes[x.0].value.shape()[*axis];
                    if needs(x) {
                        let mut gx = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[s..s + ext * inner]);
                        }
                        acc(x, gx);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (outer, ext, inner) = kernels::axis_split(in_shape, *axis);
                let len = nodes[i].value.shape()[*axis];
                let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                for o in 0..outer {
                    let d = (o * ext + start) * inner;
                    gx[d..d + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::Gather(x, index) => {
                let inner = g.len() / index.len().max(1);
                let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                for (k, &r) in index.iter().enumerate() {
                    for j in 0..inner {
                        gx[r * inner + j] += g[k * inner + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Scatter(x, index) => {
                let inner = nodes[x.0].value.numel() / index.len().max(1);
                let mut gx = Vec::with_capacity(index.len() * inner);
                for &r in index {
                    gx.extend_from_slice(&g[r * inner..(r + 1) * inner]);
                }
                acc(*x, gx);
            }
            Op::Conv3d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv3d_backward(g, val(*x), val(*w), geom, needs(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut gx = vec![T::zero(); nodes[x.0].value.numel()];
                for (&src, &gv) in arg.iter().zip(g) {
                    gx[src] += gv;
                }
                acc(*x, gx);
            }
            Op::Upsample2(x) => {
                let s = nodes[x.0].value.shape();
                acc(*x, kernels::upsample2_backward(g, s[0], [s[1], s[2], s[3]]));
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                acc(*x, vec![g[0] / T::from_usize(n.max(1)); n]);
            }
            Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                let c = nodes[x.0].value.shape()[0];
                let p = inv_std.len();
                let gd = val(*gamma);
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); g.len()];
                let cn = T::from_usize(c);
                for j in 0..p {
                    let mut mean_gh = T::zero();
                    let mut mean_gh_xh = T::zero();
                    for ch in 0..c {
                        let k = ch * p + j;
                        gg[ch] += g[k] * xhat[k];
                        gbeta[ch] += g[k];
                        let gh = g[k] * gd[ch];
                        mean_gh += gh;
                        mean_gh_xh += gh * xhat[k];
                    }
                    mean_gh /= cn;
                    mean_gh_xh /= cn;
                    for ch in 0..c {
                        let k = ch * p + j;
                        gx[k] = inv_std[j] * (g[k] * gd[ch] - mean_gh - xhat[k] * mean_gh_xh);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::CausalConv1d { x, w, b } => {
                let s = nodes[x.0].value.shape();
                let (l, d) = (s[0], s[1]);
                let k = nodes[w.0].value.shape()[1];
                let (xd, wd) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); l * d];
                let mut gw = vec![T::zero(); d * k];
                let mut gb = vec![T::zero(); d];
                for t in 0..l {
                    for ch in 0..d {
                        let gv = g[t * d + ch];
                        gb[ch] += gv;
                        for tap in 0..k {
                            let back = k - 1 - tap;
                            if back <= t {
                                gw[ch * k + tap] += gv * xd[(t - back) * d + ch];
                                gx[(t - back) * d + ch] += gv * wd[ch * k + tap];
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::SelectiveScan { u, delta, a, b, c, states, dims } => {
                let gr = ssm::selective_scan_backward(g, val(*u), val(*delta), val(*a), val(*b), val(*c), states, *dims);
                acc(*u, gr.u);
                acc(*delta, gr.delta);
                acc(*a, gr.a);
                acc(*b, gr.b);
                acc(*c, gr.c);
            }
            Op::TokiFill { tokens, a, variant, plan } => {
                let (gt, ga) = toki::fill_backward(g, val(*tokens), val(*a), *variant, plan);
                acc(*tokens, gt);
                acc(*a, ga);
            }
        }
    }
}
