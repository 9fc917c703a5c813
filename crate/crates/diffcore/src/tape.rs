//! Define-by-run tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse insertion order, which is a valid reverse
//! topological order because parents are always recorded before children.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Log { x: Var, floor: f64 },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    CausalConv { x: Var, w: Var },
    Propagate { adj: Arc<Tensor>, x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    BroadcastTo(Var),
    Select { x: Var, axis: usize, index: usize },
    MeanAxis { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Mse(Var, Var),
    GradReverse { x: Var, lambda: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    seed: u64,
    bound_params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn arg_err(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Input offsets for a numpy-style broadcast of `from` to `to`.
fn broadcast_offsets(from: &[usize], to: &[usize]) -> Vec<usize> {
    let pad = to.len() - from.len();
    let mut strides = vec![0usize; to.len()];
    let mut acc = 1;
    for d in (0..from.len()).rev() {
        if from[d] != 1 {
            strides[d + pad] = acc;
        }
        acc *= from[d];
    }
    let total: usize = to.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Copies `x` (sequences of length `len` with `ch` channels) shifted right
/// by `shift` steps with zero fill.
fn shift_sequences(x: &[f64], len: usize, ch: usize, shift: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if shift >= len {
        return out;
    }
    let seq = len * ch;
    for (src, dst) in x.chunks_exact(seq).zip(out.chunks_exact_mut(seq)) {
        dst[shift * ch..].copy_from_slice(&src[..(len - shift) * ch]);
    }
    out
}

impl Tape {
    /// A tape in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            seed: 0,
            bound_params: HashMap::new(),
        }
    }

    /// A tape in training mode; dropout masks derive from `seed` and the
    /// per-call site key.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            seed,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives a gradient (read it with [`Tape::grad`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound_params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.bound_params.insert(id, v);
        v
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`
    /// (e.g. a bias vector against a batch of rows).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(va.shape(), vb.shape()) {
            return Err(shape_err("add", va, vb));
        }
        let bl = vb.len().max(1);
        let mut out = va.clone();
        for chunk in out.data_mut().chunks_mut(bl) {
            for (o, y) in chunk.iter_mut().zip(vb.data()) {
                *o += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product with the same suffix broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(va.shape(), vb.shape()) {
            return Err(shape_err("mul", va, vb));
        }
        let bl = vb.len().max(1);
        let mut out = va.clone();
        for chunk in out.data_mut().chunks_mut(bl) {
            for (o, y) in chunk.iter_mut().zip(vb.data()) {
                *o *= y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v < 0.0) {
            return Err(arg_err("sqrt", "negative input"));
        }
        let out = self.value(x).map(f64::sqrt);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sqrt(x), rg))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor
    /// is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(out, Op::Log { x, floor }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(arg_err("softmax", "needs rank >= 1"));
        }
        let (_, cols) = vx.rows_cols();
        let mut out = vx.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(arg_err("mean", "empty tensor"));
        }
        let out = Tensor::scalar(vx.sum() / vx.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// `a` of shape `(..., k)` times matrix `b` of shape `(k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() < 1 || vb.rank() != 2 || va.shape()[va.rank() - 1] != vb.shape()[0] {
            return Err(shape_err("matmul", va, vb));
        }
        let (rows, k) = va.rows_cols();
        let n = vb.shape()[1];
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let mut out = Tensor::zeros(&shape);
        gemm(
            rows,
            k,
            n,
            va.data(),
            false,
            vb.data(),
            false,
            out.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Causal 1-D convolution along the second-to-last axis.
    ///
    /// `x` has shape `(..., K, c_in)` and `w` has shape `(kernel, c_in, c_out)`;
    /// the sequence is left-padded with `kernel - 1` zeros so the output keeps
    /// length `K`. Output step `t` sees inputs `t - kernel + 1 ..= t`, with tap
    /// `kernel - 1` applied to step `t` itself.
    pub fn causal_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() < 2 || vw.rank() != 3 || vw.shape()[1] != vx.shape()[vx.rank() - 1] {
            return Err(shape_err("causal_conv1d", vx, vw));
        }
        let r = vx.rank();
        let (len, cin) = (vx.shape()[r - 2], vx.shape()[r - 1]);
        let (ks, cout) = (vw.shape()[0], vw.shape()[2]);
        let rows = vx.len() / cin.max(1);
        let mut shape = vx.shape().to_vec();
        shape[r - 1] = cout;
        let mut out = Tensor::zeros(&shape);
        for tap in 0..ks {
            let shift = ks - 1 - tap;
            let wt = &vw.data()[tap * cin * cout..(tap + 1) * cin * cout];
            if shift == 0 {
                gemm(
                    rows,
                    cin,
                    cout,
                    vx.data(),
                    false,
                    wt,
                    false,
                    out.data_mut(),
                    true,
                );
            } else {
                let xs = shift_sequences(vx.data(), len, cin, shift);
                gemm(rows, cin, cout, &xs, false, wt, false, out.data_mut(), true);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::CausalConv { x, w }, rg))
    }

    /// Mixes axis 1 of `x` (shape `(B, N_cols, ...)`) by the constant matrix
    /// `adj` (shape `(N_rows, N_cols)`), giving `(B, N_rows, ...)`.
    pub fn propagate(&mut self, adj: &Arc<Tensor>, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if adj.rank() != 2 || vx.rank() < 2 || vx.shape()[1] != adj.shape()[1] {
            return Err(shape_err("propagate", adj, vx));
        }
        let (nr, nc) = (adj.shape()[0], adj.shape()[1]);
        let batch = vx.shape()[0];
        let feat: usize = vx.shape()[2..].iter().product();
        let mut shape = vx.shape().to_vec();
        shape[1] = nr;
        let mut out = Tensor::zeros(&shape);
        for b in 0..batch {
            gemm(
                nr,
                nc,
                feat,
                adj.data(),
                false,
                &vx.data()[b * nc * feat..(b + 1) * nc * feat],
                false,
                &mut out.data_mut()[b * nr * feat..(b + 1) * nr * feat],
                false,
            );
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Propagate {
                adj: Arc::clone(adj),
                x,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| arg_err("concat", "no inputs"))?,
        );
        if axis >= first.rank() {
            return Err(arg_err("concat", format!("axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let v = self.value(*p);
            let ok = v.rank() == first.rank()
                && v.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first, v));
            }
            shape[axis] += v.shape()[axis];
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Collapses all axes from `axis` onward into one.
    pub fn flatten_from(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(arg_err("flatten_from", format!("axis {axis} out of range")));
        }
        let mut new_shape = shape[..axis].to_vec();
        new_shape.push(shape[axis..].iter().product());
        self.reshape(x, &new_shape)
    }

    /// Numpy-style broadcast (trailing alignment, size-1 axes expand).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let pad = shape.len().checked_sub(vx.rank());
        let ok = pad.is_some_and(|pad| {
            vx.shape()
                .iter()
                .enumerate()
                .all(|(d, &n)| n == 1 || n == shape[d + pad])
        });
        if !ok {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: vx.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let offsets = broadcast_offsets(vx.shape(), shape);
        let data = offsets.iter().map(|&o| vx.data()[o]).collect();
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::BroadcastTo(x), rg))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || index >= vx.shape()[axis] {
            return Err(arg_err(
                "select",
                format!("index {index} on axis {axis} of {:?}", vx.shape()),
            ));
        }
        let (outer, n, inner) = split_at_axis(vx.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&vx.data()[base..base + inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Select { x, axis, index }, rg))
    }

    /// Mean along `axis`, removing that axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || vx.shape()[axis] == 0 {
            return Err(arg_err(
                "mean_axis",
                format!("bad axis {axis} for {:?}", vx.shape()),
            ));
        }
        let (outer, n, inner) = split_at_axis(vx.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &vx.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= n as f64);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxis { x, axis }, rg))
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (biased variance, `eps` added before the square root). No affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(arg_err("layer_norm", "needs rank >= 1"));
        }
        let (rows, cols) = vx.rows_cols();
        let mut out = vx.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    /// The mask is a pure function of the tape seed and `site`.
    pub fn dropout(&mut self, x: Var, p: f64, site: &str) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(arg_err("dropout", format!("rate {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(site.as_bytes()));
        let keep = 1.0 / (1.0 - p);
        let vx = self.value(x);
        let mask: Vec<f64> = (0..vx.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.is_empty() {
            return Err(shape_err("mse", va, vb));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(arg_err(
                "gradient_reversal",
                format!("lambda {lambda} must be >= 0"),
            ));
        }
        let out = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(out, Op::GradReverse { x, lambda }, rg))
    }

    /// Reverse sweep from a scalar `root`. Gradients from earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let root_shape = self.shape(root).to_vec();
        self.nodes[root.0].grad = Some(Tensor::filled(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                let contributions = self.local_grads(i, &g)?;
                for (parent, pg) in contributions {
                    self.accumulate(parent, pg);
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, reduce_suffix(g, val(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let bl = vb.len().max(1);
                if want(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(bl) {
                        for (o, y) in chunk.iter_mut().zip(vb.data()) {
                            *o *= y;
                        }
                    }
                    out.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    for (gc, ac) in g.data().chunks(bl).zip(va.data().chunks(bl)) {
                        for ((o, x), gg) in gb.data_mut().iter_mut().zip(ac).zip(gc) {
                            *o += x * gg;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::Abs(x) => {
                let vx = val(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, Tensor::from_vec(vx.shape(), data)?));
            }
            Op::Sigmoid(x) => {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(s, g)| g * s * (1.0 - s))
                    .collect();
                out.push((*x, Tensor::from_vec(y.shape(), data)?));
            }
            Op::Relu(x) => {
                let vx = val(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::from_vec(vx.shape(), data)?));
            }
            Op::Sqrt(x) => {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(s, g)| if *s > 0.0 { g / (2.0 * s) } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::from_vec(y.shape(), data)?));
            }
            Op::Log { x, floor } => {
                let vx = val(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| if *x > *floor { g / x } else { 0.0 })
                    .collect();
                out.push((*x, Tensor::from_vec(vx.shape(), data)?));
            }
            Op::Softmax(x) => {
                let (_, cols) = y.rows_cols();
                let mut gx = Tensor::zeros(y.shape());
                for ((o, s), gg) in gx
                    .data_mut()
                    .chunks_mut(cols.max(1))
                    .zip(y.data().chunks(cols.max(1)))
                    .zip(g.data().chunks(cols.max(1)))
                {
                    let dot: f64 = s.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for ((o, s), gg) in o.iter_mut().zip(s).zip(gg) {
                        *o = s * (gg - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => out.push((*x, Tensor::filled(val(*x).shape(), g.data()[0]))),
            Op::Mean(x) => {
                let vx = val(*x);
                out.push((
                    *x,
                    Tensor::filled(vx.shape(), g.data()[0] / vx.len() as f64),
                ));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (rows, k) = va.rows_cols();
                let n = vb.shape()[1];
                if want(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    gemm(
                        rows,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        true,
                        ga.data_mut(),
                        false,
                    );
                    out.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    gemm(
                        k,
                        rows,
                        n,
                        va.data(),
                        true,
                        g.data(),
                        false,
                        gb.data_mut(),
                        false,
                    );
                    out.push((*b, gb));
                }
            }
            Op::CausalConv { x, w } => {
                let (vx, vw) = (val(*x), val(*w));
                let r = vx.rank();
                let (len, cin) = (vx.shape()[r - 2], vx.shape()[r - 1]);
                let (ks, cout) = (vw.shape()[0], vw.shape()[2]);
                let rows = vx.len() / cin.max(1);
                let mut gx = want(*x).then(|| Tensor::zeros(vx.shape()));
                let mut gw = want(*w).then(|| Tensor::zeros(vw.shape()));
                for tap in 0..ks {
                    let shift = ks - 1 - tap;
                    let wt = &vw.data()[tap * cin * cout..(tap + 1) * cin * cout];
                    if let Some(gx) = gx.as_mut() {
                        let mut gs = vec![0.0; vx.len()];
                        gemm(rows, cout, cin, g.data(), false, wt, true, &mut gs, false);
                        // undo the shift: input step t - shift receives output step t
                        let seq = len * cin;
                        if shift < len {
                            for (dst, src) in gx
                                .data_mut()
                                .chunks_exact_mut(seq)
                                .zip(gs.chunks_exact(seq))
                            {
                                for (d, s) in dst[..(len - shift) * cin]
                                    .iter_mut()
                                    .zip(&src[shift * cin..])
                                {
                                    *d += s;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xs = shift_sequences(vx.data(), len, cin, shift);
                        gemm(
                            cin,
                            rows,
                            cout,
                            &xs,
                            true,
                            g.data(),
                            false,
                            &mut gw.data_mut()[tap * cin * cout..(tap + 1) * cin * cout],
                            false,
                        );
                    }
                }
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
            }
            Op::Propagate { adj, x } => {
                let vx = val(*x);
                let (nr, nc) = (adj.shape()[0], adj.shape()[1]);
                let batch = vx.shape()[0];
                let feat: usize = vx.shape()[2..].iter().product();
                let mut gx = Tensor::zeros(vx.shape());
                for b in 0..batch {
                    gemm(
                        nc,
                        nr,
                        feat,
                        adj.data(),
                        true,
                        &g.data()[b * nr * feat..(b + 1) * nr * feat],
                        false,
                        &mut gx.data_mut()[b * nc * feat..(b + 1) * nc * feat],
                        false,
                    );
                }
                out.push((*x, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_at_axis(y.shape(), *axis);
                let total = y.shape()[*axis] * inner;
                let mut start = 0;
                for p in parts {
                    let vp = val(*p);
                    let chunk = vp.shape()[*axis] * inner;
                    if want(*p) {
                        let mut data = Vec::with_capacity(vp.len());
                        for o in 0..outer {
                            let base = o * total + start;
                            data.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        out.push((*p, Tensor::from_vec(vp.shape(), data)?));
                    }
                    start += chunk;
                }
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshaped(val(*x).shape())?)),
            Op::BroadcastTo(x) => {
                let vx = val(*x);
                let offsets = broadcast_offsets(vx.shape(), y.shape());
                let mut gx = Tensor::zeros(vx.shape());
                for (o, gg) in offsets.iter().zip(g.data()) {
                    gx.data_mut()[*o] += gg;
                }
                out.push((*x, gx));
            }
            Op::Select { x, axis, index } => {
                let vx = val(*x);
                let (outer, n, inner) = split_at_axis(vx.shape(), *axis);
                let mut gx = Tensor::zeros(vx.shape());
                for o in 0..outer {
                    let base = (o * n + index) * inner;
                    gx.data_mut()[base..base + inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                out.push((*x, gx));
            }
            Op::MeanAxis { x, axis } => {
                let vx = val(*x);
                let (outer, n, inner) = split_at_axis(vx.shape(), *axis);
                let mut gx = Tensor::zeros(vx.shape());
                let scale = 1.0 / n as f64;
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for (d, s) in gx.data_mut()[base..base + inner].iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm { x, inv_std } => {
                let (_, cols) = y.rows_cols();
                let c = cols.max(1);
                let mut gx = Tensor::zeros(y.shape());
                for (((o, xh), gg), inv) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .zip(inv_std)
                {
                    let mg = gg.iter().sum::<f64>() / c as f64;
                    let mgx = gg.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, xh), gg) in o.iter_mut().zip(xh).zip(gg) {
                        *o = inv * (gg - mg - xh * mgx);
                    }
                }
                out.push((*x, gx));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                out.push((*x, Tensor::from_vec(g.shape(), data)?));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g.data()[0] / va.len() as f64;
                let diff: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| c * (x - y))
                    .collect();
                if want(*b) {
                    out.push((
                        *b,
                        Tensor::from_vec(vb.shape(), diff.iter().map(|d| -d).collect())?,
                    ));
                }
                if want(*a) {
                    out.push((*a, Tensor::from_vec(va.shape(), diff)?));
                }
            }
            Op::GradReverse { x, lambda } => out.push((*x, g.map(|v| -lambda * v))),
        }
        Ok(out)
    }

    /// Gradients of every parameter bound on this tape after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut v: Vec<_> = self
            .bound_params
            .iter()
            .filter_map(|(id, var)| self.nodes[var.0].grad.as_ref().map(|g| (*id, g)))
            .collect();
        v.sort_by_key(|(id, _)| *id);
        v
    }

    /// Adds this tape's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.add_assign(g);
        }
    }
}

/// Sums `g` over leading axes so that it matches the suffix shape `target`.
fn reduce_suffix(g: &Tensor, target: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(target);
    let bl = out.len().max(1);
    for chunk in g.data().chunks(bl) {
        for (o, v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), Some(0.5));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn abs_gradient_sign_convention() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
        let a = tape.abs(x);
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn shared_value_accumulates_both_branches() {
        // f = x*x + 3x, df/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let s = tape.add(sq, lin).unwrap();
        let f = tape.sum(s);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn causal_conv_matches_hand_convolution() {
        // one channel, kernel 2: y[t] = w0 * x[t-1] + w1 * x[t]
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 4.0]));
        let w = tape.constant(t(&[2, 1, 1], &[10.0, 1.0]));
        let y = tape.causal_conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 12.0, 24.0]);
    }

    #[test]
    fn gradient_reversal_forward_identity_backward_negated() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        let r = tape.gradient_reversal(x, 1.0).unwrap();
        assert_eq!(tape.value(r).data(), &[1.5, -2.0]);
        let w = tape.constant(t(&[2], &[3.0, -7.0]));
        let p = tape.mul(r, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[-3.0, 7.0]);
        assert!(tape.gradient_reversal(x, -1.0).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let base = Tensor::filled(&[64], 1.0);
        let mut eval = Tape::new();
        let x = eval.constant(base.clone());
        assert_eq!(eval.dropout(x, 0.3, "a").unwrap(), x);

        let run = |seed: u64, site: &str| {
            let mut tape = Tape::training(seed);
            let x = tape.constant(base.clone());
            let y = tape.dropout(x, 0.3, site).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(7, "a"), run(7, "a"));
        assert_ne!(run(7, "a"), run(7, "b"));
        assert!(run(7, "a")
            .data()
            .iter()
            .all(|v| *v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(DiffError::Contract(_))));
    }

    #[test]
    fn broadcast_and_select_shapes() {
        let mut tape = Tape::new();
        let m = tape.leaf(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let b = tape.broadcast_to(m, &[1, 2, 3, 2]).unwrap();
        assert_eq!(
            tape.value(b).data(),
            &[1., 1., 1., 1., 1., 1., 2., 2., 2., 2., 2., 2.]
        );
        let s = tape.select(b, 2, 1).unwrap();
        assert_eq!(tape.shape(s), &[1, 2, 2]);
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[2.0, 2.0]);
    }
}
