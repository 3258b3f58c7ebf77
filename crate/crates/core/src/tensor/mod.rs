//! A small define-by-run reverse-mode autodiff engine over dense f32 tensors.
//!
//! A [`Graph`] records every operation as it runs; [`Graph::backward`] walks
//! the tape once in reverse and returns a separate [`Grads`] table, so a
//! single forward pass may be differentiated from several roots.

pub mod check;
pub mod checkpoint;
pub mod kernels;
pub mod nn;
pub mod optim;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use kernels::{col2im, gemm, im2col, ConvGeom, Layout};

pub use nn::{ParamId, ParamStore};

/// Dense row-major f32 array with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// L2 norm accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    StraightThrough(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, cout: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, cin: usize },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    LogClamped { x: Var, lo: f32, hi: f32 },
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    L1(Var, Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Unrounded value of scalar reductions.
    precise: Option<f64>,
}

/// Operation tape. Values are computed eagerly as ops are recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(u64, ParamId, Var)>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Offset into a (broadcast) input for every element of `out`.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let lead = rank - inp.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        in_strides[lead + i] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    strided_offsets(out, &in_strides)
}

fn strided_offsets(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel(out);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offs
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: f64, op: Op, requires_grad: bool) -> Var {
        let var = self.push(Tensor::scalar(v as f32), op, requires_grad);
        self.nodes[var.0].precise = Some(v);
        var
    }

    /// Value of a one-element node, in f64 when a reduction produced it.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].precise.unwrap_or(self.nodes[v.0].value.data[0] as f64)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value.data
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a stored parameter on the tape; frozen parameters act as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.clone(), Op::Leaf, store.is_trainable(id));
        self.params.push((store.tag(), id, v));
        v
    }

    /// Takes the value of `target` but routes the incoming gradient to `x`
    /// unchanged (straight-through estimator); `target` gets nothing.
    pub fn straight_through(&mut self, x: Var, target: Var) -> Result<Var> {
        self.same_shape(x, target, "straight_through")?;
        let t = self.value(target).clone();
        let rg = self.rg(x);
        Ok(self.push(t, Op::StraightThrough(x), rg))
    }

    /// Identity in the forward pass, blocks every gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
            return Ok((Tensor { shape: sa.to_vec(), data }, self.rg(a) || self.rg(b)));
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| shape_err(name, sa, sb))?;
        let oa = broadcast_offsets(&out, sa);
        let ob = broadcast_offsets(&out, sb);
        let (da, db) = (self.data(a), self.data(b));
        let data = oa.iter().zip(&ob).map(|(i, j)| f(da[*i], db[*j])).collect();
        Ok((Tensor { shape: out, data }, self.rg(a) || self.rg(b)))
    }

    /// Carries the f64 value through arithmetic on one-element operands.
    fn keep_precise(&mut self, out: Var, f: impl Fn(&Graph) -> f64) -> Var {
        if self.nodes[out.0].value.len() == 1 {
            let v = f(self);
            self.nodes[out.0].precise = Some(v);
        }
        out
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        let out = self.push(t, Op::Add(a, b), rg);
        Ok(self.keep_precise(out, |g| g.scalar(a) + g.scalar(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        let out = self.push(t, Op::Sub(a, b), rg);
        Ok(self.keep_precise(out, |g| g.scalar(a) - g.scalar(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        let out = self.push(t, Op::Mul(a, b), rg);
        Ok(self.keep_precise(out, |g| g.scalar(a) * g.scalar(b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = self.map(x, |v| v * c);
        let rg = self.rg(x);
        let out = self.push(t, Op::Scale(x, c), rg);
        self.keep_precise(out, |g| g.scalar(x) * c as f64)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let t = self.map(x, |v| v + c);
        let rg = self.rg(x);
        let out = self.push(t, Op::Offset(x), rg);
        self.keep_precise(out, |g| g.scalar(x) + c as f64)
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let v = self.value(x);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| f(*a)).collect(),
        }
    }

    /// `[.., m, k] x [.., k, n]`; the right operand may also be a shared `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != k2 || (!shared_rhs && batch_a != batch_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = numel(batch_a);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                let bo = if shared_rhs { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    Layout::row_major(k),
                    &db[bo..],
                    Layout::row_major(n),
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|a| *a >= s.len() || std::mem::replace(&mut seen[*a], true)) {
            return Err(Error::Shape(format!("permute: axes {axes:?} invalid for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|a| s[*a]).collect();
        let strides = row_major_strides(&s);
        let out_strides: Vec<usize> = axes.iter().map(|a| strides[*a]).collect();
        let offs = strided_offsets(&out_shape, &out_strides);
        let d = self.data(x);
        let data = offs.iter().map(|o| d[*o]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for x in xs {
                let len = self.shape(*x)[axis] * inner;
                data.extend_from_slice(&self.data(*x)[o * len..(o + 1) * len]);
            }
        }
        let rg = xs.iter().any(|x| self.rg(*x));
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("narrow {start}+{len} on axis {axis} of {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Narrow { x, axis, start }, rg))
    }

    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (batch, cout) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad).ok_or_else(|| shape_err("conv2d", &sx, &sw))?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.channels * geom.in_h * geom.in_w;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; batch * cout * cols];
        for i in 0..batch {
            im2col(&self.data(x)[i * in_len..(i + 1) * in_len], &geom, &mut col);
            gemm(
                cout,
                rows,
                cols,
                self.data(w),
                Layout::row_major(rows),
                &col,
                Layout::row_major(cols),
                &mut out[i * cout * cols..],
                false,
            );
            if let Some(b) = b {
                let bias = self.data(b);
                for (c, chunk) in out[i * cout * cols..(i + 1) * cout * cols].chunks_mut(cols).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![batch, cout, geom.out_h, geom.out_w],
                data: out,
            },
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            },
            rg,
        ))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`].
    ///
    /// `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`; output side `(H - 1) s - 2p + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        let (batch, cin, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
        let oh = ((sx[2] - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((sx[3] - 1) * stride + k).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(shape_err("conv_transpose2d", &sx, &sw)),
        };
        // the forward conv geometry that maps the output back onto the input
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad).ok_or_else(|| shape_err("conv_transpose2d", &sx, &sw))?;
        if geom.out_h != sx[2] || geom.out_w != sx[3] {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2d bias", self.shape(b), &[cout]));
            }
        }
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let out_len = cout * oh * ow;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; batch * out_len];
        for i in 0..batch {
            // col = W^T [Cout k k, Cin] * x_i [Cin, H W]
            gemm(
                rows,
                cin,
                cols,
                self.data(w),
                Layout::transposed(rows),
                &self.data(x)[i * cin * cols..],
                Layout::row_major(cols),
                &mut col,
                false,
            );
            col2im(&col, &geom, &mut out[i * out_len..(i + 1) * out_len]);
            if let Some(b) = b {
                let bias = self.data(b);
                for (c, chunk) in out[i * out_len..(i + 1) * out_len].chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![batch, cout, oh, ow],
                data: out,
            },
            Op::ConvT2d {
                x,
                w,
                b,
                geom,
                batch,
                cin,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let t = self.map(x, f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    /// `ln(clamp(x, lo, hi))`; no gradient where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, Op::LogClamped { x, lo, hi }, |v| v.clamp(lo, hi).ln())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: s, data }, Op::Softmax(x), rg))
    }

    /// Normalises the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &s, self.shape(gamma)));
        }
        let rows = numel(&s) / d.max(1);
        let mut xhat = vec![0.0f32; rows * d];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * d];
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape: s, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of `table: [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Index { index: i, size: v });
            }
            data.extend_from_slice(&self.data(table)[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| *v as f64).sum::<f64>();
        let rg = self.rg(x);
        self.push_scalar(s, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().map(|v| *v as f64).sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(x);
        self.push_scalar(s, Op::Mean(x), rg)
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| Error::Shape("mean_last of a scalar".into()))?;
        let data = self
            .data(x)
            .chunks(n)
            .map(|c| (c.iter().map(|v| *v as f64).sum::<f64>() / n as f64) as f32)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: s[..s.len() - 1].to_vec(),
                data,
            },
            Op::MeanLast(x),
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `mean |a - b|`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_loss")?;
        let (da, db) = (self.data(a), self.data(b));
        let s = da.iter().zip(db).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / da.len().max(1) as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_scalar(s, Op::L1(a, b), rg))
    }

    /// `mean (a - b)^2`.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let (da, db) = (self.data(a), self.data(b));
        let s = da.iter().zip(db).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / da.len().max(1) as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_scalar(s, Op::Mse(a, b), rg))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`, `logits: [R, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let v = s[1];
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::Index { index: t, size: v });
            }
            let mx = row.iter().fold(f32::NEG_INFINITY, |m, x| m.max(*x));
            let lse = mx as f64 + row.iter().map(|x| ((*x - mx) as f64).exp()).sum::<f64>().ln();
            total += lse - row[t] as f64;
            for x in row.iter_mut() {
                *x = ((*x as f64) - lse).exp() as f32;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push_scalar(
            total / targets.len() as f64,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut g: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backward_node(node, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Grads { grads: g })
    }

    fn backward_node(&self, node: &Node, gout: &[f32], g: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = g[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let out_shape = &node.value.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0f32), (*b, sign)] {
                    let sh = &nodes[v.0].value.shape;
                    if sh == out_shape {
                        acc(v, &mut |buf| buf.iter_mut().zip(gout).for_each(|(d, x)| *d += s * x));
                    } else {
                        let offs = broadcast_offsets(out_shape, sh);
                        acc(v, &mut |buf| offs.iter().zip(gout).for_each(|(o, x)| buf[*o] += s * x));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let sh = &nodes[v.0].value.shape;
                    let osh = &nodes[other.0].value.shape;
                    let od = &nodes[other.0].value.data;
                    let oo = if osh == out_shape { None } else { Some(broadcast_offsets(out_shape, osh)) };
                    let at = |i: usize| match &oo {
                        Some(o) => od[o[i]],
                        None => od[i],
                    };
                    if sh == out_shape {
                        acc(v, &mut |buf| {
                            for (i, x) in gout.iter().enumerate() {
                                buf[i] += x * at(i);
                            }
                        });
                    } else {
                        let offs = broadcast_offsets(out_shape, sh);
                        acc(v, &mut |buf| {
                            for (i, x) in gout.iter().enumerate() {
                                buf[offs[i]] += x * at(i);
                            }
                        });
                    }
                }
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| buf.iter_mut().zip(gout).for_each(|(d, v)| *d += c * v)),
            Op::Offset(x) | Op::Reshape(x) | Op::StraightThrough(x) => acc(*x, &mut |buf| buf.iter_mut().zip(gout).for_each(|(d, v)| *d += v)),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |buf| {
                    for i in 0..*batch {
                        let bo = if *shared_rhs { 0 } else { i * k * n };
                        // dA = dC B^T
                        gemm(
                            m,
                            n,
                            k,
                            &gout[i * m * n..],
                            Layout::row_major(n),
                            &db[bo..],
                            Layout::transposed(n),
                            &mut buf[i * m * k..],
                            true,
                        );
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..*batch {
                        let bo = if *shared_rhs { 0 } else { i * k * n };
                        // dB = A^T dC
                        gemm(
                            k,
                            m,
                            n,
                            &da[i * m * k..],
                            Layout::transposed(k),
                            &gout[i * m * n..],
                            Layout::row_major(n),
                            &mut buf[bo..],
                            true,
                        );
                    }
                });
            }
            Op::Permute(x, axes) => {
                let s = &nodes[x.0].value.shape;
                let strides = row_major_strides(s);
                let out_strides: Vec<usize> = axes.iter().map(|a| strides[*a]).collect();
                let offs = strided_offsets(out_shape, &out_strides);
                acc(*x, &mut |buf| offs.iter().zip(gout).for_each(|(o, v)| buf[*o] += v));
            }
            Op::Concat(xs, axis) => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for x in xs {
                    let len = nodes[x.0].value.shape[*axis] * inner;
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            let src = &gout[o * total + off..o * total + off + len];
                            buf[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                    off += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = &nodes[x.0].value.shape;
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = out_shape[*axis];
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        buf[base..base + len * inner].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.in_h * geom.in_w;
                let (dx, dw) = (&nodes[x.0].value.data, &nodes[w.0].value.data);
                let mut col = vec![0.0; rows * cols];
                if nodes[w.0].requires_grad {
                    acc(*w, &mut |buf| {
                        for i in 0..*batch {
                            im2col(&dx[i * in_len..(i + 1) * in_len], geom, &mut col);
                            gemm(
                                *cout,
                                cols,
                                rows,
                                &gout[i * cout * cols..],
                                Layout::row_major(cols),
                                &col,
                                Layout::transposed(cols),
                                buf,
                                true,
                            );
                        }
                    });
                }
                acc(*x, &mut |buf| {
                    for i in 0..*batch {
                        gemm(
                            rows,
                            *cout,
                            cols,
                            dw,
                            Layout::transposed(rows),
                            &gout[i * cout * cols..],
                            Layout::row_major(cols),
                            &mut col,
                            false,
                        );
                        col2im(&col, geom, &mut buf[i * in_len..(i + 1) * in_len]);
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for i in 0..*batch {
                            for (c, chunk) in gout[i * cout * cols..(i + 1) * cout * cols].chunks(cols).enumerate() {
                                buf[c] += chunk.iter().map(|v| *v as f64).sum::<f64>() as f32;
                            }
                        }
                    });
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                geom,
                batch,
                cin,
            } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let out_len = geom.channels * geom.in_h * geom.in_w;
                let (dx, dw) = (&nodes[x.0].value.data, &nodes[w.0].value.data);
                let mut col = vec![0.0; rows * cols];
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let mut gx = if need_x { vec![0.0; batch * cin * cols] } else { vec![] };
                let mut gw = if need_w { vec![0.0; cin * rows] } else { vec![] };
                for i in 0..*batch {
                    im2col(&gout[i * out_len..(i + 1) * out_len], geom, &mut col);
                    if need_x {
                        // dx_i = W [Cin, Cout k k] * col
                        gemm(
                            *cin,
                            rows,
                            cols,
                            dw,
                            Layout::row_major(rows),
                            &col,
                            Layout::row_major(cols),
                            &mut gx[i * cin * cols..],
                            false,
                        );
                    }
                    if need_w {
                        // dW += x_i [Cin, H W] * col^T
                        gemm(
                            *cin,
                            cols,
                            rows,
                            &dx[i * cin * cols..],
                            Layout::row_major(cols),
                            &col,
                            Layout::transposed(cols),
                            &mut gw,
                            true,
                        );
                    }
                }
                if need_x {
                    acc(*x, &mut |buf| buf.iter_mut().zip(&gx).for_each(|(d, v)| *d += v));
                }
                if need_w {
                    acc(*w, &mut |buf| buf.iter_mut().zip(&gw).for_each(|(d, v)| *d += v));
                }
                if let Some(b) = b {
                    let plane = geom.in_h * geom.in_w;
                    acc(*b, &mut |buf| {
                        for i in 0..*batch {
                            for (c, chunk) in gout[i * out_len..(i + 1) * out_len].chunks(plane).enumerate() {
                                buf[c] += chunk.iter().map(|v| *v as f64).sum::<f64>() as f32;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = &nodes[x.0].value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        if xd[i] > 0.0 {
                            buf[i] += gout[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, s) => {
                let xd = &nodes[x.0].value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += if xd[i] > 0.0 { gout[i] } else { s * gout[i] };
                    }
                });
            }
            Op::Silu(x) => {
                let xd = &nodes[x.0].value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        let s = sigmoid(xd[i]);
                        buf[i] += gout[i] * s * (1.0 + xd[i] * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * y[i];
                    }
                });
            }
            Op::LogClamped { x, lo, hi } => {
                let xd = &nodes[x.0].value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        if xd[i] > *lo && xd[i] < *hi {
                            buf[i] += gout[i] / xd[i];
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let xd = &nodes[x.0].value.data;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * sign(xd[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let n = *out_shape.last().unwrap();
                acc(*x, &mut |buf| {
                    for ((yr, gr), br) in y.chunks(n).zip(gout.chunks(n)).zip(buf.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for j in 0..n {
                            br[j] += yr[j] * (gr[j] - dot as f32);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let gm = &nodes[gamma.0].value.data;
                acc(*x, &mut |buf| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let (gr, hr) = (&gout[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            let dh = (gr[j] * gm[j]) as f64;
                            m1 += dh;
                            m2 += dh * hr[j] as f64;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = (gr[j] * gm[j]) as f64;
                            buf[r * d + j] += (*rs as f64 * (dh - m1 - hr[j] as f64 * m2)) as f32;
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for (i, v) in gout.iter().enumerate() {
                        buf[i % d] += v * xhat[i];
                    }
                });
                acc(*beta, &mut |buf| {
                    for (i, v) in gout.iter().enumerate() {
                        buf[i % d] += v;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out_shape[1];
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        buf[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += gout[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len().max(1) as f32;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += gout[0] / n));
            }
            Op::MeanLast(x) => {
                let n = *nodes[x.0].value.shape.last().unwrap();
                acc(*x, &mut |buf| {
                    for (i, d) in buf.iter_mut().enumerate() {
                        *d += gout[i / n] / n as f32;
                    }
                });
            }
            Op::L1(a, b) | Op::Mse(a, b) => {
                let l1 = matches!(node.op, Op::L1(..));
                let (da, db) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                let n = da.len().max(1) as f32;
                let grad = |i: usize| {
                    let diff = da[i] - db[i];
                    gout[0] * if l1 { sign(diff) } else { 2.0 * diff } / n
                };
                acc(*a, &mut |buf| (0..buf.len()).for_each(|i| buf[i] += grad(i)));
                acc(*b, &mut |buf| (0..buf.len()).for_each(|i| buf[i] -= grad(i)));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = nodes[logits.0].value.shape[1];
                let scale = gout[0] / targets.len() as f32;
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let y = if j == t { 1.0 } else { 0.0 };
                            buf[r * v + j] += scale * (probs[r * v + j] - y);
                        }
                    }
                });
            }
        }
    }

    /// Parameter nodes placed on this tape, in order.
    pub fn param_vars(&self, store: &ParamStore) -> Vec<(ParamId, Var)> {
        let tag = store.tag();
        self.params.iter().filter(|p| p.0 == tag).map(|p| (p.1, p.2)).collect()
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let mx = row.iter().fold(f32::NEG_INFINITY, |m, x| m.max(*x));
    let mut s = 0.0f64;
    for x in row.iter_mut() {
        let e = ((*x - mx) as f64).exp();
        s += e;
        *x = e as f32;
    }
    for x in row.iter_mut() {
        *x = (*x as f64 / s) as f32;
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with zeros where nothing reached it.
    pub fn dense(&self, graph: &Graph, v: Var) -> Vec<f32> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Per-parameter gradients summed over every use on the tape.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Vec<f32>>> {
        let mut out: Vec<Option<Vec<f32>>> = vec![None; store.len()];
        for (id, v) in graph.param_vars(store) {
            if let Some(g) = self.get(v) {
                let slot = out[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
