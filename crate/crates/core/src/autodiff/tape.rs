//! Reverse-mode tape over coarse tensor operations.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the recorded nodes from the loss towards the leaves, each node
//! exactly once, and accumulates adjoints only along paths that reach a
//! node created with `requires_grad`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::kernels::{col2im, gemm, im2col};
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Images processed per parallel work unit in the convolution kernels.
/// Fixed so the reduction order of weight gradients never depends on the
/// thread count.
const CONV_CHUNK: usize = 4;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    SelectNode { x: Var, nodes: usize, node: usize },
    Propagate { x: Var, adj: Arc<[f64]>, nodes: usize },
    NodeMean { x: Var, nodes: usize },
    Conv2d { input: Var, kernel: Var, bias: Var },
    MaxPool2x2 { input: Var, argmax: Vec<u32> },
    GaussianLogProb { action: Vec<f64>, mean: Var, log_sigma: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Minimum(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddScalar(a) | Relu(a) | Tanh(a) | Exp(a) | Square(a)
            | Clamp(a, _, _) | Sum(a) | Mean(a) | Reshape(a) | RepeatRows(a, _) => vec![*a],
            ConcatCols(v) => v.clone(),
            SelectNode { x, .. } | Propagate { x, .. } | NodeMean { x, .. } => vec![*x],
            Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            MaxPool2x2 { input, .. } => vec![*input],
            GaussianLogProb {
                mean, log_sigma, ..
            } => vec![*mean, *log_sigma],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Record of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaf nodes after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaf_grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Indices of the operation nodes processed, in processing order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// Split an image tensor into (batch, channels, height, width).
fn image_dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => dim_err(format!("expected C×H×W or B×C×H×W, got {:?}", t.shape())),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Free leaf that receives a gradient (not tied to a parameter store).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Leaf holding a copy of a stored parameter; `backward_into` routes its
    /// gradient back to the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!("matmul inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// Add a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).numel() != n {
            return dim_err(format!(
                "bias of length {} for {n} columns",
                self.value(bias).numel()
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.value(a).shape(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        Tensor::new(t.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "minimum", f64::min)?;
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.unary(a, |x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => a,
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract_err("concat of nothing");
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return dim_err(format!("concat rows {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// `B × d` → `(B·n) × d`, each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (rows, d) = self.value(a).dims2()?;
        let mut out = Vec::with_capacity(rows * n * d);
        for r in 0..rows {
            let row = &self.value(a).data()[r * d..(r + 1) * d];
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(Tensor::new(&[rows * n, d], out)?, Op::RepeatRows(a, n)))
    }

    /// Rows `b·nodes + node` of a stacked `(B·nodes) × h` node matrix.
    pub fn select_node(&mut self, x: Var, nodes: usize, node: usize) -> Result<Var> {
        let (rows, h) = self.value(x).dims2()?;
        if nodes == 0 || rows % nodes != 0 || node >= nodes {
            return dim_err(format!("select node {node} of {nodes} from {rows} rows"));
        }
        let batch = rows / nodes;
        let mut out = Vec::with_capacity(batch * h);
        for b in 0..batch {
            out.extend_from_slice(self.value(x).row(b * nodes + node));
        }
        Ok(self.push(Tensor::new(&[batch, h], out)?, Op::SelectNode { x, nodes, node }))
    }

    /// Apply an `n × n` propagation matrix to every `n`-row block of a stacked
    /// node matrix: `out[b·n+i] = Σ_j adj[i][j] · x[b·n+j]`.
    pub fn propagate(&mut self, x: Var, adj: Arc<[f64]>, nodes: usize) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if nodes == 0 || adj.len() != nodes * nodes || rows % nodes != 0 {
            return dim_err(format!(
                "propagation over {nodes} nodes cannot apply to {rows} rows"
            ));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        for b in 0..rows / nodes {
            let base = b * nodes;
            for i in 0..nodes {
                let dst = &mut out[(base + i) * d..(base + i + 1) * d];
                for j in 0..nodes {
                    let w = adj[i * nodes + j];
                    if w != 0.0 {
                        let src = &xs[(base + j) * d..(base + j + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(&[rows, d], out)?, Op::Propagate { x, adj, nodes }))
    }

    /// Mean over each block of `nodes` consecutive rows: `(B·n) × h` → `B × h`.
    pub fn node_mean(&mut self, x: Var, nodes: usize) -> Result<Var> {
        let (rows, h) = self.value(x).dims2()?;
        if nodes == 0 || rows % nodes != 0 {
            return dim_err(format!("mean over {nodes} nodes of {rows} rows"));
        }
        let xs = self.value(x).data();
        let inv = 1.0 / nodes as f64;
        let mut out = vec![0.0; rows / nodes * h];
        for (b, dst) in out.chunks_mut(h).enumerate() {
            for i in 0..nodes {
                for (o, s) in dst.iter_mut().zip(&xs[(b * nodes + i) * h..][..h]) {
                    *o += s;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        Ok(self.push(Tensor::new(&[rows / nodes, h], out)?, Op::NodeMean { x, nodes }))
    }

    /// Valid cross-correlation with stride 1 and no padding.
    ///
    /// `input` is `C_in × H × W` or `B × C_in × H × W`; `kernel` is
    /// `C_out × C_in × k × k`; `bias` has `C_out` entries.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (batch, c_in, h, w) = image_dims(self.value(input))?;
        let (c_out, k) = match *self.value(kernel).shape() {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            ref s => {
                return dim_err(format!("kernel {s:?} does not fit {c_in} input channels"))
            }
        };
        if h < k || w < k {
            return dim_err(format!("spatial extent {h}×{w} smaller than kernel {k}×{k}"));
        }
        if self.value(bias).numel() != c_out {
            return dim_err(format!("bias length {} for {c_out} filters", self.value(bias).numel()));
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let in_img = c_in * h * w;
        let out_img = c_out * ho * wo;
        let patch = c_in * k * k;
        let xs = self.value(input).data();
        let ks = self.value(kernel).data();
        let bs = self.value(bias).data();
        let mut out = vec![0.0; batch * out_img];
        out.par_chunks_mut(CONV_CHUNK * out_img)
            .zip(xs.par_chunks(CONV_CHUNK * in_img))
            .for_each(|(dst, src)| {
                let mut cols = vec![0.0; patch * ho * wo];
                for (o, x) in dst.chunks_mut(out_img).zip(src.chunks(in_img)) {
                    im2col(x, c_in, h, w, k, &mut cols);
                    gemm(c_out, patch, ho * wo, ks, false, &cols, false, o, false);
                    for (plane, b) in o.chunks_mut(ho * wo).zip(bs) {
                        for v in plane {
                            *v += b;
                        }
                    }
                }
            });
        let shape: Vec<usize> = if self.value(input).rank() == 3 {
            vec![c_out, ho, wo]
        } else {
            vec![batch, c_out, ho, wo]
        };
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { input, kernel, bias }))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first cell in
    /// row-major window order.
    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let (batch, c, h, w) = image_dims(self.value(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("max pool needs even extents, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.value(input).data();
        let mut out = Vec::with_capacity(batch * c * ho * wo);
        let mut argmax = Vec::with_capacity(batch * c * ho * wo);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = base + 2 * y * w + 2 * x;
                    for cand in [
                        base + 2 * y * w + 2 * x + 1,
                        base + (2 * y + 1) * w + 2 * x,
                        base + (2 * y + 1) * w + 2 * x + 1,
                    ] {
                        if xs[cand] > xs[best] {
                            best = cand;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let shape: Vec<usize> = if self.value(input).rank() == 3 {
            vec![c, ho, wo]
        } else {
            vec![batch, c, ho, wo]
        };
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2x2 { input, argmax }))
    }

    /// Per-row log density of a diagonal Gaussian with one shared scale:
    /// `Σ_i log N(a_i | μ_i, σ²)` with `σ = exp(log_sigma)`.
    ///
    /// `mean` is `B × n` (or a length-`n` vector, treated as one row);
    /// the output has `B` entries.
    pub fn gaussian_log_prob(&mut self, action: &[f64], mean: Var, log_sigma: Var) -> Result<Var> {
        let mt = self.value(mean);
        let (rows, n) = match *mt.shape() {
            [n] => (1, n),
            [b, n] => (b, n),
            ref s => return dim_err(format!("mean must be a vector or matrix, got {s:?}")),
        };
        if action.len() != rows * n {
            return dim_err(format!("{} actions for {}×{} means", action.len(), rows, n));
        }
        if self.value(log_sigma).numel() != 1 {
            return dim_err("log sigma must be a scalar");
        }
        let ls = self.value(log_sigma).item();
        let out: Vec<f64> = (0..rows)
            .map(|r| gaussian_log_density(&action[r * n..(r + 1) * n], mt.row(r), ls))
            .collect();
        Ok(self.push(
            Tensor::new(&[rows], out)?,
            Op::GaussianLogProb {
                action: action.to_vec(),
                mean,
                log_sigma,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`. Adjoints are kept only for
    /// leaf nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            self.backprop(idx, &g, &mut grads);
        }
        Ok(Gradients {
            leaf_grads: grads,
            visited,
        })
    }

    /// Backward pass that adds parameter adjoints into the store's gradient
    /// slots. Repeated calls accumulate until `zero_grad`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.leaf_grads[idx].as_ref()) {
                let slot = store.get_mut(id).grad.data_mut();
                if slot.len() != g.len() {
                    return dim_err(format!("gradient size mismatch for parameter {id:?}"));
                }
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv, true, da, true));
                acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, db, true));
            }
            Op::AddBias(x, b) => {
                let n = out.shape()[1];
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*b, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| zip3(d, g, bv, |g, y| g * y));
                acc(*b, &mut |d| zip3(d, g, av, |g, x| g * x));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] <= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |d| zip3(d, g, xv, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(a) => acc(*a, &mut |d| zip3(d, g, out.data(), |g, y| g * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, &mut |d| zip3(d, g, out.data(), |g, y| g * y)),
            Op::Square(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |d| zip3(d, g, xv, |g, x| 2.0 * g * x));
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |d| {
                    zip3(d, g, xv, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 })
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / self.value(*a).numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += scale));
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    acc(p, &mut |d| {
                        for (r, drow) in d.chunks_mut(w).enumerate() {
                            add_into(drow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::RepeatRows(a, n) => {
                let d_width = out.shape()[1];
                acc(*a, &mut |d| {
                    for (r, drow) in d.chunks_mut(d_width).enumerate() {
                        for rep in 0..*n {
                            add_into(drow, &g[(r * n + rep) * d_width..][..d_width]);
                        }
                    }
                });
            }
            Op::SelectNode { x, nodes, node } => {
                let h = out.shape()[1];
                acc(*x, &mut |d| {
                    for (b, grow) in g.chunks(h).enumerate() {
                        add_into(&mut d[(b * nodes + node) * h..][..h], grow);
                    }
                });
            }
            Op::Propagate { x, adj, nodes } => {
                let d_width = out.shape()[1];
                let rows = out.shape()[0];
                acc(*x, &mut |dx| {
                    for b in 0..rows / nodes {
                        let base = b * nodes;
                        for i in 0..*nodes {
                            let grow = &g[(base + i) * d_width..][..d_width];
                            for j in 0..*nodes {
                                let w = adj[i * nodes + j];
                                if w != 0.0 {
                                    let dst = &mut dx[(base + j) * d_width..][..d_width];
                                    for (o, s) in dst.iter_mut().zip(grow) {
                                        *o += w * s;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::NodeMean { x, nodes } => {
                let h = out.shape()[1];
                let inv = 1.0 / *nodes as f64;
                acc(*x, &mut |dx| {
                    for (r, drow) in dx.chunks_mut(h).enumerate() {
                        let grow = &g[(r / nodes) * h..][..h];
                        for (d, s) in drow.iter_mut().zip(grow) {
                            *d += inv * s;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => self.conv2d_backward(*input, *kernel, *bias, g, grads),
            Op::MaxPool2x2 { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (&src, gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                });
            }
            Op::GaussianLogProb {
                action,
                mean,
                log_sigma,
            } => {
                let mt = self.value(*mean);
                let n = *mt.shape().last().unwrap();
                let ls = self.value(*log_sigma).item();
                let inv_var = (-2.0 * ls).exp();
                let mu = mt.data();
                acc(*mean, &mut |dm| {
                    for i in 0..dm.len() {
                        dm[i] += g[i / n] * (action[i] - mu[i]) * inv_var;
                    }
                });
                acc(*log_sigma, &mut |ds| {
                    let mut total = 0.0;
                    for (r, gr) in g.iter().enumerate() {
                        let sq: f64 = (0..n)
                            .map(|j| (action[r * n + j] - mu[r * n + j]).powi(2))
                            .sum();
                        total += gr * (sq * inv_var - n as f64);
                    }
                    ds[0] += total;
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (batch, c_in, h, w) = image_dims(self.value(input)).unwrap();
        let ks = self.value(kernel).data();
        let c_out = self.value(kernel).shape()[0];
        let k = self.value(kernel).shape()[2];
        let (ho, wo) = (h - k + 1, w - k + 1);
        let (in_img, out_img, patch) = (c_in * h * w, c_out * ho * wo, c_in * k * k);
        let xs = self.value(input).data();
        let want_input = self.wants(input);
        let want_kernel = self.wants(kernel);

        // Per-chunk partial kernel/bias adjoints, reduced below in chunk order.
        let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = xs
            .par_chunks(CONV_CHUNK * in_img)
            .zip(g.par_chunks(CONV_CHUNK * out_img))
            .map(|(x_chunk, g_chunk)| {
                let mut dk = vec![0.0; if want_kernel { c_out * patch } else { 0 }];
                let mut db = vec![0.0; c_out];
                let mut dx = vec![0.0; if want_input { x_chunk.len() } else { 0 }];
                let mut cols = vec![0.0; patch * ho * wo];
                for (i, (x, go)) in x_chunk.chunks(in_img).zip(g_chunk.chunks(out_img)).enumerate() {
                    for (plane, b) in go.chunks(ho * wo).zip(db.iter_mut()) {
                        *b += plane.iter().sum::<f64>();
                    }
                    if want_kernel {
                        im2col(x, c_in, h, w, k, &mut cols);
                        gemm(c_out, ho * wo, patch, go, false, &cols, true, &mut dk, true);
                    }
                    if want_input {
                        gemm(patch, c_out, ho * wo, ks, true, go, false, &mut cols, false);
                        col2im(&cols, c_in, h, w, k, &mut dx[i * in_img..(i + 1) * in_img]);
                    }
                }
                (dk, db, dx)
            })
            .collect();

        if self.wants(bias) {
            let slot = grads[bias.0].get_or_insert_with(|| vec![0.0; c_out]);
            for (_, db, _) in &partials {
                add_into(slot, db);
            }
        }
        if want_kernel {
            let slot = grads[kernel.0].get_or_insert_with(|| vec![0.0; c_out * patch]);
            for (dk, _, _) in &partials {
                add_into(slot, dk);
            }
        }
        if want_input {
            let slot = grads[input.0].get_or_insert_with(|| vec![0.0; batch * in_img]);
            for (chunk, (_, _, dx)) in partials.iter().enumerate() {
                add_into(&mut slot[chunk * CONV_CHUNK * in_img..][..dx.len()], dx);
            }
        }
    }
}

/// `Σ_i log N(a_i | μ_i, exp(log_sigma)²)`.
pub fn gaussian_log_density(action: &[f64], mean: &[f64], log_sigma: f64) -> f64 {
    let inv_var = (-2.0 * log_sigma).exp();
    let n = action.len() as f64;
    let sq: f64 = action.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum();
    -0.5 * sq * inv_var - n * log_sigma - 0.5 * n * (2.0 * PI).ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip3(d: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for i in 0..d.len() {
        d[i] += f(g[i], x[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let w = tape.variable(t(&[3, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 1.5, -1.0, 2.0, 4.0]));
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).unwrap().iter().all(|&g| g == 1.0));

        let sq = tape.square(w);
        let norm = tape.sum(sq);
        let grads = tape.backward(norm).unwrap();
        let expect: Vec<f64> = tape.value(w).data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(grads.get(w).unwrap(), &expect[..]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::zeros(&[2]));
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_op_once_in_reverse() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[0.5, -0.3]));
        let a = tape.tanh(x);
        let b = tape.relu(x);
        let c = tape.add(a, b).unwrap();
        let d = tape.sum(c);
        let grads = tape.backward(d).unwrap();
        assert_eq!(grads.visit_order(), &[d.0, c.0, b.0, a.0]);
    }

    #[test]
    fn relu_and_tanh_values() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let th = tape.tanh(x);
        assert_eq!(tape.value(th).data()[2], 0.0);
        let s = tape.sum(r);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn pool_window_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1, 2, 2], &[1.0, 3.0, 2.0, 0.0]));
        let p = tape.max_pool2x2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_ties_take_first_cell() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::filled(&[1, 2, 2], 5.0));
        let p = tape.max_pool2x2(x).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(tape.max_pool2x2(x), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn conv_rejects_small_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 9]));
        let k = tape.constant(Tensor::zeros(&[2, 1, 5, 5]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.conv2d(x, k, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn zero_kernel_gives_bias_planes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 7, 6], 0.3));
        let k = tape.constant(Tensor::zeros(&[2, 1, 5, 5]));
        let b = tape.constant(t(&[2], &[0.25, -1.5]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 2]);
        let d = tape.value(y).data();
        assert!(d[..6].iter().all(|&v| v == 0.25));
        assert!(d[6..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn gaussian_log_prob_at_mean() {
        let mut tape = Tape::new();
        let mu = tape.variable(t(&[1], &[0.4]));
        let ls = tape.variable(Tensor::scalar(0.0));
        let lp = tape.gaussian_log_prob(&[0.4], mu, ls).unwrap();
        assert!((tape.value(lp).item() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);

        let mu3 = tape.variable(t(&[3], &[0.1, 0.2, 0.3]));
        let ls3 = tape.variable(Tensor::scalar(0.7));
        let lp3 = tape.gaussian_log_prob(&[0.1, 0.2, 0.3], mu3, ls3).unwrap();
        let expect = -3.0 * (0.7 + 0.5 * (2.0 * PI).ln());
        assert!((tape.value(lp3).item() - expect).abs() < 1e-14);
    }
}
