use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance epsilon for [`Primitive::LayerNorm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitive set.
///
/// Shapes: "rows" means the leading axis; row-wise ops act on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    /// `[n,m] + [m]`
    AddRow,
    /// `[n,m] * [m]`
    MulRow,
    /// `[n,m] * [n]` (row `i` scaled by `s[i]`)
    ScaleRows,
    Scale(f64),
    Transpose,
    Softmax,
    /// `(x, gamma, beta)`, normalizes over the last axis.
    LayerNorm,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    /// Selects rows along axis 0; indices may repeat.
    Gather { indices: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Sum,
    Mean,
    /// Frobenius norm of the whole tensor.
    L2Norm,
    /// Unit-normalizes each last-axis row.
    L2NormalizeRows,
    /// `(a [c,d], b [c,d]) -> [d,d]`, token-mean-centered, divisor `c-1`.
    Covariance,
    FrobeniusSq,
    Log,
    Exp,
    Gelu,
    Abs,
    /// Summed token cross-entropy of `logits [n,V]` against `targets`.
    CrossEntropy { targets: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddRow => "add_row",
            Primitive::MulRow => "mul_row",
            Primitive::ScaleRows => "scale_rows",
            Primitive::Scale(_) => "scale",
            Primitive::Transpose => "transpose",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Concat { .. } => "concat",
            Primitive::Narrow { .. } => "narrow",
            Primitive::Gather { .. } => "gather",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::L2Norm => "l2_norm",
            Primitive::L2NormalizeRows => "l2_normalize",
            Primitive::Covariance => "covariance",
            Primitive::FrobeniusSq => "frobenius_sq",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Gelu => "gelu",
            Primitive::Abs => "abs",
            Primitive::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Concat { .. } => None,
            Primitive::LayerNorm => Some(3),
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::AddRow
            | Primitive::MulRow
            | Primitive::ScaleRows
            | Primitive::Covariance => Some(2),
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Apply(Primitive),
}

/// Extra activations kept for backward beyond the node output.
#[derive(Debug)]
enum Saved<T> {
    None,
    /// Normalized input and per-row inverse std.
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    /// Per-row norms.
    Norms(Vec<T>),
    /// Row softmax probabilities.
    Probs(Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in creation order, which is a topological order;
/// backward walks them in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
    no_grad: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            no_grad: false,
        }
    }

    /// A graph whose parameters are bound as constants (inference only).
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn is_no_grad(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: Vec<usize>, requires_grad: bool, saved: Saved<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf; its gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, Vec::new(), requires_grad, Saved::None)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let t = store.get(id);
        let track = !self.no_grad;
        let v = self.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("param shape"), track);
        self.params.insert(id, v.0);
        v
    }

    /// Leaf bound to a parameter but detached from gradient tracking.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.constant(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("param shape"))
    }

    /// Applies `prim` to `inputs`, recording a node when any input requires grad.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} takes {} inputs, got {}",
                    prim.name(),
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::EmptyInput("concat inputs"));
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::Apply(prim), ids, requires_grad, saved))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let x = &self.nodes[inputs[0].0].value;
        let name = prim.name();
        let out = match prim {
            Primitive::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(shape_err(name, x.shape(), y.shape()));
                }
                let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                Tensor::new(vec![n, m], matmul(x.data(), y.data(), n, k, m))?
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape() != y.shape() {
                    return Err(shape_err(name, x.shape(), y.shape()));
                }
                let f: fn(T, T) -> T = match prim {
                    Primitive::Add => |a, b| a + b,
                    Primitive::Sub => |a, b| a - b,
                    Primitive::Mul => |a, b| a * b,
                    _ => |a, b| a / b,
                };
                let data = x.data().iter().zip(y.data()).map(|(a, b)| f(*a, *b)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Primitive::AddRow | Primitive::MulRow => {
                let b = &self.nodes[inputs[1].0].value;
                let m = x.last_dim();
                if b.len() != m {
                    return Err(shape_err(name, x.shape(), b.shape()));
                }
                let add = matches!(prim, Primitive::AddRow);
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if add { *v + b.data()[i % m] } else { *v * b.data()[i % m] })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Primitive::ScaleRows => {
                let s = &self.nodes[inputs[1].0].value;
                if s.len() != x.rows() {
                    return Err(shape_err(name, x.shape(), s.shape()));
                }
                let w = x.row_len();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| *v * s.data()[i / w.max(1)])
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Primitive::Scale(c) => {
                let c = T::lit(*c);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| *v * c).collect())?
            }
            Primitive::Transpose => {
                if x.rank() != 2 {
                    return Err(shape_err(name, x.shape(), &[]));
                }
                let (n, m) = (x.shape()[0], x.shape()[1]);
                Tensor::new(vec![m, n], transpose(x.data(), n, m))?
            }
            Primitive::Softmax => {
                let m = x.last_dim();
                if m == 0 {
                    return Err(shape_err(name, x.shape(), &[]));
                }
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(m) {
                    softmax_in_place(row);
                }
                Tensor::new(x.shape().to_vec(), out)?
            }
            Primitive::LayerNorm => {
                let g = &self.nodes[inputs[1].0].value;
                let b = &self.nodes[inputs[2].0].value;
                let m = x.last_dim();
                if g.len() != m || b.len() != m || m == 0 {
                    return Err(shape_err(name, x.shape(), g.shape()));
                }
                let eps = T::lit(LAYER_NORM_EPS);
                let mf = T::lit(m as f64);
                let mut xhat = Vec::with_capacity(x.len());
                let mut inv_std = Vec::with_capacity(x.len() / m);
                for row in x.data().chunks(m) {
                    let mean = row.iter().copied().sum::<T>() / mf;
                    let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
                    let r = T::one() / (var + eps).sqrt();
                    inv_std.push(r);
                    xhat.extend(row.iter().map(|v| (*v - mean) * r));
                }
                let data = xhat
                    .iter()
                    .enumerate()
                    .map(|(i, v)| *v * g.data()[i % m] + b.data()[i % m])
                    .collect();
                return Ok((
                    Tensor::new(x.shape().to_vec(), data)?,
                    Saved::LayerNorm { xhat, inv_std },
                ));
            }
            Primitive::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                concat(&parts, *axis)?
            }
            Primitive::Narrow { axis, start, len } => narrow(x, *axis, *start, *len)?,
            Primitive::Gather { indices } => {
                let rows = x.rows();
                let w = x.row_len();
                let mut data = Vec::with_capacity(indices.len() * w);
                for &i in indices {
                    if i >= rows {
                        return Err(shape_err(name, x.shape(), &[i]));
                    }
                    data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
                }
                let mut shape = x.shape().to_vec();
                if shape.is_empty() {
                    shape.push(indices.len());
                } else {
                    shape[0] = indices.len();
                }
                Tensor::new(shape, data)?
            }
            Primitive::Reshape { shape } => x.clone().reshape(shape.clone())?.with_requires_grad(false),
            Primitive::Sum => Tensor::scalar(x.data().iter().copied().sum()),
            Primitive::Mean => {
                if x.is_empty() {
                    return Err(Error::EmptyInput("mean"));
                }
                Tensor::scalar(x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64))
            }
            Primitive::L2Norm => Tensor::scalar(x.norm()),
            Primitive::L2NormalizeRows => {
                let m = x.last_dim();
                let mut norms = Vec::with_capacity(x.len() / m.max(1));
                let mut out = Vec::with_capacity(x.len());
                for row in x.data().chunks(m) {
                    let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    if n <= T::zero() || !n.is_finite() {
                        return Err(Error::DegenerateEmbedding);
                    }
                    norms.push(n);
                    out.extend(row.iter().map(|v| *v / n));
                }
                return Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Norms(norms)));
            }
            Primitive::Covariance => {
                let y = &self.nodes[inputs[1].0].value;
                if x.rank() != 2 || x.shape() != y.shape() {
                    return Err(shape_err(name, x.shape(), y.shape()));
                }
                let (c, d) = (x.shape()[0], x.shape()[1]);
                if c < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "covariance needs at least 2 tokens, got {c}"
                    )));
                }
                let a = center_rows(x.data(), c, d);
                let b = center_rows(y.data(), c, d);
                let scale = T::one() / T::lit((c - 1) as f64);
                let mut out = matmul_tn(&a, &b, c, d, d);
                out.iter_mut().for_each(|v| *v *= scale);
                Tensor::new(vec![d, d], out)?
            }
            Primitive::FrobeniusSq => Tensor::scalar(x.data().iter().map(|v| *v * *v).sum()),
            Primitive::Log => Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())?,
            Primitive::Exp => Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect())?,
            Primitive::Gelu => Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| gelu(*v)).collect())?,
            Primitive::Abs => Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect())?,
            Primitive::CrossEntropy { targets } => {
                let v = x.last_dim();
                let n = x.len() / v.max(1);
                if targets.len() != n || x.rank() != 2 {
                    return Err(shape_err(name, x.shape(), &[targets.len()]));
                }
                let mut probs = x.data().to_vec();
                let mut loss = T::zero();
                for (r, (row, &t)) in x.data().chunks(v).zip(targets).enumerate() {
                    if t >= v {
                        return Err(Error::InvalidArgument(format!("target {t} out of vocabulary {v}")));
                    }
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = row.iter().map(|z| (*z - max).exp()).sum::<T>().ln() + max;
                    loss += lse - row[t];
                    softmax_in_place(&mut probs[r * v..(r + 1) * v]);
                }
                return Ok((Tensor::scalar(loss), Saved::Probs(probs)));
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter and gradient-tracked leaf present in the graph gets an
    /// entry; those with no path to `loss` get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Op::Apply(prim) = &node.op else { continue };
            let Some(gy) = grads[idx].take() else { continue };
            let parent_grads = self.vjp(prim, node, &gy);
            for (&p, g) in node.inputs.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = Gradients::new();
        let param_nodes: HashMap<usize, ParamId> = self.params.iter().map(|(k, v)| (*v, *k)).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let data = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            let t = Tensor::new(node.value.shape().to_vec(), data)?;
            match param_nodes.get(&idx) {
                Some(id) => out.insert_param(*id, t),
                None => out.insert_leaf(idx, t),
            }
        }
        Ok(out)
    }

    fn vjp(&self, prim: &Primitive, node: &Node<T>, gy: &[T]) -> Vec<Option<Vec<T>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i]].value;
        let needs = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        match prim {
            Primitive::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| matmul_nt(gy, b.data(), n, m, k));
                let gb = needs(1).then(|| matmul_tn(a.data(), gy, n, k, m));
                vec![ga, gb]
            }
            Primitive::Add => vec![Some(gy.to_vec()), Some(gy.to_vec())],
            Primitive::Sub => vec![Some(gy.to_vec()), Some(gy.iter().map(|v| -*v).collect())],
            Primitive::Mul => {
                let (a, b) = (inp(0).data(), inp(1).data());
                vec![
                    needs(0).then(|| gy.iter().zip(b).map(|(g, y)| *g * *y).collect()),
                    needs(1).then(|| gy.iter().zip(a).map(|(g, x)| *g * *x).collect()),
                ]
            }
            Primitive::Div => {
                let (a, b) = (inp(0).data(), inp(1).data());
                vec![
                    needs(0).then(|| gy.iter().zip(b).map(|(g, y)| *g / *y).collect()),
                    needs(1).then(|| {
                        gy.iter()
                            .zip(a.iter().zip(b))
                            .map(|(g, (x, y))| -*g * *x / (*y * *y))
                            .collect()
                    }),
                ]
            }
            Primitive::AddRow => {
                let m = inp(0).last_dim();
                let mut gb = vec![T::zero(); m];
                for (i, g) in gy.iter().enumerate() {
                    gb[i % m] += *g;
                }
                vec![Some(gy.to_vec()), Some(gb)]
            }
            Primitive::MulRow => {
                let (x, b) = (inp(0).data(), inp(1).data());
                let m = b.len();
                let gx = needs(0).then(|| gy.iter().enumerate().map(|(i, g)| *g * b[i % m]).collect());
                let gb = needs(1).then(|| {
                    let mut gb = vec![T::zero(); m];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % m] += *g * x[i];
                    }
                    gb
                });
                vec![gx, gb]
            }
            Primitive::ScaleRows => {
                let (x, s) = (inp(0), inp(1).data());
                let w = x.row_len().max(1);
                let gx = needs(0).then(|| gy.iter().enumerate().map(|(i, g)| *g * s[i / w]).collect());
                let gs = needs(1).then(|| {
                    let mut gs = vec![T::zero(); s.len()];
                    for (i, g) in gy.iter().enumerate() {
                        gs[i / w] += *g * x.data()[i];
                    }
                    gs
                });
                vec![gx, gs]
            }
            Primitive::Scale(c) => {
                let c = T::lit(*c);
                vec![Some(gy.iter().map(|g| *g * c).collect())]
            }
            Primitive::Transpose => {
                let x = inp(0);
                let (n, m) = (x.shape()[0], x.shape()[1]);
                vec![Some(transpose(gy, m, n))]
            }
            Primitive::Softmax => {
                let y = node.value.data();
                let m = node.value.last_dim();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in gy.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                    let dot: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = *y * (*g - dot);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::LayerNorm => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                    unreachable!("layer norm saves statistics")
                };
                let gamma = inp(1).data();
                let m = gamma.len();
                let mf = T::lit(m as f64);
                let mut gx = vec![T::zero(); xhat.len()];
                let mut gg = vec![T::zero(); m];
                let mut gb = vec![T::zero(); m];
                for (r, ((gr, xr), out)) in gy.chunks(m).zip(xhat.chunks(m)).zip(gx.chunks_mut(m)).enumerate() {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..m {
                        let d = gr[j] * gamma[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                    let rs = inv_std[r] / mf;
                    for j in 0..m {
                        let d = gr[j] * gamma[j];
                        out[j] = rs * (mf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                vec![needs(0).then_some(gx), needs(1).then_some(gg), needs(2).then_some(gb)]
            }
            Primitive::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(inp).collect();
                split_concat_grad(gy, &parts, *axis, node.value.shape())
                    .into_iter()
                    .map(Some)
                    .collect()
            }
            Primitive::Narrow { axis, start, len } => {
                let x = inp(0);
                let mut gx = vec![T::zero(); x.len()];
                if *axis == 0 {
                    let w = x.row_len();
                    gx[start * w..(start + len) * w].copy_from_slice(gy);
                } else {
                    let (n, m) = (x.shape()[0], x.shape()[1]);
                    for r in 0..n {
                        gx[r * m + start..r * m + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Gather { indices } => {
                let x = inp(0);
                let w = x.row_len();
                let mut gx = vec![T::zero(); x.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..w {
                        gx[i * w + j] += gy[k * w + j];
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Reshape { .. } => vec![Some(gy.to_vec())],
            Primitive::Sum => vec![Some(vec![gy[0]; inp(0).len()])],
            Primitive::Mean => {
                let n = inp(0).len();
                vec![Some(vec![gy[0] / T::lit(n as f64); n])]
            }
            Primitive::L2Norm => {
                let x = inp(0).data();
                let n = node.value.item();
                if n <= T::zero() {
                    return vec![Some(vec![T::zero(); x.len()])];
                }
                vec![Some(x.iter().map(|v| gy[0] * *v / n).collect())]
            }
            Primitive::L2NormalizeRows => {
                let Saved::Norms(norms) = &node.saved else {
                    unreachable!("normalize saves norms")
                };
                let y = node.value.data();
                let m = node.value.last_dim();
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((gr, yr), out)) in gy.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)).enumerate() {
                    let dot: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                    for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (*g - *y * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Covariance => {
                let (a, b) = (inp(0), inp(1));
                let (c, d) = (a.shape()[0], a.shape()[1]);
                let ac = center_rows(a.data(), c, d);
                let bc = center_rows(b.data(), c, d);
                let scale = T::one() / T::lit((c - 1) as f64);
                // dA~ = s * B~ dC^T ; dB~ = s * A~ dC ; then undo centering.
                let ga = needs(0).then(|| {
                    let mut g = matmul_nt(&bc, gy, c, d, d);
                    g.iter_mut().for_each(|v| *v *= scale);
                    center_rows(&g, c, d)
                });
                let gb = needs(1).then(|| {
                    let mut g = matmul(&ac, gy, c, d, d);
                    g.iter_mut().for_each(|v| *v *= scale);
                    center_rows(&g, c, d)
                });
                vec![ga, gb]
            }
            Primitive::FrobeniusSq => {
                let two = T::lit(2.0);
                vec![Some(inp(0).data().iter().map(|v| gy[0] * two * *v).collect())]
            }
            Primitive::Log => vec![Some(gy.iter().zip(inp(0).data()).map(|(g, x)| *g / *x).collect())],
            Primitive::Exp => vec![Some(gy.iter().zip(node.value.data()).map(|(g, y)| *g * *y).collect())],
            Primitive::Gelu => vec![Some(
                gy.iter()
                    .zip(inp(0).data())
                    .map(|(g, x)| *g * gelu_grad(*x))
                    .collect(),
            )],
            Primitive::Abs => vec![Some(
                gy.iter()
                    .zip(inp(0).data())
                    .map(|(g, x)| {
                        if *x > T::zero() {
                            *g
                        } else if *x < T::zero() {
                            -*g
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )],
            Primitive::CrossEntropy { targets } => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!("cross entropy saves probabilities")
                };
                let v = inp(0).last_dim();
                let mut gx: Vec<T> = probs.iter().map(|p| *p * gy[0]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * v + t] -= gy[0];
                }
                vec![Some(gx)]
            }
        }
    }

    // Convenience wrappers, one per primitive.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddRow, &[x, b])
    }
    pub fn mul_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MulRow, &[x, b])
    }
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(Primitive::ScaleRows, &[x, s])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm, &[x, gamma, beta])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Narrow { axis, start, len }, &[x])
    }
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape }, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::L2Norm, &[x])
    }
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::L2NormalizeRows, &[x])
    }
    pub fn covariance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Covariance, &[a, b])
    }
    pub fn frobenius_sq(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::FrobeniusSq, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[x])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::CrossEntropy { targets }, &[logits])
    }

    /// `a + b` for two one-element tensors of any rank.
    pub fn add_scalars(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).len(), self.value(b).len());
        if sa != 1 || sb != 1 {
            return Err(shape_err("add_scalars", self.value(a).shape(), self.value(b).shape()));
        }
        let a = self.reshape(a, vec![1])?;
        let b = self.reshape(b, vec![1])?;
        self.add(a, b)
    }

    /// Weighted sum `sum_i w_i * x_i` of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                Some(a) => self.add_scalars(a, t)?,
                None => self.reshape(t, vec![1])?,
            });
        }
        acc.ok_or(Error::EmptyInput("weighted_sum terms"))
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// `A [n,k] * B^T` where `B` is `[m,k]`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
        }
    }
    out
}

/// `A^T * B` where `A` is `[n,k]` and `B` is `[n,m]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for r in 0..n {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * m..(r + 1) * m];
        for (p, av) in arow.iter().enumerate() {
            if *av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *av * *bv;
            }
        }
    }
    out
}

fn transpose<T: Scalar>(x: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
    out
}

fn center_rows<T: Scalar>(x: &[T], c: usize, d: usize) -> Vec<T> {
    let cf = T::lit(c as f64);
    let mut mean = vec![T::zero(); d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= cf);
    x.chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| *v - *m).collect::<Vec<_>>())
        .collect()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts[0];
    match axis {
        0 => {
            let trailing = &first.shape()[first.rank().min(1)..];
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                if &p.shape()[p.rank().min(1)..] != trailing || p.rank() != first.rank() {
                    return Err(shape_err("concat", first.shape(), p.shape()));
                }
                rows += p.rows();
                data.extend_from_slice(p.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(trailing);
            Tensor::new(shape, data)
        }
        1 => {
            let n = first.rows();
            if parts.iter().any(|p| p.rank() != 2 || p.rows() != n) {
                let bad = parts.iter().find(|p| p.rank() != 2 || p.rows() != n).unwrap();
                return Err(shape_err("concat", first.shape(), bad.shape()));
            }
            let m: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut data = Vec::with_capacity(n * m);
            for r in 0..n {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::new(vec![n, m], data)
        }
        _ => Err(Error::InvalidArgument(format!("concat axis {axis} unsupported"))),
    }
}

fn split_concat_grad<T: Scalar>(gy: &[T], parts: &[&Tensor<T>], axis: usize, out_shape: &[usize]) -> Vec<Vec<T>> {
    if axis == 0 {
        let mut off = 0;
        parts
            .iter()
            .map(|p| {
                let g = gy[off..off + p.len()].to_vec();
                off += p.len();
                g
            })
            .collect()
    } else {
        let (n, m) = (out_shape[0], out_shape[1]);
        let mut col = 0;
        parts
            .iter()
            .map(|p| {
                let w = p.shape()[1];
                let mut g = Vec::with_capacity(n * w);
                for r in 0..n {
                    g.extend_from_slice(&gy[r * m + col..r * m + col + w]);
                }
                col += w;
                g
            })
            .collect()
    }
}

fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    match axis {
        0 => {
            if start + len > x.rows() {
                return Err(shape_err("narrow", x.shape(), &[start, len]));
            }
            let w = x.row_len();
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Tensor::new(shape, x.data()[start * w..(start + len) * w].to_vec())
        }
        1 if x.rank() == 2 => {
            let (n, m) = (x.shape()[0], x.shape()[1]);
            if start + len > m {
                return Err(shape_err("narrow", x.shape(), &[start, len]));
            }
            let mut data = Vec::with_capacity(n * len);
            for r in 0..n {
                data.extend_from_slice(&x.data()[r * m + start..r * m + start + len]);
            }
            Tensor::new(vec![n, len], data)
        }
        _ => Err(shape_err("narrow", x.shape(), &[axis])),
    }
}
