//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its variables together with
//! whatever the backward rule needs. Graphs are cheap and meant to be rebuilt
//! for every forward pass; parameters are borrowed from a [`ParamStore`], not
//! copied.
//!
//! Broadcasting is limited to adding a `[d]` bias to every row of a `[n, d]`
//! matrix.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{
    self, dot, log_sum_exp, matmul, matmul_at, matmul_bt, softmax_in_place, Result, Tensor,
    TensorError,
};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    L2Norm(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
        p_log: Vec<T>,
        q_log: Vec<T>,
        per_row: Vec<T>,
    },
    Cosine(Var, Var),
    Stack(Vec<Var>),
    LogSumExp(Var),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// True if some differentiable leaf reaches this node.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Binds a parameter (borrowed, bound once per graph).
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let t = store.get(id);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Copies the current value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(TensorError::Invalid {
                op,
                reason: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let g = self.any_grad(&[a, b]);
        self.push("matmul", Tensor::from_parts_unchecked(vec![n, m], out), Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul_bt", a)?;
        let (m, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_bt", self.shape(a), self.shape(b)));
        }
        let out = matmul_bt(self.value(a).data(), self.value(b).data(), n, k, m);
        let g = self.any_grad(&[a, b]);
        self.push("matmul_bt", Tensor::from_parts_unchecked(vec![n, m], out), Op::MatMulBt(a, b), g)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        self.push("add", out, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), g)
    }

    /// `x[n, d] + bias[d]`, row-wise.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2("add_bias", x)?;
        if self.shape(bias) != [d] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &y) in row.iter_mut().zip(b) {
                *o += y;
            }
        }
        let g = self.any_grad(&[x, bias]);
        self.push("add_bias", out, Op::AddBias(x, bias), g)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let g = self.any_grad(&[x]);
        self.push("scale", out, Op::Scale(x, c), g)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let g = self.any_grad(&[x]);
        self.push("relu", out, Op::Relu(x), g)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = tensor::softmax_rows(t.data(), t.cols());
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), out);
        let g = self.any_grad(&[x]);
        self.push("softmax", out, Op::Softmax(x), g)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = tensor::log_softmax_rows(t.data(), t.cols());
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), out);
        let g = self.any_grad(&[x]);
        self.push("log_softmax", out, Op::LogSoftmax(x), g)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(1e-5);
        let inv_d = T::one() / T::from_usize_lossy(d);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = gs[j] * h + bs[j];
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::from_parts_unchecked(vec![n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        )
    }

    /// Multi-head scaled dot-product attention. `q: [n, d]`, `k, v: [m, d]`.
    /// With `causal`, query `i` only sees keys `j <= i` (requires `n == m`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.dims2("attention", q)?;
        let (m, dk) = self.dims2("attention", k)?;
        if dk != d || self.shape(v) != [m, d] {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                reason: format!("width {d} not divisible by {heads} heads"),
            });
        }
        if causal && n != m {
            return Err(mismatch("attention(causal)", self.shape(q), self.shape(k)));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qs[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let visible = if causal { i + 1 } else { m };
                for j in 0..m {
                    prow[j] = if j < visible {
                        dot(qi, &ks[j * d + off..j * d + off + dh]) * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let p = prow[j];
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let g = self.any_grad(&[q, k, v]);
        self.push(
            "attention",
            Tensor::from_parts_unchecked(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            g,
        )
    }

    /// Gathers rows of `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                reason: "empty id sequence".into(),
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let g = self.any_grad(&[table]);
        self.push(
            "embedding",
            Tensor::from_parts_unchecked(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            g,
        )
    }

    /// Stacks matrices that share a width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, d) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, dp) = self.dims2("concat_rows", p)?;
            if dp != d {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let g = self.any_grad(parts);
        self.push(
            "concat_rows",
            Tensor::from_parts_unchecked(vec![rows, d], out),
            Op::ConcatRows(parts.to_vec()),
            g,
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.dims2("rows", x)?;
        if start >= end || end > n {
            return Err(TensorError::IndexOutOfRange {
                op: "rows",
                index: end,
                bound: n,
            });
        }
        let out = self.value(x).data()[start * d..end * d].to_vec();
        let g = self.any_grad(&[x]);
        self.push(
            "rows",
            Tensor::from_parts_unchecked(vec![end - start, d], out),
            Op::Rows { x, start },
            g,
        )
    }

    /// Mean over positions: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.dims2("mean_rows", x)?;
        let out = self.value(x).mean_rows();
        let g = self.any_grad(&[x]);
        self.push("mean_rows", out, Op::MeanRows(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let g = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).l2_norm();
        let g = self.any_grad(&[x]);
        self.push("l2_norm", Tensor::scalar(s), Op::L2Norm(x), g)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: vocab,
            });
        }
        let lp = tensor::log_softmax_rows(self.value(logits).data(), vocab);
        let nll: T = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lp[i * vocab + t])
            .sum();
        let loss = nll / T::from_usize_lossy(n);
        let probs = lp.into_iter().map(T::exp).collect();
        let g = self.any_grad(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        )
    }

    /// Mean over rows of `KL(softmax(p) ‖ softmax(q))`, both given as logits.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, vocab) = self.dims2("kl_div", p)?;
        self.same_shape("kl_div", p, q)?;
        let p_log = tensor::log_softmax_rows(self.value(p).data(), vocab);
        let q_log = tensor::log_softmax_rows(self.value(q).data(), vocab);
        let per_row: Vec<T> = (0..n)
            .map(|i| {
                (0..vocab)
                    .map(|j| {
                        let lp = p_log[i * vocab + j];
                        lp.exp() * (lp - q_log[i * vocab + j])
                    })
                    .sum()
            })
            .collect();
        let loss = per_row.iter().copied().sum::<T>() / T::from_usize_lossy(n);
        let g = self.any_grad(&[p, q]);
        self.push(
            "kl_div",
            Tensor::scalar(loss),
            Op::KlDiv {
                p,
                q,
                p_log,
                q_log,
                per_row,
            },
            g,
        )
    }

    /// Cosine similarity of two vectors of equal shape.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let c = dot(x.data(), y.data()) / (x.l2_norm() * y.l2_norm());
        let g = self.any_grad(&[a, b]);
        self.push("cosine", Tensor::scalar(c), Op::Cosine(a, b), g)
    }

    /// Collects scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.len() != 1 {
                return Err(TensorError::NotScalar {
                    shape: t.shape().to_vec(),
                });
            }
            out.push(t.item());
        }
        let t = Tensor::vector(out)?;
        let g = self.any_grad(scalars);
        self.push("stack", t, Op::Stack(scalars.to_vec()), g)
    }

    /// `log Σ exp(x)` over all entries.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let s = log_sum_exp(self.value(x).data());
        let g = self.any_grad(&[x]);
        self.push("log_sum_exp", Tensor::scalar(s), Op::LogSumExp(x), g)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(gy);
                }
                op => self.propagate(op, &node.value, gy, &mut grads),
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if i <= loss.0 => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                self.acc_with(grads, *a, || {
                    Tensor::from_parts_unchecked(vec![n, k], matmul_bt(gy.data(), bv.data(), n, m, k))
                });
                self.acc_with(grads, *b, || {
                    Tensor::from_parts_unchecked(vec![k, m], matmul_at(av.data(), gy.data(), n, k, m))
                });
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                self.acc_with(grads, *a, || {
                    Tensor::from_parts_unchecked(vec![n, k], matmul(gy.data(), bv.data(), n, m, k))
                });
                self.acc_with(grads, *b, || {
                    Tensor::from_parts_unchecked(vec![m, k], matmul_at(gy.data(), av.data(), n, m, k))
                });
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *b, || gy.clone());
                self.acc(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *b, || gy.map(|x| -x));
                self.acc(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || gy.zip_map(bv, |g, y| g * y).expect("shape"));
                self.acc_with(grads, *b, || gy.zip_map(av, |g, x| g * x).expect("shape"));
            }
            Op::AddBias(x, bias) => {
                let d = gy.cols();
                self.acc_with(grads, *bias, || {
                    let mut s = vec![T::zero(); d];
                    for row in gy.data().chunks(d) {
                        for (o, &g) in s.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    Tensor::from_parts_unchecked(vec![d], s)
                });
                self.acc(grads, *x, gy);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, gy.map(|g| g * c));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g = gy
                    .zip_map(xv, |g, v| if v > T::zero() { g } else { T::zero() })
                    .expect("shape");
                self.acc(grads, *x, g);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut g = gy;
                for (grow, yrow) in g.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let s = dot(grow, yrow);
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - s);
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut g = gy;
                for (grow, lrow) in g.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let s: T = grow.iter().copied().sum();
                    for (gv, &l) in grow.iter_mut().zip(lrow) {
                        *gv -= l.exp() * s;
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let n = out.rows();
                let gv = self.value(*gamma).data();
                self.acc_with(grads, *gamma, || {
                    let mut s = vec![T::zero(); d];
                    for (grow, hrow) in gy.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                    Tensor::from_parts_unchecked(vec![d], s)
                });
                self.acc_with(grads, *beta, || {
                    let mut s = vec![T::zero(); d];
                    for grow in gy.data().chunks(d) {
                        for j in 0..d {
                            s[j] += grow[j];
                        }
                    }
                    Tensor::from_parts_unchecked(vec![d], s)
                });
                self.acc_with(grads, *x, || {
                    let inv_d = T::one() / T::from_usize_lossy(d);
                    let mut dx = vec![T::zero(); n * d];
                    let mut dh = vec![T::zero(); d];
                    for i in 0..n {
                        let grow = &gy.data()[i * d..(i + 1) * d];
                        let hrow = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let s1: T = dh.iter().copied().sum();
                        let s2 = dot(&dh, hrow);
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (dh[j] - (s1 + hrow[j] * s2) * inv_d);
                        }
                    }
                    Tensor::from_parts_unchecked(vec![n, d], dx)
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d, m) = (qv.rows(), qv.cols(), kv.rows());
                let dh = d / heads;
                let scale = T::one() / T::from_usize_lossy(dh).sqrt();
                let (qs, ks, vs, go) = (qv.data(), kv.data(), vv.data(), gy.data());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); m * d];
                let mut dv = vec![T::zero(); m * d];
                let mut dp = vec![T::zero(); m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let prow = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &go[i * d + off..i * d + off + dh];
                        let mut s = T::zero();
                        for j in 0..m {
                            let p = prow[j];
                            dp[j] = dot(gi, &vs[j * d + off..j * d + off + dh]);
                            s += p * dp[j];
                            if p != T::zero() {
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (o, &g) in dvj.iter_mut().zip(gi) {
                                    *o += p * g;
                                }
                            }
                        }
                        for j in 0..m {
                            let p = prow[j];
                            if p == T::zero() {
                                continue;
                            }
                            let ds = p * (dp[j] - s) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * ks[j * d + off + c];
                                dk[j * d + off + c] += ds * qs[i * d + off + c];
                            }
                        }
                    }
                }
                self.acc(grads, *q, Tensor::from_parts_unchecked(vec![n, d], dq));
                self.acc(grads, *k, Tensor::from_parts_unchecked(vec![m, d], dk));
                self.acc(grads, *v, Tensor::from_parts_unchecked(vec![m, d], dv));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gy.data()[r * d..(r + 1) * d];
                    for (o, &g) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *o += g;
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let d = gy.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    self.acc_with(grads, p, || {
                        Tensor::from_parts_unchecked(
                            vec![r, d],
                            gy.data()[start * d..(start + r) * d].to_vec(),
                        )
                    });
                    start += r;
                }
            }
            Op::Rows { x, start } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut g = Tensor::zeros(xv.shape());
                g.data_mut()[start * d..start * d + gy.len()].copy_from_slice(gy.data());
                self.acc(grads, *x, g);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let inv = T::one() / T::from_usize_lossy(n);
                let mut g = Vec::with_capacity(n * d);
                for _ in 0..n {
                    g.extend(gy.data().iter().map(|&v| v * inv));
                }
                self.acc(grads, *x, Tensor::from_parts_unchecked(vec![n, d], g));
            }
            Op::Sum(x) => {
                let g = gy.item();
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(&shape, g));
            }
            Op::L2Norm(x) => {
                let g = gy.item();
                let norm = out.item();
                self.acc(grads, *x, self.value(*x).map(|v| g * v / norm));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let vocab = shape[1];
                let s = gy.item() / T::from_usize_lossy(targets.len());
                let mut g: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    g[i * vocab + t] -= s;
                }
                self.acc(grads, *logits, Tensor::from_parts_unchecked(shape, g));
            }
            Op::KlDiv {
                p,
                q,
                p_log,
                q_log,
                per_row,
            } => {
                let shape = self.value(*p).shape().to_vec();
                let vocab = shape[1];
                let s = gy.item() / T::from_usize_lossy(shape[0]);
                self.acc_with(grads, *q, || {
                    let g = p_log
                        .iter()
                        .zip(q_log)
                        .map(|(&lp, &lq)| (lq.exp() - lp.exp()) * s)
                        .collect();
                    Tensor::from_parts_unchecked(shape.clone(), g)
                });
                self.acc_with(grads, *p, || {
                    let g = p_log
                        .iter()
                        .zip(q_log)
                        .enumerate()
                        .map(|(idx, (&lp, &lq))| lp.exp() * ((lp - lq) - per_row[idx / vocab]) * s)
                        .collect();
                    Tensor::from_parts_unchecked(shape.clone(), g)
                });
            }
            Op::Cosine(a, b) => {
                let g = gy.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.l2_norm(), bv.l2_norm());
                let c = out.item();
                self.acc_with(grads, *a, || {
                    av.zip_map(bv, |x, y| g * (y / (na * nb) - c * x / (na * na)))
                        .expect("shape")
                });
                self.acc_with(grads, *b, || {
                    bv.zip_map(av, |y, x| g * (x / (na * nb) - c * y / (nb * nb)))
                        .expect("shape")
                });
            }
            Op::Stack(parts) => {
                for (&p, &g) in parts.iter().zip(gy.data()) {
                    let shape = self.value(p).shape().to_vec();
                    self.acc_with(grads, p, || Tensor::full(&shape, g));
                }
            }
            Op::LogSumExp(x) => {
                let g = gy.item();
                let lse = out.item();
                self.acc(grads, *x, self.value(*x).map(|v| g * (v - lse).exp()));
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients of every differentiable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Graph::input`]. `None` if no path exists.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// One gradient per stored parameter, zero where the loss does not reach it.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id.0] = g.clone();
            }
        }
        out
    }
}
