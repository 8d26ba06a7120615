//! Reverse-mode differentiation over a linear tape of 2-D tensor operations.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products into
//! the nodes that require gradients. Operations that take a `groups`
//! argument treat their row axis as `groups` equally sized stacked blocks
//! (one per window in a batch) and never mix rows across blocks.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, add_assign, dot, gelu, gelu_grad, softmax_in_place};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::dims2;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, T),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PermuteRows(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        groups: usize,
        width: usize,
        c_in: usize,
        c_out: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Softmax(Var),
    Sum(Var),
    L1(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddTiled(..) => "embedding_add",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::PermuteRows(..) => "permute_rows",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Attention { .. } => "attention",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::L1(..) => "l1_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    groups: usize,
    heads: usize,
    n_q: usize,
    n_k: usize,
    d_qk: usize,
    d_v: usize,
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward computation recorded for differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: false,
        }
    }

    /// Makes every operation fail with a numeric error if it produces NaN or Inf.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(t.into_data(), shape, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(t.into_data(), shape, true)
    }

    /// Loads a named parameter once per tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
        let v = self.push_leaf(t.data().to_vec(), t.shape().to_vec(), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push_leaf(&mut self, value: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if self.check_finite && value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: op.name(),
                detail: format!("non-finite output at tape position {}", self.nodes.len()),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes keep valid shapes")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Per-head attention weights cached by an attention node, laid out `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { geom, probs, .. } => {
                Some((probs.as_slice(), geom.groups, geom.heads, geom.n_q, geom.n_k))
            }
            _ => None,
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("left operand has {k} columns, right operand has {k2} rows"),
            ));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push(out, vec![m, n], Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` with `w` of shape `[in, out]` and optional bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        if k != k2 {
            return Err(Error::dim(
                "linear",
                format!("input has {k} features, weight expects {k2}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != n {
                return Err(Error::dim(
                    "linear",
                    format!("bias has {} entries, weight has {n} outputs", bias.len()),
                ));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.value(x), self.value(w), &mut out, m, k, n);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, vec![m, n], Op::Linear { x, w, b }, &inputs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!(
                    "left operand {:?} and right operand {:?} differ",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::dim(
                "add_row",
                format!("row vector has {} entries, matrix has {n} columns", self.value(row).len()),
            ));
        }
        let mut out = self.value(a).to_vec();
        let r = self.value(row).to_vec();
        for chunk in out.chunks_mut(n) {
            add_assign(chunk, &r);
        }
        self.push(out, vec![m, n], Op::AddRow(a, row), &[a, row])
    }

    /// Adds a `[m, n]` table to each of the stacked `[m, n]` blocks of `a` (positional embeddings).
    pub fn embedding_add(&mut self, a: Var, table: Var) -> Result<Var> {
        let (rows, n) = self.dims(a);
        let (m, n2) = self.dims(table);
        if n != n2 || rows % m != 0 {
            return Err(Error::dim(
                "embedding_add",
                format!("table {m}x{n2} does not tile input {rows}x{n}"),
            ));
        }
        let mut out = self.value(a).to_vec();
        let t = self.value(table).to_vec();
        for block in out.chunks_mut(m * n) {
            add_assign(block, &t);
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddTiled(a, table), &[a, table])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), &[a])
    }

    /// Concatenates 2-D operands along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let (r0, c0) = self.dims(first);
        let (out, shape) = match axis {
            0 => {
                let mut rows = 0;
                let mut out = Vec::new();
                for (i, &p) in parts.iter().enumerate() {
                    let (r, c) = self.dims(p);
                    if c != c0 {
                        return Err(Error::dim(
                            "concat",
                            format!("operand {i} has {c} columns, expected {c0}"),
                        ));
                    }
                    rows += r;
                    out.extend_from_slice(self.value(p));
                }
                (out, vec![rows, c0])
            }
            1 => {
                let mut cols = 0;
                for (i, &p) in parts.iter().enumerate() {
                    let (r, c) = self.dims(p);
                    if r != r0 {
                        return Err(Error::dim(
                            "concat",
                            format!("operand {i} has {r} rows, expected {r0}"),
                        ));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let (_, c) = self.dims(p);
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                (out, vec![r0, cols])
            }
            _ => return Err(Error::dim("concat", format!("axis {axis} not supported"))),
        };
        self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of {m}", start + len),
            ));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        self.push(out, vec![len, n], Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} out of {n}", start + len),
            ));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(out, vec![m, len], Op::SliceCols(a, start), &[a])
    }

    /// Row gather: output row `i` is input row `perm[i]`; `perm` must be a permutation.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute_rows", format!("not a permutation of {m} rows")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for &p in perm {
            out.extend_from_slice(&src[p * n..(p + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::PermuteRows(a, perm.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        self.push(out, shape.to_vec(), Op::Reshape(a), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Normalizes each row over the last axis, then applies gain `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Parameter(format!("layer_norm epsilon must be positive, got {eps}")));
        }
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma/beta have {}/{} entries, rows have {n}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let nf = T::from_usize(n).unwrap();
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Same-padded 1-D convolution over time.
    ///
    /// `x` is `[groups * length, c_in]` (or a plain vector when `c_in = 1`),
    /// `kernel` is `[width, c_in, c_out]` (or `[width]`), `bias` is `[c_out]`.
    /// Computes `y[t, o] = b[o] + Σ_k Σ_c w[k, c, o] · x[t - k + width/2, c]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, groups: usize) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        let (width, c_in, c_out) = match kshape.as_slice() {
            [w] => (*w, 1, 1),
            [w, ci, co] => (*w, *ci, *co),
            _ => return Err(Error::dim("conv1d", format!("kernel shape {kshape:?} must be [w] or [w, c_in, c_out]"))),
        };
        if width % 2 == 0 {
            return Err(Error::dim("conv1d", format!("kernel width {width} must be odd for same padding")));
        }
        let xshape = self.shape(x).to_vec();
        let (rows, cols) = match xshape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => return Err(Error::dim("conv1d", format!("input shape {xshape:?} must be 1-D or 2-D"))),
        };
        if cols != c_in {
            return Err(Error::dim("conv1d", format!("input has {cols} channels, kernel expects {c_in}")));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(Error::dim("conv1d", format!("{rows} rows do not split into {groups} groups")));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::dim("conv1d", format!("bias has {} entries, kernel has {c_out} outputs", self.value(b).len())));
            }
        }
        let len = rows / groups;
        let pad = width / 2;
        let xs = self.value(x);
        let w = self.value(kernel);
        let mut out = vec![T::zero(); rows * c_out];
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        for g in 0..groups {
            for t in 0..len {
                let orow = (g * len + t) * c_out;
                for k in 0..width {
                    let src = t as isize - k as isize + pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xrow = (g * len + src as usize) * c_in;
                    for c in 0..c_in {
                        let xv = xs[xrow + c];
                        let wrow = &w[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                        for (o, &wv) in wrow.iter().enumerate() {
                            out[orow + o] += wv * xv;
                        }
                    }
                }
            }
        }
        let shape = if xshape.len() == 1 && c_out == 1 {
            vec![rows]
        } else {
            vec![rows, c_out]
        };
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            out,
            shape,
            Op::Conv1d {
                x,
                kernel,
                bias,
                groups,
                width,
                c_in,
                c_out,
            },
            &inputs,
        )
    }

    /// Multi-head scaled dot-product attention `softmax(Q Kᵀ / √d_k) V` per head and group.
    ///
    /// `q` is `[groups * n_q, d_qk]`, `k` is `[groups * n_k, d_qk]`, `v` is
    /// `[groups * n_k, d_v]`; each head uses a contiguous `1/heads` slice of
    /// the columns. Output is `[groups * n_q, d_v]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (rq, dq) = self.dims(q);
        let (rk, dk) = self.dims(k);
        let (rv, dv) = self.dims(v);
        if dk != dq {
            return Err(Error::dim("attention", format!("K has {dk} columns but Q has {dq}")));
        }
        if rv != rk {
            return Err(Error::dim("attention", format!("V has {rv} rows but K has {rk}")));
        }
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(Error::dim("attention", format!("Q width {dq} / V width {dv} not divisible by {heads} heads")));
        }
        if groups == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(Error::dim("attention", format!("Q rows {rq} / K rows {rk} not divisible into {groups} groups")));
        }
        let geom = AttnGeom {
            groups,
            heads,
            n_q: rq / groups,
            n_k: rk / groups,
            d_qk: dq,
            d_v: dv,
        };
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), geom);
        self.push(out, vec![rq, dv], Op::Attention { q, k, v, geom, probs }, &[q, k, v])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![1], Op::Sum(a), &[a])
    }

    /// Unnormalized `Σ |pred − target|`; subgradient 0 at exact ties.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).len() != self.value(target).len() {
            return Err(Error::dim(
                "l1_loss",
                format!(
                    "prediction has {} values, target has {}",
                    self.value(pred).len(),
                    self.value(target).len()
                ),
            ));
        }
        let s = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        self.push(vec![s], vec![1], Op::L1(pred, target), &[pred, target])
    }

    /// Weighted mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} outside {c} classes")));
        }
        let weights: Vec<T> = match weights {
            Some(w) if w.len() == c => w.to_vec(),
            Some(w) => return Err(Error::dim("cross_entropy", format!("{} class weights for {c} classes", w.len()))),
            None => vec![T::one(); c],
        };
        let mut probs = self.value(logits).to_vec();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        let mut total = T::zero();
        let mut wsum = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let lp = log_softmax_at(&self.value(logits)[i * c..(i + 1) * c], l);
            total -= weights[l] * lp;
            wsum += weights[l];
        }
        self.push(
            vec![total / wsum],
            vec![1],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            &[logits],
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a), g, db, k, m, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims(*x);
                let (_, n) = self.dims(*w);
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::matmul_nt_acc(g, self.value(*w), dx, m, n, k);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    kernels::matmul_tn_acc(self.value(*x), g, dw, k, m, n);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(n) {
                            add_assign(db, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_assign(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, r) => {
                let n = self.value(*r).len();
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                if let Some(dr) = self.slot(grads, *r) {
                    for row in g.chunks(n) {
                        add_assign(dr, row);
                    }
                }
            }
            Op::AddTiled(a, t) => {
                let n = self.value(*t).len();
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                if let Some(dt) = self.slot(grads, *t) {
                    for block in g.chunks(n) {
                        add_assign(dt, block);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, total_cols) = dims2(&node.shape);
                let mut row_off = 0;
                let mut col_off = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if let Some(dp) = self.slot(grads, p) {
                        if *axis == 0 {
                            add_assign(dp, &g[row_off * c..(row_off + r) * c]);
                        } else {
                            for i in 0..rows {
                                let src = &g[i * total_cols + col_off..i * total_cols + col_off + c];
                                add_assign(&mut dp[i * c..(i + 1) * c], src);
                            }
                        }
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, n) = self.dims(*a);
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(&mut da[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let len = g.len() / m;
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..m {
                        add_assign(&mut da[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::PermuteRows(a, perm) => {
                let (_, n) = self.dims(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for (i, &p) in perm.iter().enumerate() {
                        add_assign(&mut da[p * n..(p + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for row in g.chunks(n) {
                        add_assign(db, row);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::from_usize(n).unwrap();
                    for i in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        let r = rstd[i] / nf;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            dx[i * n + j] += r * (nf * dh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                groups,
                width,
                c_in,
                c_out,
            } => {
                let (width, c_in, c_out, groups) = (*width, *c_in, *c_out, *groups);
                let rows = self.value(*x).len() / c_in;
                let len = rows / groups;
                let pad = width / 2;
                let xs = self.value(*x);
                let w = self.value(*kernel);
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(c_out) {
                            add_assign(db, row);
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *kernel) {
                    for gi in 0..groups {
                        for t in 0..len {
                            let grow = &g[(gi * len + t) * c_out..(gi * len + t + 1) * c_out];
                            for k in 0..width {
                                let src = t as isize - k as isize + pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xrow = (gi * len + src as usize) * c_in;
                                for c in 0..c_in {
                                    let xv = xs[xrow + c];
                                    let wrow = &mut dw[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                    for (d, &gv) in wrow.iter_mut().zip(grow) {
                                        *d += gv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for gi in 0..groups {
                        for t in 0..len {
                            let grow = &g[(gi * len + t) * c_out..(gi * len + t + 1) * c_out];
                            for k in 0..width {
                                let src = t as isize - k as isize + pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xrow = (gi * len + src as usize) * c_in;
                                for c in 0..c_in {
                                    let wrow = &w[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                    dx[xrow + c] += dot(wrow, grow);
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *geom,
                );
                if let Some(a) = self.slot(grads, *q) {
                    add_assign(a, &dq);
                }
                if let Some(a) = self.slot(grads, *k) {
                    add_assign(a, &dk);
                }
                if let Some(a) = self.slot(grads, *v) {
                    add_assign(a, &dv);
                }
            }
            Op::Softmax(a) => {
                let (_, n) = self.dims(*a);
                let y = &node.value;
                if let Some(da) = self.slot(grads, *a) {
                    for (i, grow) in g.chunks(n).enumerate() {
                        let yrow = &y[i * n..(i + 1) * n];
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            da[i * n + j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L1(p, t) => {
                let pv = self.value(*p);
                let tv = self.value(*t);
                let sign = |i: usize| {
                    let d = pv[i] - tv[i];
                    if d > T::zero() {
                        g[0]
                    } else if d < T::zero() {
                        -g[0]
                    } else {
                        T::zero()
                    }
                };
                if let Some(dp) = self.slot(grads, *p) {
                    for (i, d) in dp.iter_mut().enumerate() {
                        *d += sign(i);
                    }
                }
                if let Some(dt) = self.slot(grads, *t) {
                    for (i, d) in dt.iter_mut().enumerate() {
                        *d -= sign(i);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let (_, c) = self.dims(*logits);
                let wsum: T = labels.iter().map(|&l| weights[l]).sum();
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, &l) in labels.iter().enumerate() {
                        let s = g[0] * weights[l] / wsum;
                        for j in 0..c {
                            let target = if j == l { T::one() } else { T::zero() };
                            dl[i * c + j] += s * (probs[i * c + j] - target);
                        }
                    }
                }
            }
        }
    }

    /// Adds every parameter gradient of this tape into the matching store entries.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &v) in &self.params {
            let g = match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); self.value(v).len()],
            };
            store.accumulate_grad(name, &g)?;
        }
        Ok(())
    }

    /// Names of parameters loaded into this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[idx] - lse
}

fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], geom: AttnGeom) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        groups,
        heads,
        n_q,
        n_k,
        d_qk,
        d_v,
    } = geom;
    let hq = d_qk / heads;
    let hv = d_v / heads;
    let scale = T::one() / T::from_usize(hq).unwrap().sqrt();
    let mut out = vec![T::zero(); groups * n_q * d_v];
    let mut probs = vec![T::zero(); groups * heads * n_q * n_k];
    for g in 0..groups {
        for h in 0..heads {
            let pbase = (g * heads + h) * n_q * n_k;
            for i in 0..n_q {
                let qrow = &q[(g * n_q + i) * d_qk + h * hq..][..hq];
                let prow = &mut probs[pbase + i * n_k..pbase + (i + 1) * n_k];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &k[(g * n_k + j) * d_qk + h * hq..][..hq];
                    *p = dot(qrow, krow) * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(g * n_q + i) * d_v + h * hv..][..hv];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &v[(g * n_k + j) * d_v + h * hv..][..hv];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    geom: AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnGeom {
        groups,
        heads,
        n_q,
        n_k,
        d_qk,
        d_v,
    } = geom;
    let hq = d_qk / heads;
    let hv = d_v / heads;
    let scale = T::one() / T::from_usize(hq).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); n_k];
    for g in 0..groups {
        for h in 0..heads {
            let pbase = (g * heads + h) * n_q * n_k;
            for i in 0..n_q {
                let prow = &probs[pbase + i * n_k..pbase + (i + 1) * n_k];
                let grow = &gout[(g * n_q + i) * d_v + h * hv..][..hv];
                let mut s = T::zero();
                for j in 0..n_k {
                    let voff = (g * n_k + j) * d_v + h * hv;
                    let dp = dot(grow, &v[voff..voff + hv]);
                    ds[j] = dp;
                    s += dp * prow[j];
                    let p = prow[j];
                    for (d, &gv) in dv[voff..voff + hv].iter_mut().zip(grow) {
                        *d += p * gv;
                    }
                }
                let qoff = (g * n_q + i) * d_qk + h * hq;
                for j in 0..n_k {
                    let dsj = prow[j] * (ds[j] - s) * scale;
                    if dsj == T::zero() {
                        continue;
                    }
                    let koff = (g * n_k + j) * d_qk + h * hq;
                    for c in 0..hq {
                        dq[qoff + c] += dsj * k[koff + c];
                        dk[koff + c] += dsj * q[qoff + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
