//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value on a tape is a matrix (`rows × cols`); vectors are single
//! rows and scalars are `1×1`. Nodes are appended in evaluation order, so
//! iterating the tape backwards is a reverse topological traversal.
//!
//! A tape supports exactly one backward pass. A second call to
//! [`Tape::backward`] returns [`Error::TapeConsumed`]; build a fresh tape for
//! every forward pass. Gradients flowing into a [`ParamStore`] accumulate
//! additively until [`ParamStore::zero_grad`] is called.

use std::sync::Arc;

use super::kernels::{self, add_into};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Query rows `[q_start, q_start + q_len)` attend to key rows
/// `[k_start, k_start + k_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scale: T,
        probs: Vec<T>,
    },
    NegLogPick {
        probs: Var,
        labels: Vec<usize>,
        eps: T,
        scale: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Arc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
    consumed: bool,
    no_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
            no_grad: false,
        }
    }

    /// A tape that never tracks gradients, for inference.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.len());
        if !kernels::all_finite(&value) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            rows,
            cols,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_shared(vec![n.rows, n.cols], Arc::clone(&n.value))
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Records a tensor as a leaf. The leaf is differentiable when the
    /// tensor has `requires_grad` set; its gradient is then available from
    /// [`Gradients::get`].
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        let (rows, cols) = t.matrix_dims()?;
        self.nodes.push(Node {
            rows,
            cols,
            value: t.shared(),
            op: Op::Leaf,
            needs_grad: t.requires_grad() && !self.no_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a parameter; [`Tape::backward_into`] routes its gradient back
    /// into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.get(id))?;
        if self.needs(v) {
            self.params.push((v, id));
        }
        Ok(v)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::dim(
                "constant",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        self.push("constant", rows, cols, data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", m, n, out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = kernels::transpose(self.value(a), r, c);
        let ng = self.needs(a);
        self.push("transpose", c, r, out, Op::Transpose(a), ng)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::dim(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", r, c, out, Op::Add(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(Error::dim("add_row", format!("{r}x{c} + {:?}", self.dims(bias))));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            add_into(row, b);
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push("add_row", r, c, out, Op::AddRow(x, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", r, c, out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push("scale", r, c, out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let ng = self.needs(a);
        self.push("relu", r, c, out, Op::Relu(a), ng)
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            kernels::softmax_in_place(row);
        }
        let ng = self.needs(a);
        self.push("softmax_rows", r, c, out, Op::SoftmaxRows(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::dim("layer_norm", format!("x {r}x{c}, gain/bias must be 1x{c}")));
        }
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks_exact(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            "layer_norm",
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "gather table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            "gather",
            ids.len(),
            d,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean over rows (`axis = 0`, giving `1×c`) or columns (`axis = 1`,
    /// giving `r×1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.value(x);
        let (out, rows, cols) = match axis {
            0 => {
                if r == 0 {
                    return Err(Error::dim("mean_axis", "mean over zero rows"));
                }
                let mut acc = vec![T::zero(); c];
                for row in src.chunks_exact(c.max(1)) {
                    add_into(&mut acc, row);
                }
                let inv = T::one() / T::lit(r as f64);
                acc.iter_mut().for_each(|v| *v *= inv);
                (acc, 1, c)
            }
            1 => {
                if c == 0 {
                    return Err(Error::dim("mean_axis", "mean over zero columns"));
                }
                let inv = T::one() / T::lit(c as f64);
                let acc = src
                    .chunks_exact(c)
                    .map(|row| row.iter().copied().sum::<T>() * inv)
                    .collect();
                (acc, r, 1)
            }
            _ => return Err(Error::dim("mean_axis", format!("axis {axis} on a matrix"))),
        };
        let ng = self.needs(x);
        self.push("mean_axis", rows, cols, out, Op::MeanAxis { x, axis }, ng)
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let (r0, c0) = self.dims(first);
        let (rows, cols, out) = match axis {
            0 => {
                let mut out = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if c != c0 {
                        return Err(Error::dim("concat", format!("column count {c} vs {c0}")));
                    }
                    rows += r;
                    out.extend_from_slice(self.value(p));
                }
                (rows, c0, out)
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if r != r0 {
                        return Err(Error::dim("concat", format!("row count {r} vs {r0}")));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let c = self.dims(p).1;
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                (r0, cols, out)
            }
            _ => return Err(Error::dim("concat", format!("axis {axis} on a matrix"))),
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            rows,
            cols,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        if mask.len() != r * c {
            return Err(Error::dim("masked_fill", format!("mask of {} for {r}x{c}", mask.len())));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let ng = self.needs(x);
        self.push("masked_fill", r, c, out, Op::MaskedFill { x, mask: mask.to_vec() }, ng)
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + width > c {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {c}", start + width)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for row in src.chunks_exact(c.max(1)) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let ng = self.needs(x);
        self.push("slice_cols", r, width, out, Op::SliceCols { x, start }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push("sum", 1, 1, vec![total], Op::Sum(x), ng)
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// `q` is `Nq×d`, `k` and `v` are `Nk×d`; each head uses a `d/heads`
    /// column block. With `causal`, query `i` of a segment sees keys
    /// `0..=i` of that segment. Query rows not covered by any segment
    /// produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) {
            return Err(Error::dim(
                "attention",
                format!("q {nq}x{d}, k {nk}x{dk}, v {:?}", self.dims(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        for s in segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::dim("attention", format!("segment {s:?} outside {nq}/{nk} rows")));
            }
            if causal && s.q_len > s.k_len {
                return Err(Error::dim("attention", "causal segment with more queries than keys"));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let total: usize = segments.iter().map(|s| heads * s.q_len * s.k_len).sum();
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); nq * d];
        let mut base = 0;
        for s in segments {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qv[(s.q_start + i) * d + col..][..dh];
                    let visible = if causal { i + 1 } else { s.k_len };
                    let prow = &mut probs[base + i * s.k_len..][..s.k_len];
                    for (j, p) in prow.iter_mut().enumerate().take(visible) {
                        let krow = &kv[(s.k_start + j) * d + col..][..dh];
                        let dot = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>();
                        *p = dot * scale;
                    }
                    kernels::softmax_in_place(&mut prow[..visible]);
                    let orow = &mut out[(s.q_start + i) * d + col..][..dh];
                    for (j, &p) in prow.iter().enumerate().take(visible) {
                        let vrow = &vv[(s.k_start + j) * d + col..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
                base += s.q_len * s.k_len;
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            nq,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                segments: segments.to_vec(),
                probs: if ng { probs } else { Vec::new() },
            },
            ng,
        )
    }

    /// `scale · Σᵢ −log softmax(logitsᵢ)[targetᵢ]`. Use `scale = 1/n` for the
    /// mean over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: T) -> Result<Var> {
        let (n, vocab) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(n * vocab);
        let mut total = T::zero();
        for (row, &t) in self.value(logits).chunks_exact(vocab.max(1)).zip(targets) {
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let lp = kernels::log_softmax(row);
            total -= lp[t];
            probs.extend(lp.iter().map(|x| x.exp()));
        }
        let ng = self.needs(logits);
        self.push(
            "cross_entropy",
            1,
            1,
            vec![total * scale],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs: if ng { probs } else { Vec::new() },
            },
            ng,
        )
    }

    /// `scale · Σⱼ −log max(probs[j, labelⱼ], eps)` for 0-based labels.
    pub fn neg_log_pick(&mut self, probs: Var, labels: &[usize], eps: T, scale: T) -> Result<Var> {
        let (n, l) = self.dims(probs);
        if labels.len() != n {
            return Err(Error::dim(
                "neg_log_pick",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        let p = self.value(probs);
        let mut total = T::zero();
        for (j, &s) in labels.iter().enumerate() {
            if s >= l {
                return Err(Error::Index {
                    what: "attention label",
                    index: s,
                    bound: l,
                });
            }
            total -= p[j * l + s].max(eps).ln();
        }
        let ng = self.needs(probs);
        self.push(
            "neg_log_pick",
            1,
            1,
            vec![total * scale],
            Op::NegLogPick {
                probs,
                labels: labels.to_vec(),
                eps,
                scale,
            },
            ng,
        )
    }

    /// Runs the backward pass from a `1×1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.dims(loss) != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.dims(loss)),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that accumulates parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        for &(v, id) in &self.params {
            if let Some(g) = grads.get(v) {
                add_into(store.get_mut(id).grad_mut(), g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.needs(*a) {
                    kernels::matmul_nt_acc(g, self.value(*b), self.slot(grads, *a), m, k, n);
                }
                if self.needs(*b) {
                    kernels::matmul_tn_acc(self.value(*a), g, self.slot(grads, *b), m, k, n);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let gt = kernels::transpose(g, rows, cols);
                    add_into(self.slot(grads, *a), &gt);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.needs(*x) {
                        add_into(self.slot(grads, *x), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.needs(*bias) {
                    let dst = self.slot(grads, *bias);
                    for row in g.chunks_exact(cols.max(1)) {
                        add_into(dst, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    for ((d, &gi), &bi) in self.slot(grads, *a).iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    for ((d, &gi), &ai) in self.slot(grads, *b).iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    for (d, &gi) in self.slot(grads, *a).iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let out = &node.value;
                    for ((d, &gi), &o) in self.slot(grads, *a).iter_mut().zip(g).zip(out.iter()) {
                        if o > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let p = &node.value;
                    let dst = self.slot(grads, *a);
                    for ((drow, grow), prow) in dst
                        .chunks_exact_mut(cols.max(1))
                        .zip(g.chunks_exact(cols.max(1)))
                        .zip(p.chunks_exact(cols.max(1)))
                    {
                        let dot = grow.iter().zip(prow).map(|(&x, &y)| x * y).sum::<T>();
                        for ((d, &gi), &pi) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += pi * (gi - dot);
                        }
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
                let c = cols.max(1);
                if self.needs(*gamma) {
                    let dst = self.slot(grads, *gamma);
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &gi), &hi) in dst.iter_mut().zip(grow).zip(hrow) {
                            *d += gi * hi;
                        }
                    }
                }
                if self.needs(*beta) {
                    let dst = self.slot(grads, *beta);
                    for grow in g.chunks_exact(c) {
                        add_into(dst, grow);
                    }
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma);
                    let inv_c = T::one() / T::lit(cols as f64);
                    let dst = self.slot(grads, *x);
                    for (r, ((drow, grow), hrow)) in dst
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .enumerate()
                    {
                        let dxhat: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_c;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for ((d, &dh), &h) in drow.iter_mut().zip(&dxhat).zip(hrow) {
                            *d += rstd[r] * (dh - mean_d - h * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let d = cols;
                    let dst = self.slot(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dst[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.needs(*x) {
                    let (r, c) = self.dims(*x);
                    let dst = self.slot(grads, *x);
                    if *axis == 0 {
                        let inv = T::one() / T::lit(r as f64);
                        for drow in dst.chunks_exact_mut(c.max(1)) {
                            for (d, &gi) in drow.iter_mut().zip(g) {
                                *d += gi * inv;
                            }
                        }
                    } else {
                        let inv = T::one() / T::lit(c as f64);
                        for (drow, &gi) in dst.chunks_exact_mut(c.max(1)).zip(g) {
                            drow.iter_mut().for_each(|d| *d += gi * inv);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            add_into(self.slot(grads, p), &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                } else {
                    let mut col = 0;
                    for &p in parts {
                        let (r, c) = self.dims(p);
                        if self.needs(p) {
                            let dst = self.slot(grads, p);
                            for i in 0..r {
                                add_into(&mut dst[i * c..(i + 1) * c], &g[i * cols + col..][..c]);
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if self.needs(*x) {
                    for ((d, &gi), &m) in self.slot(grads, *x).iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let c = self.dims(*x).1;
                    let dst = self.slot(grads, *x);
                    for (drow, grow) in dst.chunks_exact_mut(c.max(1)).zip(g.chunks_exact(cols.max(1))) {
                        add_into(&mut drow[*start..*start + cols], grow);
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gi = g[0];
                    self.slot(grads, *x).iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                segments,
                probs,
            } => self.attention_backward(g, cols, (*q, *k, *v), *heads, *causal, segments, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                if self.needs(*logits) {
                    let vocab = self.dims(*logits).1;
                    let coeff = g[0] * *scale;
                    let dst = self.slot(grads, *logits);
                    for (i, &t) in targets.iter().enumerate() {
                        let drow = &mut dst[i * vocab..(i + 1) * vocab];
                        for (d, &p) in drow.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                            *d += coeff * p;
                        }
                        drow[t] -= coeff;
                    }
                }
            }
            Op::NegLogPick {
                probs,
                labels,
                eps,
                scale,
            } => {
                if self.needs(*probs) {
                    let l = self.dims(*probs).1;
                    let coeff = g[0] * *scale;
                    let p = Arc::clone(&self.node(*probs).value);
                    let dst = self.slot(grads, *probs);
                    for (j, &s) in labels.iter().enumerate() {
                        let pj = p[j * l + s];
                        if pj > *eps {
                            dst[j * l + s] -= coeff / pj;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        d: usize,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        causal: bool,
        segments: &[Segment],
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut base = 0;
        let mut ds = Vec::new();
        for s in segments {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..s.q_len {
                    let visible = if causal { i + 1 } else { s.k_len };
                    let prow = &probs[base + i * s.k_len..][..visible];
                    let qr = (s.q_start + i) * d + col;
                    let grow = &g[qr..qr + dh];
                    ds.clear();
                    let mut dot = T::zero();
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vv[(s.k_start + j) * d + col..][..dh];
                        let dp = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                        ds.push(dp);
                        dot += p * dp;
                    }
                    for (j, &p) in prow.iter().enumerate() {
                        let kr = (s.k_start + j) * d + col;
                        let dsj = p * (ds[j] - dot) * scale;
                        for c in 0..dh {
                            dq[qr + c] += dsj * kv[kr + c];
                            dk[kr + c] += dsj * qv[qr + c];
                            dv[kr + c] += p * grow[c];
                        }
                    }
                }
                base += s.q_len * s.k_len;
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                add_into(self.slot(grads, var), &grad);
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.node(v).value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}
