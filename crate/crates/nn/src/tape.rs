use rand::Rng;

use crate::{NnError, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

/// Linear record of forward computations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a[.., k] @ b[k, n]`; leading axes of `a` are folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(NnError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = av.rows_cols();
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(NnError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = xv.rows_cols();
        if bv.shape() != [cols] {
            return Err(NnError::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let b = bv.data();
        let out: Vec<T> = xv
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, bias }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::shape(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma`/`beta` (both `[cols]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = xv.rows_cols();
        if gv.shape() != [cols] || bv.shape() != [cols] {
            return Err(NnError::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
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

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(NnError::shape("softmax", "scalar input"));
        }
        let (_, cols) = xv.rows_cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| gelu(v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x }, rg)
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(NnError::shape("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(NnError::Index {
                    op: "embedding",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[batch * seq, dim]` with `dim` split evenly across
    /// `heads`. Position `i` attends to keys `j <= i` whose `key_valid[j]` is
    /// set, and always to itself. An empty `key_valid` marks every key valid.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.rows_cols();
        if kv.shape() != qv.shape()
            || vv.shape() != qv.shape()
            || rows != batch * seq
            || heads == 0
            || dim % heads != 0
            || !(key_valid.is_empty() || key_valid.len() == rows)
        {
            return Err(NnError::shape(
                "causal_attention",
                format!(
                    "q {:?} k {:?} v {:?} batch {batch} seq {seq} heads {heads} mask {}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape(),
                    key_valid.len()
                ),
            ));
        }
        let dh = dim / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let valid = |r: usize| key_valid.is_empty() || key_valid[r];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * dim];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * dim + off..][..dh];
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        if j != i && !valid(b * seq + j) {
                            continue;
                        }
                        let kj = &kd[(b * seq + j) * dim + off..][..dh];
                        let s = dot(qi, kj) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for j in 0..=i {
                        if j != i && !valid(b * seq + j) {
                            prow[j] = T::zero();
                            continue;
                        }
                        let e = (prow[j] - max).exp();
                        prow[j] = e;
                        total = total + e;
                    }
                    let orow = &mut out[(b * seq + i) * dim + off..][..dh];
                    for j in 0..=i {
                        let p = prow[j] / total;
                        prow[j] = p;
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * dim + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Stacks 2-D tensors with a common column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NnError::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).rows_cols().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.rows_cols();
            if c != cols || pv.shape().is_empty() {
                return Err(NnError::shape(
                    "concat_rows",
                    format!("column mismatch {c} vs {cols}"),
                ));
            }
            rows += r;
            out.extend_from_slice(pv.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Picks rows of `x` (viewed as a matrix) in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, cols) = xv.rows_cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(NnError::Index {
                    op: "select_rows",
                    index: r,
                    limit: n,
                });
            }
            out.extend_from_slice(&xv.data()[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), cols], out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. A rate of zero returns `x` untouched.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Mean negative log-likelihood over rows with non-zero `weights`.
    ///
    /// `weights` acts as an element mask; the loss is
    /// `sum_i w_i * nll_i / sum_i w_i` and zero when every weight is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.rows_cols();
        if lv.shape().is_empty() || targets.len() != rows || weights.len() != rows {
            return Err(NnError::shape(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} weights",
                    lv.shape(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let mut probs = lv.data().to_vec();
        let denom: T = weights.iter().copied().sum();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let t = targets[r];
            if t >= classes {
                return Err(NnError::Index {
                    op: "cross_entropy",
                    index: t,
                    limit: classes,
                });
            }
            let logit_t = row[t];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            softmax_in_place(row);
            if weights[r] != T::zero() {
                loss = loss + weights[r] * (lse - logit_t);
            }
        }
        let value = if denom > T::zero() {
            loss / denom
        } else {
            T::zero()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                denom,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.rows_cols();
                let n = bv.shape()[1];
                if needs(*a) {
                    // dA = dC @ B^T
                    let mut bt = vec![T::zero(); n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv.data()[p * n + j];
                        }
                    }
                    let ga = slot(grads, *a, m * k);
                    matmul_into(g, &bt, ga, m, n, k);
                }
                if needs(*b) {
                    // dB = A^T @ dC
                    let gb = slot(grads, *b, k * n);
                    let ad = av.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == T::zero() {
                                continue;
                            }
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o = *o + a_ip * x;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), g, T::one());
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    axpy(slot(grads, *x, g.len()), g, T::one());
                }
                if needs(*bias) {
                    let cols = self.value(*bias).len();
                    let gb = slot(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o = *o + gi * y;
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o = *o + gi * x;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if needs(*x) {
                    axpy(slot(grads, *x, g.len()), g, *factor);
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    let gx = slot(grads, *x, n);
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
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
                let cols = self.value(*gamma).len();
                let rows = rstd.len();
                let gamma_v = self.value(*gamma).data();
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] = gg[c] + g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for row in g.chunks(cols) {
                        axpy(gb, row, T::one());
                    }
                }
                if needs(*x) {
                    let n = T::from_f64(cols as f64);
                    let gx = slot(grads, *x, rows * cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gamma_v[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dh = dxhat
                            .iter()
                            .zip(hr)
                            .map(|(&d, &h)| d * h)
                            .sum::<T>()
                            / n;
                        for c in 0..cols {
                            let o = &mut gx[r * cols + c];
                            *o = *o + rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (_, cols) = node.value.rows_cols();
                    let gx = slot(grads, *x, y.len());
                    for ((yr, gr), or) in y
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            or[c] = or[c] + yr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if needs(*x) {
                    let xv = self.value(*x).data();
                    let gx = slot(grads, *x, xv.len());
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gi * gelu_grad(v);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let tv = self.value(*table);
                    let dim = tv.shape()[1];
                    let gt = slot(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * dim..(id + 1) * dim],
                            &g[r * dim..(r + 1) * dim],
                            T::one(),
                        );
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, g, grads),
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if needs(p) {
                        axpy(slot(grads, p, n), &g[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, rows } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let (_, cols) = xv.rows_cols();
                    let gx = slot(grads, *x, xv.len());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(
                            &mut gx[r * cols..(r + 1) * cols],
                            &g[i * cols..(i + 1) * cols],
                            T::one(),
                        );
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gi * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                if needs(*logits) && *denom > T::zero() {
                    let classes = probs.len() / targets.len().max(1);
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        if weights[r] == T::zero() {
                            continue;
                        }
                        let w = g[0] * weights[r] / *denom;
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            let o = &mut gl[r * classes + c];
                            *o = *o + w * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.rows_cols();
        let dh = dim / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut gq = vec![T::zero(); rows * dim];
        let mut gk = vec![T::zero(); rows * dim];
        let mut gv = vec![T::zero(); rows * dim];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let gi = &g[(b * seq + i) * dim + off..][..dh];
                    let mut inner = T::zero();
                    for j in 0..=i {
                        let p = prow[j];
                        if p == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * dim + off..][..dh];
                        dp[j] = dot(gi, vj);
                        inner = inner + p * dp[j];
                        axpy(&mut gv[(b * seq + j) * dim + off..][..dh], gi, p);
                    }
                    let qi = &qd[(b * seq + i) * dim + off..][..dh];
                    for j in 0..=i {
                        let p = prow[j];
                        if p == T::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - inner) * scale;
                        let kj = &kd[(b * seq + j) * dim + off..][..dh];
                        axpy(&mut gq[(b * seq + i) * dim + off..][..dh], kj, ds);
                        axpy(&mut gk[(b * seq + j) * dim + off..][..dh], qi, ds);
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                axpy(slot(grads, var, rows * dim), &local, T::one());
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut [T] {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], alpha: T) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a = *a + alpha * b;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// `out[m, n] += a[m, k] @ b[k, n]`; zero entries of `a` are skipped.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total = total + *z;
    }
    for z in row.iter_mut() {
        *z = *z / total;
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
