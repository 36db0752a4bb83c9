//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; `backward` walks it from the loss down to index 0.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            // 0.5 (1 + tanh u) = sigmoid(2u), one exp instead of tanh.
            Activation::Gelu => x * gelu_gate(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let s = gelu_gate(x);
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                s + 2.0 * x * s * (1.0 - s) * dinner
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu_gate(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Sum(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    Activation(Var, Activation),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` if the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c = beta * c + op(a) * op(b)` for logical shapes `[m, k] x [k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold exactly the element counts implied by the
    // dimensions and strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; gradients still flow to it and can be read back.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Elementwise add; `b` may also be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect()
        } else {
            let (_, cols) = ta.dims2()?;
            let (brows, bcols) = tb.dims2()?;
            if brows != 1 || bcols != cols {
                return Err(mismatch("add", ta, tb));
            }
            let mut out = ta.data().to_vec();
            for row in out.chunks_exact_mut(cols) {
                row.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
            }
            out
        };
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, factor))
    }

    /// Concatenate two matrices with equal row counts along the column axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if ra != rb {
            return Err(mismatch("concat", ta, tb));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(t, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Rows of `table` selected by `indices`, shape `[indices.len(), dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, dim) = tt.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= vocab {
                return Err(TensorError::InvalidInput(format!(
                    "embedding index {i} out of range for vocabulary {vocab}"
                )));
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![indices.len(), dim], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-row normalization over the last axis followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = tx.dims2()?;
        if tg.len() != cols || tb.len() != cols {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(tx.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, width]`; rows of each sequence are
    /// contiguous and position `i` attends to positions `0..=i` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        let (rows, width) = tq.dims2()?;
        if heads == 0 || width % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::InvalidInput(format!(
                "attention: width {width} / heads {heads} / rows {rows} / seq_len {seq_len} incompatible"
            )));
        }
        let batch = rows / seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = (b * seq_len + i) * width + h * dh;
                    for j in 0..=i {
                        let kj = (b * seq_len + j) * width + h * dh;
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += qd[qi + d] * kd[kj + d];
                        }
                        scores[j] = s * scale;
                    }
                    let p = &mut probs[base + i * seq_len..base + i * seq_len + i + 1];
                    softmax_into(&scores[..=i], p);
                    let oi = (b * seq_len + i) * width + h * dh;
                    for j in 0..=i {
                        let vj = (b * seq_len + j) * width + h * dh;
                        let pj = p[j];
                        for d in 0..dh {
                            out[oi + d] += pj * vd[vj + d];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| act.apply(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Activation(x, act))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2()?;
        if targets.len() != rows {
            return Err(TensorError::InvalidInput(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::InvalidInput(
                "cross_entropy: no target positions".into(),
            ));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let row = tl.row(r);
            softmax_into(row, &mut probs[r * cols..(r + 1) * cols]);
            if let Some(t) = targets[r] {
                if t >= cols {
                    return Err(TensorError::InvalidInput(format!(
                        "cross_entropy: target {t} out of range for {cols} classes"
                    )));
                }
                total -= log_softmax_at(row, t);
            }
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() || target.is_empty() {
            return Err(TensorError::InvalidInput(format!(
                "mse: {} predictions vs {} targets",
                tp.len(),
                target.len()
            )));
        }
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. A graph can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                match params.get_mut(&pid) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(pid, g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        macro_rules! slot {
            ($v:expr) => {
                slot_mut(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let (_, n) = tb.dims2().unwrap();
                gemm(m, n, k, gout, false, tb.data(), true, slot!(*a), 1.0);
                gemm(k, m, n, ta.data(), true, gout, false, slot!(*b), 1.0);
            }
            Op::Add(a, b) => {
                let ga = slot!(*a);
                ga.iter_mut().zip(gout).for_each(|(x, g)| *x += g);
                let same = self.value(*a).shape() == self.value(*b).shape();
                let gb = slot!(*b);
                if same {
                    gb.iter_mut().zip(gout).for_each(|(x, g)| *x += g);
                } else {
                    for row in gout.chunks_exact(gb.len()) {
                        gb.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                slot!(*a).iter_mut().zip(&da).for_each(|(x, g)| *x += g);
                slot!(*b).iter_mut().zip(&db).for_each(|(x, g)| *x += g);
            }
            Op::Scale(a, f) => {
                slot!(*a)
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(x, g)| *x += g * f);
            }
            Op::Concat(a, b) => {
                let (_, ca) = self.value(*a).dims2().unwrap();
                let (rows, cb) = self.value(*b).dims2().unwrap();
                let w = ca + cb;
                let ga = slot!(*a);
                for r in 0..rows {
                    for c in 0..ca {
                        ga[r * ca + c] += gout[r * w + c];
                    }
                }
                let gb = slot!(*b);
                for r in 0..rows {
                    for c in 0..cb {
                        gb[r * cb + c] += gout[r * w + ca + c];
                    }
                }
            }
            Op::Sum(a) => {
                slot!(*a).iter_mut().for_each(|x| *x += gout[0]);
            }
            Op::Embedding { table, indices } => {
                let (_, dim) = self.value(*table).dims2().unwrap();
                let gt = slot!(*table);
                for (r, &i) in indices.iter().enumerate() {
                    for d in 0..dim {
                        gt[i * dim + d] += gout[r * dim + d];
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
                let (rows, cols) = self.value(*x).dims2().unwrap();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let gb = slot!(*beta);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += gout[r * cols + c];
                        }
                    }
                }
                {
                    let gg = slot!(*gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += gout[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                let gx = slot!(*x);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let d = gout[r * cols + c] * gam[c];
                        dxhat[c] = d;
                        mean_d += d;
                        mean_dx += d * xhat[r * cols + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] +=
                            rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (rows, cols) = node.value.dims2().unwrap();
                let gx = slot!(*x);
                for r in 0..rows {
                    let s = r * cols;
                    let dot: f64 = (0..cols).map(|c| gout[s + c] * y[s + c]).sum();
                    for c in 0..cols {
                        gx[s + c] += y[s + c] * (gout[s + c] - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (heads, seq_len) = (*heads, *seq_len);
                let (rows, width) = self.value(*q).dims2().unwrap();
                let batch = rows / seq_len;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let mut dp = vec![0.0; seq_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seq_len * seq_len;
                        for i in 0..seq_len {
                            let oi = (b * seq_len + i) * width + h * dh;
                            let p = &probs[base + i * seq_len..base + i * seq_len + i + 1];
                            for j in 0..=i {
                                let vj = (b * seq_len + j) * width + h * dh;
                                let mut s = 0.0;
                                for d in 0..dh {
                                    s += gout[oi + d] * vd[vj + d];
                                    dv[vj + d] += p[j] * gout[oi + d];
                                }
                                dp[j] = s;
                            }
                            let dot: f64 = (0..=i).map(|j| dp[j] * p[j]).sum();
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = (b * seq_len + j) * width + h * dh;
                                for d in 0..dh {
                                    dq[oi + d] += ds * kd[kj + d];
                                    dk[kj + d] += ds * qd[oi + d];
                                }
                            }
                        }
                    }
                }
                slot!(*q).iter_mut().zip(&dq).for_each(|(x, g)| *x += g);
                slot!(*k).iter_mut().zip(&dk).for_each(|(x, g)| *x += g);
                slot!(*v).iter_mut().zip(&dv).for_each(|(x, g)| *x += g);
            }
            Op::Activation(x, act) => {
                let len = self.nodes[x.0].value.len();
                let gx = slot_mut(grads, *x, len);
                let xs = self.nodes[x.0].value.data();
                for ((acc, g), &xi) in gx.iter_mut().zip(gout).zip(xs) {
                    *acc += g * act.derivative(xi);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, cols) = self.value(*logits).dims2().unwrap();
                let scale = gout[0] / *count as f64;
                let gl = slot!(*logits);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for c in 0..cols {
                            gl[r * cols + c] += scale * probs[r * cols + c];
                        }
                        gl[r * cols + t] -= scale;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data().to_vec();
                let n = target.len() as f64;
                let gp = slot!(*pred);
                for i in 0..p.len() {
                    gp[i] += gout[0] * 2.0 * (p[i] - target[i]) / n;
                }
            }
        }
    }
}

fn slot_mut(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `log softmax(x)[i]`, computed with the max-shift.
pub fn log_softmax_at(x: &[f64], i: usize) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x[i] - lse
}

/// Row-wise softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}
