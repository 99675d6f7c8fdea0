//! Dynamically built computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse. Every op
//! checks its output for non-finite values and fails instead of propagating
//! NaN/Inf.

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::unit_hash;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule for an op whose forward value is computed outside the graph.
pub trait CustomBackward<S: Scalar>: Send + Sync {
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>)
        -> Vec<Tensor<S>>;
}

/// Identifies one dropout mask: a pure function of these three numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub instance: u64,
    pub step: u64,
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Softmax(Var),
    Dropout {
        x: Var,
        scale_mask: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    MaskedMeanPool {
        x: Var,
        valid: Vec<bool>,
        count: usize,
    },
    MaskRows {
        x: Var,
        valid: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    DotConst {
        x: Var,
        w: Tensor<S>,
    },
    Custom {
        inputs: Vec<Var>,
        f: Box<dyn CustomBackward<S>>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::from_parts(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    /// `x (m×n) + b` with `b` broadcast over rows; `b` holds `n` values.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(shape_err(format!(
                "row bias {:?} for {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_op(out, Op::AddRow(x, b), &[x, b])
    }

    /// Fully connected layer: `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push_op(out, Op::Scale(x, s), &[x])
    }

    /// Adds a constant tensor of the same shape (no gradient to the constant).
    pub fn add_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err(format!(
                "add_const {:?} + {:?}",
                tx.shape(),
                c.shape()
            )));
        }
        let data = tx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_op(out, Op::AddConst(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push_op(out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_fwd(v).0);
        self.push_op(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push_op(out, Op::Sigmoid(x), &[x])
    }

    /// Stride-1, zero "same" padding convolution over the time axis.
    ///
    /// `x`: T×D, `w`: K×D×C with K odd, `b`: C values. Output T×C; row `t`
    /// reads input rows `t-K/2 ..= t+K/2`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.shape().len() != 3 {
            return Err(shape_err(format!("conv kernel must be K×D×C, got {:?}", tw.shape())));
        }
        let (kk, d, c) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if kk % 2 == 0 {
            return Err(shape_err(format!("conv kernel size must be odd, got {kk}")));
        }
        if tx.shape().len() != 2 || tx.cols() != d {
            return Err(shape_err(format!(
                "conv input {:?} does not match kernel {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        if tb.numel() != c {
            return Err(shape_err(format!("conv bias {:?} for {c} channels", tb.shape())));
        }
        let t = tx.rows();
        let half = kk / 2;
        let mut out = vec![S::zero(); t * c];
        for row in out.chunks_mut(c) {
            row.copy_from_slice(tb.data());
        }
        for k in 0..kk {
            let wk = &tw.data()[k * d * c..(k + 1) * d * c];
            for (ti, orow) in out.chunks_mut(c).enumerate() {
                let src = ti + k;
                if src < half || src - half >= t {
                    continue;
                }
                let xrow = tx.row(src - half);
                for (di, &xv) in xrow.iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    for (o, &wv) in orow.iter_mut().zip(&wk[di * c..(di + 1) * c]) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![t, c], out);
        self.push_op(out, Op::Conv1d { x, w, b }, &[x, w, b])
    }

    /// Per-row layer normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err(format!(
                "layer_norm affine {:?}/{:?} for {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        let dn = S::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            // Shifted mean: exact for constant rows.
            let x0 = row[0];
            let mean = x0 + row.iter().map(|&v| v - x0).sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            softmax_into(row, &mut out);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push_op(out, Op::Softmax(x), &[x])
    }

    /// Inverted dropout. Identity when `train` is false or `p` is zero.
    pub fn dropout(&mut self, x: Var, p: f64, key: DropoutKey, train: bool) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::config("dropout", format!("probability {p} not in [0,1)")));
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let tx = self.value(x);
        let scale_mask: Vec<S> = (0..tx.numel())
            .map(|i| {
                let u = unit_hash(&[key.seed, key.instance, key.step, i as u64]);
                if u < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx
            .data()
            .iter()
            .zip(&scale_mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_op(out, Op::Dropout { x, scale_mask }, &[x])
    }

    /// Scaled dot-product attention split over `heads`.
    ///
    /// `q`: Tq×D, `k`/`v`: Tk×D. `key_valid[j] == false` hides key `j`
    /// (additive −∞ mask): it gets exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("model dim {d} not divisible by {heads} heads")));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err(format!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        if key_valid.len() != nk {
            return Err(shape_err(format!(
                "key mask length {} for {nk} keys",
                key_valid.len()
            )));
        }
        if !key_valid.iter().any(|&m| m) {
            return Err(Error::Precondition("all attention keys are masked".into()));
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![S::zero(); heads * nq * nk];
        let mut out = vec![S::zero(); nq * d];
        let mut scores = Vec::with_capacity(nk);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let qi = &tq.row(i)[cols.clone()];
                scores.clear();
                for j in 0..nk {
                    if key_valid[j] {
                        let kj = &tk.row(j)[cols.clone()];
                        scores.push(qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale);
                    }
                }
                let mx = scores.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for s in &mut scores {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut it = scores.iter();
                for j in 0..nk {
                    if key_valid[j] {
                        prow[j] = *it.next().unwrap() / z;
                    }
                }
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..nk {
                    let p = prow[j];
                    if p == S::zero() {
                        continue;
                    }
                    for (o, &vv) in orow.iter_mut().zip(&tv.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![nq, d], out);
        self.push_op(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean over the rows flagged valid; output 1×D.
    pub fn masked_mean_pool(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if valid.len() != tx.rows() {
            return Err(shape_err(format!(
                "pool mask length {} for {} frames",
                valid.len(),
                tx.rows()
            )));
        }
        let count = valid.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Precondition("all frames are masked".into()));
        }
        let d = tx.cols();
        let mut acc = vec![S::zero(); d];
        for (i, _) in valid.iter().enumerate().filter(|(_, &m)| m) {
            for (a, &v) in acc.iter_mut().zip(tx.row(i)) {
                *a += v;
            }
        }
        let n = S::from_usize(count).unwrap();
        for a in &mut acc {
            *a /= n;
        }
        let out = Tensor::from_parts(vec![1, d], acc);
        self.push_op(
            out,
            Op::MaskedMeanPool {
                x,
                valid: valid.to_vec(),
                count,
            },
            &[x],
        )
    }

    /// Zeroes the rows flagged invalid.
    pub fn mask_rows(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if valid.len() != tx.rows() {
            return Err(shape_err(format!(
                "row mask length {} for {} rows",
                valid.len(),
                tx.rows()
            )));
        }
        if valid.iter().all(|&m| m) {
            return Ok(x);
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for (row, &m) in data.chunks_mut(d).zip(valid) {
            if !m {
                row.fill(S::zero());
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push_op(
            out,
            Op::MaskRows {
                x,
                valid: valid.to_vec(),
            },
            &[x],
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat of nothing".into()));
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat of nothing".into()));
        };
        let cols = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(shape_err("concat_rows column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push_op(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `Σ x ⊙ w` for a constant `w`; scalar output.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<S>) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != w.numel() {
            return Err(shape_err(format!("dot {:?} . {:?}", tx.shape(), w.shape())));
        }
        let s: S = tx.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        self.push_op(Tensor::scalar(s), Op::DotConst { x, w: w.clone() }, &[x])
    }

    /// Records an externally computed value with its own gradient rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<S>,
        f: Box<dyn CustomBackward<S>>,
    ) -> Result<Var> {
        self.push_op(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            inputs,
        )
    }

    /// Backpropagates from a single-element `root`.
    ///
    /// Every trainable leaf gets a gradient, zero if it does not reach `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(shape_err(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            if leaf {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                } else if !grads[i].as_ref().unwrap().is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at leaf {i}")));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let n = g.cols();
                    let mut gb = vec![S::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| gv * gelu_fwd(xv).1)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (S::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let d = g.cols();
                let dn = S::from_usize(d).unwrap();
                if self.requires_grad(*x) {
                    let mut gx = Vec::with_capacity(g.numel());
                    let mut dxhat = vec![S::zero(); d];
                    for (i, grow) in g.data().chunks(d).enumerate() {
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * tg.data()[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xh[j];
                        }
                        let c = inv_std[i] / dn;
                        for j in 0..d {
                            gx.push(c * (dn * dxhat[j] - s1 - xh[j] * s2));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![S::zero(); d];
                    let mut gb = vec![S::zero(); d];
                    for (i, grow) in g.data().chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += grow[j] * xhat[i * d + j];
                            gb[j] += grow[j];
                        }
                    }
                    let sg = tg.shape().to_vec();
                    let sb = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::from_parts(sg, gg));
                    self.accumulate(grads, *beta, Tensor::from_parts(sb, gb));
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = Vec::with_capacity(out.numel());
                for (yrow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    gx.extend(yrow.iter().zip(grow).map(|(&y, &gv)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::Dropout { x, scale_mask } => {
                let d = g.data().iter().zip(scale_mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::MaskedMeanPool { x, valid, count } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let n = S::from_usize(*count).unwrap();
                let mut gx = vec![S::zero(); tx.numel()];
                for (row, &m) in gx.chunks_mut(d).zip(valid) {
                    if m {
                        for (r, &gv) in row.iter_mut().zip(g.data()) {
                            *r = gv / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::MaskRows { x, valid } => {
                let d = g.cols();
                let mut gx = g.data().to_vec();
                for (row, &m) in gx.chunks_mut(d).zip(valid) {
                    if !m {
                        row.fill(S::zero());
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(shape, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        let shape = self.value(p).shape().to_vec();
                        let d = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(shape, d));
                    }
                    offset += n;
                }
            }
            Op::DotConst { x, w } => {
                let s = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                let d = w.data().iter().map(|&v| v * s).collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::Custom { inputs, f } => {
                let ins: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = f.backward(&ins, out, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, gv);
                }
            }
        }
    }

    fn conv1d_backward(&self, x: Var, w: Var, b: Var, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (kk, d, c) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        let t = tx.rows();
        let half = kk / 2;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut gx = vec![S::zero(); if need_x { t * d } else { 0 }];
        let mut gw = vec![S::zero(); if need_w { kk * d * c } else { 0 }];
        for k in 0..kk {
            let wk = &tw.data()[k * d * c..(k + 1) * d * c];
            for ti in 0..t {
                let src = ti + k;
                if src < half || src - half >= t {
                    continue;
                }
                let s = src - half;
                let grow = g.row(ti);
                if need_x {
                    let gxrow = &mut gx[s * d..(s + 1) * d];
                    for (di, gxv) in gxrow.iter_mut().enumerate() {
                        let wrow = &wk[di * c..(di + 1) * c];
                        *gxv += wrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
                if need_w {
                    let xrow = tx.row(s);
                    let gwk = &mut gw[k * d * c..(k + 1) * d * c];
                    for (di, &xv) in xrow.iter().enumerate() {
                        if xv == S::zero() {
                            continue;
                        }
                        for (gwv, &gv) in gwk[di * c..(di + 1) * c].iter_mut().zip(grow) {
                            *gwv += xv * gv;
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(tx.shape().to_vec(), gx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_parts(tw.shape().to_vec(), gw));
        }
        if self.requires_grad(b) {
            let mut gb = vec![S::zero(); c];
            for row in g.data().chunks(c) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let shape = self.value(b).shape().to_vec();
            self.accumulate(grads, b, Tensor::from_parts(shape, gb));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[S],
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (nq, nk) = (tq.rows(), tk.rows());
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut gq = vec![S::zero(); nq * d];
        let mut gk = vec![S::zero(); nk * d];
        let mut gv = vec![S::zero(); nk * d];
        let mut dp = vec![S::zero(); nk];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..nq {
                let prow = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let go = &g.row(i)[c0..c0 + dh];
                let mut dot = S::zero();
                for j in 0..nk {
                    let p = prow[j];
                    if p == S::zero() {
                        dp[j] = S::zero();
                        continue;
                    }
                    let vj = &tv.row(j)[c0..c0 + dh];
                    dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += p * dp[j];
                    for (acc, &gov) in gv[j * d + c0..j * d + c0 + dh].iter_mut().zip(go) {
                        *acc += p * gov;
                    }
                }
                let qi = &tq.row(i)[c0..c0 + dh];
                for j in 0..nk {
                    let p = prow[j];
                    if p == S::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - dot) * scale;
                    let kj = &tk.row(j)[c0..c0 + dh];
                    for (acc, &kv) in gq[i * d + c0..i * d + c0 + dh].iter_mut().zip(kj) {
                        *acc += ds * kv;
                    }
                    for (acc, &qv) in gk[j * d + c0..j * d + c0 + dh].iter_mut().zip(qi) {
                        *acc += ds * qv;
                    }
                }
            }
        }
        self.accumulate(grads, q, Tensor::from_parts(vec![nq, d], gq));
        self.accumulate(grads, k, Tensor::from_parts(vec![nk, d], gk));
        self.accumulate(grads, v, Tensor::from_parts(vec![nk, d], gv));
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Conv1d { .. } => "conv1d",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(..) => "softmax",
        Op::Dropout { .. } => "dropout",
        Op::Attention { .. } => "attention",
        Op::MaskedMeanPool { .. } => "masked_mean_pool",
        Op::MaskRows { .. } => "mask_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::DotConst { .. } => "dot_const",
        Op::Custom { .. } => "custom",
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu_fwd<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (S::one() + th);
    let dinner = c * (S::one() + S::lit(3.0) * a * x * x);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * dinner;
    (y, dy)
}

pub(crate) fn softmax_into<S: Scalar>(row: &[S], out: &mut Vec<S>) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let start = out.len();
    let mut z = S::zero();
    for &v in row {
        let e = (v - mx).exp();
        z += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= z;
    }
}
