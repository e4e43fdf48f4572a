//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its variables. Nodes are
//! appended in evaluation order, so walking the node list backwards visits
//! them in reverse topological order; [`Tape::backward`] relies on that.
//!
//! ```
//! use stpc::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```
//!
//! Besides the generic primitives (matmul, broadcasting add/mul, leaky-relu,
//! exp, concat, gather, reductions, softmax) the tape has fused kernels for
//! the neighborhood operations the point convolution needs: row-wise cosine
//! similarity, coefficient-weighted neighbor projection and neighbor pooling.
//! Fusing them keeps the saved state proportional to the output instead of
//! materializing `N×K×M×C` intermediates.

use crate::error::{Error, Result};
use crate::kernels::{self, axis_split, dot};
use crate::tensor::Tensor;

/// Lower bound on every cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pooling applied over each point's neighbor rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Max,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Exp(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Softmax(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    Threshold(Var, f64),
    Project {
        alpha: Var,
        feats: Var,
        index: Vec<usize>,
    },
    Pool {
        feats: Var,
        index: Vec<usize>,
        k: usize,
        mode: Pool,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of primitive applications for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    faulty_backward: bool,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Makes the leaky-relu backward rule deliberately wrong.
    ///
    /// Only useful for checking that a gradient checker notices.
    #[doc(hidden)]
    pub fn set_faulty_backward(&mut self, faulty: bool) {
        self.faulty_backward = faulty;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and its saved values.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts_unchecked(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Element-wise sum. `b` may have the shape of a trailing suffix of
    /// `a`'s shape (or be a scalar) and is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add(a, b))
    }

    /// Element-wise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let shape = sa.to_vec();
        let bd = self.data(b);
        let width = bd.len();
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(width)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), op(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * s).collect();
        let t = Tensor::from_parts_unchecked(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a);
        let out = v
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::from_parts_unchecked(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::from_parts_unchecked(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat input"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Concat(parts.to_vec()), rg))
    }

    /// Selects rows along axis 0: `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() || index.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let rows = s[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather", s, &[bad]));
        }
        let width = self.value(a).len() / rows;
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = s.to_vec();
        shape[0] = index.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Gather(a, index.to_vec()), rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(mismatch("reduce", s, &[axis]));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), op, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(mismatch("softmax", s, &[axis]));
        }
        if !self.value(a).is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(s, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let shape = s.to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::Softmax(a, axis), rg))
    }

    /// Mean negative log-softmax of `logits[N×C]` at the labelled classes.
    ///
    /// Rows whose label equals `ignore` do not contribute. When every row is
    /// ignored the loss is 0 and carries a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: Option<usize>) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", s, &[labels.len()]));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let classes = s[1];
        let mut targets = Vec::with_capacity(labels.len());
        for &l in labels {
            if Some(l) == ignore {
                targets.push(None);
            } else if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            } else {
                targets.push(Some(l));
            }
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, &x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            if let Some(t) = *target {
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Cosine similarity between every row of `a[R×c]` and every row of
    /// `b[M×c]`, giving `[R×M]`. Each denominator `|a||b|` is clamped
    /// below at [`COSINE_EPS`], so zero rows give 0 and the result is
    /// exactly scale free otherwise.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("cosine_similarity", sa, sb));
        }
        let (r, m, c) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let norms_a: Vec<f64> = ad.chunks_exact(c).map(|x| dot(x, x).sqrt()).collect();
        let norms_b: Vec<f64> = bd.chunks_exact(c).map(|x| dot(x, x).sqrt()).collect();
        let dots = kernels::matmul(ad, &kernels::transpose(bd, m, c), r, c, m);
        let mut out = dots;
        for (row, &na) in out.chunks_exact_mut(m).zip(&norms_a) {
            for (v, &nb) in row.iter_mut().zip(&norms_b) {
                *v /= (na * nb).max(COSINE_EPS);
            }
        }
        let rg = self.rg(&[a, b]);
        let op = Op::Cosine {
            a,
            b,
            norms_a,
            norms_b,
        };
        Ok(self.push(Tensor::from_parts_unchecked(vec![r, m], out), op, rg))
    }

    /// Zeroes entries below `tau`. Surviving entries pass gradients
    /// through unchanged; zeroed entries pass none.
    pub fn threshold(&mut self, a: Var, tau: f64) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| if x >= tau { x } else { 0.0 }).collect();
        let t = Tensor::from_parts_unchecked(v.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        self.push(t, Op::Threshold(a, tau), rg)
    }

    /// Coefficient-weighted projection of neighbor features onto slots.
    ///
    /// With `alpha[N×K×M]`, `feats[P×C]` and `index` holding `N·K` row
    /// indices into `feats`, produces `out[N×M×C]` where
    /// `out[i,m] = Σ_k alpha[i,k,m] · feats[index[i·K + k]]`.
    pub fn project_neighbors(&mut self, alpha: Var, feats: Var, index: &[usize]) -> Result<Var> {
        let (sa, sf) = (self.shape(alpha), self.shape(feats));
        if sa.len() != 3 || sf.len() != 2 || sa[0] * sa[1] != index.len() {
            return Err(mismatch("project_neighbors", sa, sf));
        }
        let (n, k, m) = (sa[0], sa[1], sa[2]);
        let (p, c) = (sf[0], sf[1]);
        if let Some(&bad) = index.iter().find(|&&j| j >= p) {
            return Err(mismatch("project_neighbors", sf, &[bad]));
        }
        let (ad, fd) = (self.data(alpha), self.data(feats));
        let mut out = vec![0.0; n * m * c];
        for i in 0..n {
            let slots = &mut out[i * m * c..(i + 1) * m * c];
            for kk in 0..k {
                let j = index[i * k + kk];
                let f = &fd[j * c..(j + 1) * c];
                let coeffs = &ad[(i * k + kk) * m..(i * k + kk + 1) * m];
                for (&w, slot) in coeffs.iter().zip(slots.chunks_exact_mut(c)) {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &x) in slot.iter_mut().zip(f) {
                        *o += w * x;
                    }
                }
            }
        }
        let rg = self.rg(&[alpha, feats]);
        let op = Op::Project {
            alpha,
            feats,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::from_parts_unchecked(vec![n, m, c], out), op, rg))
    }

    /// Pools `feats[P×C]` over groups of `k` consecutive `index` entries,
    /// giving `[index.len()/k × C]`. Max ties resolve to the earliest neighbor.
    pub fn pool_neighbors(&mut self, feats: Var, index: &[usize], k: usize, mode: Pool) -> Result<Var> {
        let sf = self.shape(feats);
        if sf.len() != 2 || k == 0 || index.is_empty() || index.len() % k != 0 {
            return Err(mismatch("pool_neighbors", sf, &[index.len(), k]));
        }
        let (p, c) = (sf[0], sf[1]);
        if let Some(&bad) = index.iter().find(|&&j| j >= p) {
            return Err(mismatch("pool_neighbors", sf, &[bad]));
        }
        let n = index.len() / k;
        let fd = self.data(feats);
        let mut out = vec![0.0; n * c];
        let mut argmax = Vec::new();
        match mode {
            Pool::Sum | Pool::Mean => {
                for (i, row) in out.chunks_exact_mut(c).enumerate() {
                    for &j in &index[i * k..(i + 1) * k] {
                        for (o, &x) in row.iter_mut().zip(&fd[j * c..(j + 1) * c]) {
                            *o += x;
                        }
                    }
                }
                if mode == Pool::Mean {
                    let inv = 1.0 / k as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Pool::Max => {
                argmax = vec![0; n * c];
                for i in 0..n {
                    let first = index[i * k];
                    for ch in 0..c {
                        let mut best = first;
                        for &j in &index[i * k + 1..(i + 1) * k] {
                            if fd[j * c + ch] > fd[best * c + ch] {
                                best = j;
                            }
                        }
                        out[i * c + ch] = fd[best * c + ch];
                        argmax[i * c + ch] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[feats]);
        let op = Op::Pool {
            feats,
            index: index.to_vec(),
            k,
            mode,
            argmax,
        };
        Ok(self.push(Tensor::from_parts_unchecked(vec![n, c], out), op, rg))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` for every node that
    /// requires one. Contributions from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.zero_grads();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[id].value.data();

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |da| kernels::matmul_a_bt_acc(g, val(*b), m, k, n, da));
                acc(*b, &mut |db| kernels::matmul_at_b_acc(val(*a), g, m, k, n, db));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |db| {
                    for chunk in g.chunks_exact(db.len()) {
                        db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let w = bd.len();
                acc(*a, &mut |da| {
                    for (dchunk, gchunk) in da.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                        for ((d, &x), &y) in dchunk.iter_mut().zip(gchunk).zip(bd) {
                            *d += x * y;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (gchunk, achunk) in g.chunks_exact(w).zip(ad.chunks_exact(w)) {
                        for ((d, &x), &y) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * y;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = if self.faulty_backward { 1.0 } else { *slope };
                let x = val(*a);
                acc(*a, &mut |da| {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += if xv > 0.0 { gv } else { slope * gv };
                    }
                });
            }
            Op::Exp(a) => {
                acc(*a, &mut |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gv * y;
                    }
                });
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *nodes[p.0].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    acc(*p, &mut |dp| {
                        for (drow, grow) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            drow.iter_mut()
                                .zip(&grow[offset..offset + w])
                                .for_each(|(d, &x)| *d += x);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather(a, index) => {
                let w = g.len() / index.len();
                acc(*a, &mut |da| {
                    for (&i, grow) in index.iter().zip(g.chunks_exact(w)) {
                        da[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let scale = match &nodes[id].op {
                    Op::Mean(..) => 1.0 / nodes[a.0].value.shape()[*axis] as f64,
                    _ => 1.0,
                };
                let (outer, len, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                da[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Reshape(a) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let inner_dot: f64 = (0..len).map(|l| out[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                da[at(l)] += out[at(l)] * (g[at(l)] - inner_dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |dl| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        for (c, d) in row.iter_mut().enumerate() {
                            let p = probs[r * classes + c];
                            *d += scale * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            } => {
                let (ad, bd) = (val(*a), val(*b));
                let (r, m) = (norms_a.len(), norms_b.len());
                let c = ad.len() / r;
                // s = dot / D with D = max(|a||b|, eps):
                //   ds/da = b / D - dot |b| a / (|a| D²), the second term
                //   only while the clamp is inactive
                let mut direct = vec![0.0; r * m];
                let mut radial_a = vec![0.0; r];
                let mut radial_b = vec![0.0; m];
                for i in 0..r {
                    for j in 0..m {
                        let prod = norms_a[i] * norms_b[j];
                        let d = prod.max(COSINE_EPS);
                        let gij = g[i * m + j];
                        direct[i * m + j] = gij / d;
                        if prod <= COSINE_EPS {
                            continue;
                        }
                        let t = gij * out[i * m + j] / d;
                        radial_a[i] += t * norms_b[j];
                        radial_b[j] += t * norms_a[i];
                    }
                }
                for (ra, &na) in radial_a.iter_mut().zip(norms_a) {
                    *ra = if na > 0.0 { *ra / na } else { 0.0 };
                }
                for (rb, &nb) in radial_b.iter_mut().zip(norms_b) {
                    *rb = if nb > 0.0 { *rb / nb } else { 0.0 };
                }
                acc(*a, &mut |da| {
                    let mut tmp = kernels::matmul(&direct, bd, r, m, c);
                    for (i, row) in tmp.chunks_exact_mut(c).enumerate() {
                        for (t, &x) in row.iter_mut().zip(&ad[i * c..(i + 1) * c]) {
                            *t -= radial_a[i] * x;
                        }
                    }
                    da.iter_mut().zip(&tmp).for_each(|(d, &x)| *d += x);
                });
                acc(*b, &mut |db| {
                    let mut tmp = vec![0.0; m * c];
                    kernels::matmul_at_b_acc(&direct, ad, r, m, c, &mut tmp);
                    for (j, row) in tmp.chunks_exact_mut(c).enumerate() {
                        for (t, &x) in row.iter_mut().zip(&bd[j * c..(j + 1) * c]) {
                            *t -= radial_b[j] * x;
                        }
                    }
                    db.iter_mut().zip(&tmp).for_each(|(d, &x)| *d += x);
                });
            }
            Op::Threshold(a, tau) => {
                let x = val(*a);
                acc(*a, &mut |da| {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv >= *tau {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Project { alpha, feats, index } => {
                let sa = nodes[alpha.0].value.shape();
                let (n, k, m) = (sa[0], sa[1], sa[2]);
                let c = nodes[feats.0].value.shape()[1];
                let (ad, fd) = (val(*alpha), val(*feats));
                acc(*alpha, &mut |dal| {
                    for i in 0..n {
                        for kk in 0..k {
                            let j = index[i * k + kk];
                            let f = &fd[j * c..(j + 1) * c];
                            for mm in 0..m {
                                let gs = &g[(i * m + mm) * c..(i * m + mm + 1) * c];
                                dal[(i * k + kk) * m + mm] += dot(gs, f);
                            }
                        }
                    }
                });
                acc(*feats, &mut |df| {
                    let mut row = vec![0.0; c];
                    for i in 0..n {
                        for kk in 0..k {
                            row.fill(0.0);
                            let coeffs = &ad[(i * k + kk) * m..(i * k + kk + 1) * m];
                            for (mm, &w) in coeffs.iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                let gs = &g[(i * m + mm) * c..(i * m + mm + 1) * c];
                                row.iter_mut().zip(gs).for_each(|(r, &x)| *r += w * x);
                            }
                            let j = index[i * k + kk];
                            df[j * c..(j + 1) * c]
                                .iter_mut()
                                .zip(&row)
                                .for_each(|(d, &x)| *d += x);
                        }
                    }
                });
            }
            Op::Pool {
                feats,
                index,
                k,
                mode,
                argmax,
            } => {
                let c = nodes[feats.0].value.shape()[1];
                acc(*feats, &mut |df| match mode {
                    Pool::Sum | Pool::Mean => {
                        let scale = if *mode == Pool::Mean { 1.0 / *k as f64 } else { 1.0 };
                        for (i, grow) in g.chunks_exact(c).enumerate() {
                            for &j in &index[i * k..(i + 1) * k] {
                                df[j * c..(j + 1) * c]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, &x)| *d += scale * x);
                            }
                        }
                    }
                    Pool::Max => {
                        for (slot, &j) in argmax.iter().enumerate() {
                            let ch = slot % c;
                            df[j * c + ch] += g[slot];
                        }
                    }
                });
            }
        }
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).item(), -0.2);
    }

    #[test]
    fn row_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
        let z = tape.mean_axis(x, 0).unwrap();
        assert_eq!(tape.value(z).data(), &[2.0, 3.0]);
    }

    #[test]
    fn broadcast_add_and_bad_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[10.0, 20.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = tape.constant(t(&[3], &[0.0; 3]));
        assert!(matches!(tape.add(x, bad), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 1.0, -1.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        // e / (e + 1/e)
        assert!((v[2] - 0.880797077977882).abs() < 1e-12);
        assert!((v[3] - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0]);
    }

    #[test]
    fn summed_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -1.2, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        let total = tape.sum_all(s);
        tape.backward(total).unwrap();
        for g in tape.grad(x).unwrap() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let uniform = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(uniform, &[0], None).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = tape.cross_entropy(confident, &[0], None).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let ignored = tape.param(t(&[2, 2], &[0.3, 0.1, -0.4, 0.9]));
        let l = tape.cross_entropy(ignored, &[7, 7], Some(7)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(ignored).map_or(true, |g| g.iter().all(|&v| v == 0.0)));

        let bad = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy(bad, &[2], None),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn gradients_accumulate_across_fan_out() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, 4.0);
        let y = tape.add(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn cosine_guards_zero_vectors() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
        let b = tape.param(t(&[1, 2], &[0.0, 1.0]));
        let s = tape.cosine_similarity(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.0]);
        let total = tape.sum_all(s);
        tape.backward(total).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|g| g.is_finite()));
        assert!(tape.grad(b).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn max_pool_is_componentwise() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.pool_neighbors(f, &[0, 1], 2, Pool::Max).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn clear_drops_nodes() {
        let mut tape = Tape::new();
        tape.param(Tensor::scalar(1.0));
        tape.clear();
        assert!(tape.is_empty());
    }
}
