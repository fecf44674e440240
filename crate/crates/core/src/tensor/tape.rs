use std::collections::HashMap;

use super::linalg::Lu;
use super::{axis_split, ParamKey, Parameter, Tensor};
use crate::error::{invalid, shape, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the second operand of an elementwise op maps onto the first.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// `b.shape` is a leading prefix of `a.shape`; `inner` trailing elements
    /// of `a` share one element of `b`.
    Prefix(usize),
    /// `b.shape` is a trailing suffix of `a.shape` of `len` elements.
    Suffix(usize),
}

impl Bcast {
    fn of(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            Some(Self::Same)
        } else if b.len() <= a.len() && &a[..b.len()] == b {
            Some(Self::Prefix(a[b.len()..].iter().product()))
        } else if b.len() <= a.len() && &a[a.len() - b.len()..] == b {
            Some(Self::Suffix(b.iter().product()))
        } else {
            None
        }
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Prefix(inner) => i / inner,
            Self::Suffix(len) => i % len,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, shared_b: bool },
    Transpose(Var),
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Gather { a: Var, idx: Vec<usize> },
    Sigmoid(Var),
    Relu(Var),
    ReduceMax { a: Var, axis: usize, argmax: Vec<usize> },
    ReduceSum { a: Var, axis: usize },
    SumAll(Var),
    L2Normalize { a: Var, axis: usize, norms: Vec<f64> },
    PointwiseLinear { x: Var, w: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    LinearSolve { m: Var, y: Var, lus: Vec<Lu> },
    Ridge { m: Var, alpha: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of a computation. Nodes are appended in evaluation
/// order, which is therefore a topological order; [`Tape::backward`] walks it
/// in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamKey, usize)>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; `None` when the value does
    /// not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no parameter gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.push(p.value().clone(), Op::Leaf);
        self.params.push((p.key(), v.0));
        v
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = Bcast::of(ta.shape(), tb.shape()).ok_or_else(|| {
            shape(format!(
                "{name}: cannot broadcast {:?} onto {:?}",
                tb.shape(),
                ta.shape()
            ))
        })?;
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[kind.index(i)]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op(a, b, kind)))
    }

    /// `a + b`; `b` may match `a`'s shape or a leading/trailing part of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`. A rank-2
    /// `b` is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2 && sa.len() > 2;
        if k != k2 || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape(format!("matmul: incompatible {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ad = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let bd = if shared_b {
                tb.data()
            } else {
                &tb.data()[bi * k * n..(bi + 1) * k * n]
            };
            let od = &mut data[bi * m * n..(bi + 1) * m * n];
            matmul_into(ad, bd, od, m, k, n);
        }
        let mut shp = sa[..sa.len() - 2].to_vec();
        shp.extend([m, n]);
        let out = Tensor::new(shp, data)?;
        Ok(self.push(out, Op::MatMul { a, b, shared_b }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let out = permute_tensor(self.value(a), &perm);
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let r = self.value(a).rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(shape(format!("permute: {perm:?} is not a permutation of rank {r}")));
        }
        let out = permute_tensor(self.value(a), perm);
        Ok(self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| shape("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shp = first;
        shp[axis] = total;
        let out = Tensor::new(shp, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start > end || end > t.shape()[axis] {
            return Err(shape(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + w * inner]);
        }
        let mut shp = t.shape().to_vec();
        shp[axis] = w;
        let out = Tensor::new(shp, data)?;
        Ok(self.push(out, Op::Slice { a, axis, start }))
    }

    /// Rows of `a` (along axis 0) picked by `idx`, repeats allowed.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(shape("gather on a scalar"));
        }
        let rows = t.shape()[0];
        let w: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(shape(format!("gather index {i} out of {rows} rows")));
            }
            data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shp = t.shape().to_vec();
        shp[0] = idx.len();
        let out = Tensor::new(shp, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Maximum over `axis`, which is removed from the shape. Ties resolve to
    /// the first index.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(shape(format!("reduce_max axis {axis} of {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = t.data()[o * n * inner + i];
                for j in 1..n {
                    let v = t.data()[(o * n + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                data.push(bv);
                argmax.push(best);
            }
        }
        let mut shp = t.shape().to_vec();
        shp.remove(axis);
        let out = Tensor::new(shp, data)?;
        Ok(self.push(out, Op::ReduceMax { a, axis, argmax }))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape(format!("reduce_sum axis {axis} of {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut shp = t.shape().to_vec();
        shp.remove(axis);
        let out = Tensor::new(shp, data)?;
        Ok(self.push(out, Op::ReduceSum { a, axis }))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| shape(format!("reduce_mean axis {axis}")))?;
        let s = self.reduce_sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::SumAll(a))
    }

    /// Scales every slice along `axis` to unit Euclidean norm. A zero slice
    /// maps to zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape(format!("l2_normalize axis {axis} of {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| data[at(j)] * data[at(j)]).sum::<f64>().sqrt();
                norms.push(norm);
                for j in 0..n {
                    data[at(j)] = if norm > 0.0 { data[at(j)] / norm } else { 0.0 };
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::L2Normalize { a, axis, norms }))
    }

    /// The per-point affine map (a 1x1 convolution): `x [.., in] * w [in, out]
    /// + b [out]`.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] || tb.shape() != [sw[1]] {
            return Err(shape(format!(
                "pointwise_linear: x {sx:?}, w {sw:?}, b {:?}",
                tb.shape()
            )));
        }
        let (fin, fout) = (sw[0], sw[1]);
        let rows = tx.len() / fin;
        let mut data = vec![0.0; rows * fout];
        matmul_into(tx.data(), tw.data(), &mut data, rows, fin, fout);
        for r in 0..rows {
            for (o, &bias) in data[r * fout..(r + 1) * fout].iter_mut().zip(tb.data()) {
                *o += bias;
            }
        }
        let mut shp = sx.to_vec();
        *shp.last_mut().unwrap() = fout;
        let out = Tensor::new(shp, data)?;
        Ok(self.push(out, Op::PointwiseLinear { x, w, b }))
    }

    /// Mean cross-entropy of `softmax(logits)` against class labels. `logits`
    /// is `[C]` with one label or `[B, C]` with `B` labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = *t.shape().last().ok_or_else(|| shape("logits must have rank >= 1"))?;
        let rows = if c == 0 { 0 } else { t.len() / c };
        if rows != labels.len() || rows == 0 {
            return Err(shape(format!(
                "softmax_cross_entropy: {rows} rows of logits for {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(shape(format!("label {l} out of {c} classes")));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * c..(r + 1) * c];
            let p = softmax(row);
            loss -= p[label].ln();
            probs.extend(p);
        }
        let out = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Solves `M x = y` for a batch of square systems, `M [.., s, s]`,
    /// `y [.., s]`, by LU with partial pivoting.
    pub fn linear_solve(&mut self, m: Var, y: Var) -> Result<Var> {
        let (tm, ty) = (self.value(m), self.value(y));
        let (sm, sy) = (tm.shape(), ty.shape());
        let r = sm.len();
        if r < 2 || sm[r - 1] != sm[r - 2] || sy.len() != r - 1 || sy[..] != sm[..r - 1] {
            return Err(shape(format!("linear_solve: M {sm:?}, y {sy:?}")));
        }
        if tm.data().iter().chain(ty.data()).any(|v| !v.is_finite()) {
            return Err(invalid("linear_solve: non-finite input"));
        }
        let s = sm[r - 1];
        let batch = tm.len() / (s * s).max(1);
        let mut lus = Vec::with_capacity(batch);
        let mut data = Vec::with_capacity(batch * s);
        for bi in 0..batch {
            let lu = Lu::factor(&tm.data()[bi * s * s..(bi + 1) * s * s], s)?;
            data.extend(lu.solve(&ty.data()[bi * s..(bi + 1) * s]));
            lus.push(lu);
        }
        let out = Tensor::new(sy.to_vec(), data)?;
        Ok(self.push(out, Op::LinearSolve { m, y, lus }))
    }

    /// `M + (alpha * trace(M) / s + beta) I` for each matrix of a batch
    /// `[.., s, s]`; the shift follows `M` in the backward pass.
    pub fn ridge(&mut self, m: Var, alpha: f64, beta: f64) -> Result<Var> {
        let t = self.value(m);
        let sm = t.shape();
        let r = sm.len();
        if r < 2 || sm[r - 1] != sm[r - 2] {
            return Err(shape(format!("ridge on non-square {sm:?}")));
        }
        let s = sm[r - 1];
        let mut data = t.data().to_vec();
        for mat in data.chunks_mut(s * s) {
            let tr: f64 = (0..s).map(|i| mat[i * s + i]).sum();
            let lambda = alpha * tr / s as f64 + beta;
            for i in 0..s {
                mat[i * s + i] += lambda;
            }
        }
        let out = Tensor::new(sm.to_vec(), data)?;
        Ok(self.push(out, Op::Ridge { m, alpha }))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params: HashMap<ParamKey, Tensor> = HashMap::new();
        for &(key, node) in &self.params {
            if let Some(g) = &grads[node] {
                match params.get_mut(&key) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(key, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(self.nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                accumulate(grads, *a, g.clone());
                let mut gb = Tensor::zeros(val(*b).shape());
                for (i, &x) in gd.iter().enumerate() {
                    gb.data_mut()[kind.index(i)] += sign * x;
                }
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for (i, &x) in gd.iter().enumerate() {
                    let j = kind.index(i);
                    ga.data_mut()[i] = x * tb.data()[j];
                    gb.data_mut()[j] += x * ta.data()[i];
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| c * x)),
            Op::MatMul { a, b, shared_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = ta.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *tb.shape().last().unwrap();
                let batch = ta.len() / (m * k).max(1);
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(tb.shape());
                let mut bt = vec![0.0; n * k];
                let mut at = vec![0.0; k * m];
                for bi in 0..batch {
                    let ad = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let bd = if *shared_b {
                        tb.data()
                    } else {
                        &tb.data()[bi * k * n..(bi + 1) * k * n]
                    };
                    let god = &gd[bi * m * n..(bi + 1) * m * n];
                    transpose_into(bd, &mut bt, k, n);
                    matmul_into(god, &bt, &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k], m, n, k);
                    transpose_into(ad, &mut at, m, k);
                    let gbd = if *shared_b {
                        gb.data_mut()
                    } else {
                        &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n]
                    };
                    matmul_acc(&at, god, gbd, k, m, n);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => {
                let r = g.rank();
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                accumulate(grads, *a, permute_tensor(g, &perm));
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *a, permute_tensor(g, &inv));
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(val(*a).shape()).expect("reshape grad");
                accumulate(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shp = val(p).shape();
                    let w = shp[*axis];
                    let mut gp = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&gd[base..base + w * inner]);
                    }
                    offset += w;
                    accumulate(grads, p, Tensor::new(shp.to_vec(), gp).expect("concat grad"));
                }
            }
            Op::Slice { a, axis, start } => {
                let shp = val(*a).shape();
                let (outer, n, inner) = axis_split(shp, *axis);
                let w = g.shape()[*axis];
                let mut ga = Tensor::zeros(shp);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    ga.data_mut()[dst..dst + w * inner]
                        .copy_from_slice(&gd[o * w * inner..(o + 1) * w * inner]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Gather { a, idx } => {
                let shp = val(*a).shape();
                let w: usize = shp[1..].iter().product();
                let mut ga = Tensor::zeros(shp);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in ga.data_mut()[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&gd[r * w..(r + 1) * w])
                    {
                        *d += s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data();
                let data = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::ReduceMax { a, axis, argmax } => {
                let shp = val(*a).shape();
                let (_, n, inner) = axis_split(shp, *axis);
                let mut ga = Tensor::zeros(shp);
                for (k, (&x, &j)) in gd.iter().zip(argmax).enumerate() {
                    let (o, i) = (k / inner, k % inner);
                    ga.data_mut()[(o * n + j) * inner + i] += x;
                }
                accumulate(grads, *a, ga);
            }
            Op::ReduceSum { a, axis } => {
                let shp = val(*a).shape();
                let (outer, n, inner) = axis_split(shp, *axis);
                let mut ga = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        ga.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *a, Tensor::new(shp.to_vec(), ga).unwrap());
            }
            Op::SumAll(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), gd[0])),
            Op::L2Normalize { a, axis, norms } => {
                let y = &self.nodes[id].value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut ga = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| y.data()[at(j)] * gd[at(j)]).sum();
                        for j in 0..n {
                            ga.data_mut()[at(j)] = (gd[at(j)] - y.data()[at(j)] * dot) / norm;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PointwiseLinear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.len() / fin;
                let mut wt = vec![0.0; fout * fin];
                transpose_into(tw.data(), &mut wt, fin, fout);
                let mut gx = Tensor::zeros(tx.shape());
                matmul_into(gd, &wt, gx.data_mut(), rows, fout, fin);
                let mut xt = vec![0.0; fin * rows];
                transpose_into(tx.data(), &mut xt, rows, fin);
                let mut gw = Tensor::zeros(tw.shape());
                matmul_acc(&xt, gd, gw.data_mut(), fin, rows, fout);
                let mut gb = Tensor::zeros(&[fout]);
                for r in 0..rows {
                    for (acc, v) in gb.data_mut().iter_mut().zip(&gd[r * fout..(r + 1) * fout]) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let shp = val(*logits).shape();
                let c = *shp.last().unwrap();
                let scale = gd[0] / labels.len() as f64;
                let mut gl = Tensor::new(shp.to_vec(), probs.iter().map(|p| p * scale).collect())
                    .unwrap();
                for (r, &l) in labels.iter().enumerate() {
                    gl.data_mut()[r * c + l] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
            Op::LinearSolve { m, y, lus } => {
                let x = &self.nodes[id].value;
                let s = *x.shape().last().unwrap();
                let mut gy = Tensor::zeros(val(*y).shape());
                let mut gm = Tensor::zeros(val(*m).shape());
                for (bi, lu) in lus.iter().enumerate() {
                    let z = lu.solve_transpose(&gd[bi * s..(bi + 1) * s]);
                    let xb = &x.data()[bi * s..(bi + 1) * s];
                    let gmb = &mut gm.data_mut()[bi * s * s..(bi + 1) * s * s];
                    for r in 0..s {
                        for c in 0..s {
                            gmb[r * s + c] = -z[r] * xb[c];
                        }
                    }
                    gy.data_mut()[bi * s..(bi + 1) * s].copy_from_slice(&z);
                }
                accumulate(grads, *m, gm);
                accumulate(grads, *y, gy);
            }
            Op::Ridge { m, alpha } => {
                let s = *g.shape().last().unwrap();
                let mut gm = g.clone();
                for mat in gm.data_mut().chunks_mut(s * s) {
                    let tr: f64 = (0..s).map(|i| mat[i * s + i]).sum();
                    let shift = alpha * tr / s as f64;
                    for i in 0..s {
                        mat[i * s + i] += shift;
                    }
                }
                accumulate(grads, *m, gm);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `out = a [m, k] * b [k, n]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// `out += a [m, k] * b [k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_into(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let src_shape = t.shape();
    let r = src_shape.len();
    let mut src_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut data = Vec::with_capacity(t.len());
    let mut counter = vec![0usize; r];
    let mut offset = 0usize;
    for _ in 0..t.len() {
        data.push(t.data()[offset]);
        for ax in (0..r).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute preserves size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = v(&mut t, &[1], &[0.0]);
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).data(), &[0.5]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn pointwise_identity() {
        let mut t = Tape::new();
        let x = v(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = t.constant(eye);
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.pointwise_linear(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn solve_identity_passes_gradient_through() {
        let mut t = Tape::new();
        let m = v(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = v(&mut t, &[2], &[3.0, -1.0]);
        let x = t.linear_solve(m, y).unwrap();
        assert_eq!(t.value(x).data(), &[3.0, -1.0]);
        let c = v(&mut t, &[2], &[0.7, -0.2]);
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(y).unwrap().data(), &[0.7, -0.2]);
    }

    #[test]
    fn solve_diagonal() {
        let mut t = Tape::new();
        let m = v(&mut t, &[2, 2], &[2.0, 0.0, 0.0, 2.0]);
        let y = v(&mut t, &[2], &[2.0, 4.0]);
        let x = t.linear_solve(m, y).unwrap();
        assert_eq!(t.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn singular_solve_errors() {
        let mut t = Tape::new();
        let m = v(&mut t, &[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = v(&mut t, &[2], &[1.0, 1.0]);
        assert!(matches!(
            t.linear_solve(m, y),
            Err(crate::Error::SingularMatrix)
        ));
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = v(&mut t, &[2, 3], &[0.0; 6]);
        let b = v(&mut t, &[2, 2], &[0.0; 4]);
        assert!(matches!(t.matmul(a, a), Err(crate::Error::Shape(_))));
        assert!(matches!(t.add(a, b), Err(crate::Error::Shape(_))));
        assert!(t.matmul(b, a).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = v(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(a), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn sum_of_param_gives_ones_and_disconnected_gets_nothing() {
        let p = Parameter::new("p", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let q = Parameter::new("q", Tensor::vector(vec![4.0]));
        let mut t = Tape::new();
        let pv = t.param(&p);
        let _qv = t.param(&q);
        let l = t.sum(pv);
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(p.key()).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.param(q.key()).is_none());
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = v(&mut t, &[2, 3, 4], &data);
        let p = t.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        // p[k, i, j] = a[i, j, k]
        assert_eq!(t.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back).data(), &data[..]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut t = Tape::new();
        let a = v(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = v(&mut t, &[2, 1], &[5.0, 6.0]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 0, 2).unwrap();
        assert_eq!(t.value(s), t.value(a));
    }

    #[test]
    fn softmax_ce_uniform() {
        let mut t = Tape::new();
        let l = v(&mut t, &[4], &[0.0; 4]);
        let loss = t.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }
}
