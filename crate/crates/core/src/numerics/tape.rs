//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates vector-Jacobian products, so gradients are a deterministic
//! function of the recorded computation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Mask, ParamId, ParamStore, Scalar, Tensor};

/// Clamp applied inside `log` for attention cross-entropy.
pub const PROB_EPS: f64 = 1e-9;

const LN_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    Relu(usize),
    Linear(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SplitHeads(usize, usize),
    MergeHeads(usize, usize),
    Softmax(usize),
    Reshape(usize),
    SelectHead {
        x: usize,
        heads: usize,
        head: usize,
    },
    Sum(usize),
    CrossEntropyRows {
        pred: usize,
        target: Arc<Tensor<T>>,
        row_mask: Vec<bool>,
    },
    SoftmaxXent {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let node = *self.params.get(&id)?;
        self.node(node)
    }

    pub fn wrt(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.node(var.id)
    }

    fn node(&self, id: usize) -> Option<Tensor<T>> {
        let shape = &self.shapes[id];
        Some(match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records a value with no gradient path to any parameter.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// Leaf node bound to a parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push_arc(store.value(id).clone(), Op::Leaf);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if !out.is_scalar() {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, contrib: Vec<T>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, dy.to_vec());
            accumulate(grads, *b, dy.to_vec());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let da = dy.iter().zip(vb).map(|(&g, &y)| g * y).collect();
            let db = dy.iter().zip(va).map(|(&g, &x)| g * x).collect();
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Scale(a, s) => {
            accumulate(grads, *a, dy.iter().map(|&g| g * *s).collect());
        }
        Op::AddBias(x, b) => {
            let n = val(*b).len();
            let mut db = vec![T::zero(); n];
            for row in dy.chunks(n) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            accumulate(grads, *x, dy.to_vec());
            accumulate(grads, *b, db);
        }
        Op::Relu(x) => {
            let out = node.value.data();
            let dx = dy
                .iter()
                .zip(out)
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(grads, *x, dx);
        }
        Op::Linear(x, w) => {
            let (vx, vw) = (val(*x), val(*w));
            let (k, n) = (vw.shape()[0], vw.shape()[1]);
            let rows = vx.len() / k;
            let mut dx = vec![T::zero(); rows * k];
            T::gemm(rows, n, k, dy, false, vw.data(), true, &mut dx, false);
            let mut dw = vec![T::zero(); k * n];
            T::gemm(k, rows, n, vx.data(), true, dy, false, &mut dw, false);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
        }
        Op::Bmm { a, b, trans_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (g, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
            let mut da = vec![T::zero(); g * m * k];
            let mut db = vec![T::zero(); g * k * n];
            for gi in 0..g {
                let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                let ag = &va.data()[gi * m * k..(gi + 1) * m * k];
                let bg = &vb.data()[gi * k * n..(gi + 1) * k * n];
                let da_g = &mut da[gi * m * k..(gi + 1) * m * k];
                let db_g = &mut db[gi * k * n..(gi + 1) * k * n];
                if *trans_b {
                    // y = a b^T, b is n x k
                    T::gemm(m, n, k, dyg, false, bg, false, da_g, false);
                    T::gemm(n, m, k, dyg, true, ag, false, db_g, false);
                } else {
                    // y = a b, b is k x n
                    T::gemm(m, n, k, dyg, false, bg, true, da_g, false);
                    T::gemm(k, m, n, ag, true, dyg, false, db_g, false);
                }
            }
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Embedding { table, ids } => {
            let vt = val(*table);
            let d = vt.shape()[1];
            let mut dt = vec![T::zero(); vt.len()];
            for (r, &id) in ids.iter().enumerate() {
                for (acc, &g) in dt[id * d..(id + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                    *acc += g;
                }
            }
            accumulate(grads, *table, dt);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let vg = val(*gain).data();
            let d = vg.len();
            let inv_d = T::one() / T::from_f64(d as f64);
            let mut dx = vec![T::zero(); dy.len()];
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for (r, ((gy, xh), out)) in dy
                .chunks(d)
                .zip(xhat.chunks(d))
                .zip(dx.chunks_mut(d))
                .enumerate()
            {
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for j in 0..d {
                    let dxh = gy[j] * vg[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    dg[j] += gy[j] * xh[j];
                    db[j] += gy[j];
                }
                mean_dxh = mean_dxh * inv_d;
                mean_dxh_xh = mean_dxh_xh * inv_d;
                for j in 0..d {
                    let dxh = gy[j] * vg[j];
                    out[j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            accumulate(grads, *x, dx);
            accumulate(grads, *gain, dg);
            accumulate(grads, *bias, db);
        }
        Op::SplitHeads(x, heads) => {
            let s = val(*x).shape().to_vec();
            accumulate(grads, *x, merge_heads_raw(dy, s[0], s[1], s[2], *heads));
        }
        Op::MergeHeads(x, heads) => {
            let s = node.value.shape().to_vec();
            accumulate(grads, *x, split_heads_raw(dy, s[0], s[1], s[2], *heads));
        }
        Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
        Op::Softmax(x) => {
            let y = node.value.data();
            let c = node.value.last_dim();
            let mut dx = vec![T::zero(); y.len()];
            for ((yr, gr), out) in y.chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::SelectHead { x, heads, head } => {
            let vx = val(*x);
            let plane = vx.shape()[1] * vx.shape()[2];
            let mut dx = vec![T::zero(); vx.len()];
            for (b, g) in dy.chunks(plane).enumerate() {
                let start = (b * heads + head) * plane;
                dx[start..start + plane].copy_from_slice(g);
            }
            accumulate(grads, *x, dx);
        }
        Op::Sum(x) => {
            accumulate(grads, *x, vec![dy[0]; val(*x).len()]);
        }
        Op::CrossEntropyRows {
            pred,
            target,
            row_mask,
        } => {
            let vp = val(*pred);
            let c = vp.last_dim();
            let eps = T::from_f64(PROB_EPS);
            let mut dp = vec![T::zero(); vp.len()];
            for (r, &keep) in row_mask.iter().enumerate() {
                if !keep {
                    continue;
                }
                for j in r * c..(r + 1) * c {
                    let t = target.data()[j];
                    let p = vp.data()[j];
                    if t > T::zero() && p > eps {
                        dp[j] = -dy[0] * t / p;
                    }
                }
            }
            accumulate(grads, *pred, dp);
        }
        Op::SoftmaxXent {
            logits,
            targets,
            probs,
        } => {
            let v = val(*logits).last_dim();
            let mut dl = vec![T::zero(); probs.len()];
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                for j in 0..v {
                    dl[r * v + j] = dy[0] * probs[r * v + j];
                }
                dl[r * v + t] -= dy[0];
            }
            accumulate(grads, *logits, dl);
        }
    }
}

fn split_heads_raw<T: Scalar>(x: &[T], b: usize, m: usize, d: usize, h: usize) -> Vec<T> {
    let dk = d / h;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..m {
            for hi in 0..h {
                let src = (bi * m + t) * d + hi * dk;
                let dst = ((bi * h + hi) * m + t) * dk;
                out[dst..dst + dk].copy_from_slice(&x[src..src + dk]);
            }
        }
    }
    out
}

fn merge_heads_raw<T: Scalar>(x: &[T], b: usize, m: usize, d: usize, h: usize) -> Vec<T> {
    let dk = d / h;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..m {
            for hi in 0..h {
                let dst = (bi * m + t) * d + hi * dk;
                let src = ((bi * h + hi) * m + t) * dk;
                out[dst..dst + dk].copy_from_slice(&x[src..src + dk]);
            }
        }
    }
    out
}

/// Row-wise masked softmax on a rank-2 or rank-3 value. Masked entries are
/// exactly zero. For rank 3 with `G` groups the mask may have `G / k`
/// groups, each mask group covering `k` consecutive value groups.
pub fn softmax_values<T: Scalar>(x: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    let (groups, rows, cols) = match *x.shape() {
        [r, c] => (1, r, c),
        [g, r, c] => (g, r, c),
        _ => return Err(Error::shape("softmax_rows", format!("rank {} input", x.rank()))),
    };
    let per_mask = match mask {
        Some(m) => {
            let (mg, mr, mc) = m.dims();
            if mr != rows || mc != cols || mg == 0 || groups % mg != 0 {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask {mg}x{mr}x{mc} vs input {:?}", x.shape()),
                ));
            }
            groups / mg
        }
        None => 1,
    };
    let mut out = vec![T::zero(); x.len()];
    for g in 0..groups {
        for r in 0..rows {
            let row_idx = g * rows + r;
            let xr = &x.data()[row_idx * cols..(row_idx + 1) * cols];
            let yr = &mut out[row_idx * cols..(row_idx + 1) * cols];
            let allow = mask.map(|m| m.row(g / per_mask, r));
            let ok = |j: usize| allow.map_or(true, |a| a[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { row: row_idx });
            }
            let mut total = T::zero();
            for j in 0..cols {
                if ok(j) {
                    let e = (xr[j] - max).exp();
                    yr[j] = e;
                    total += e;
                }
            }
            for v in yr.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// `-Σ target · log max(pred, ε)` over rows whose mask entry is true.
pub fn cross_entropy_values<T: Scalar>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    row_mask: &[bool],
) -> Result<T> {
    if target.shape() != pred.shape() {
        return Err(Error::shape(
            "cross_entropy_rows",
            format!("target {:?} vs pred {:?}", target.shape(), pred.shape()),
        ));
    }
    let c = pred.last_dim();
    if row_mask.len() * c != pred.len() {
        return Err(Error::shape(
            "cross_entropy_rows",
            format!("row mask of {} rows for {:?}", row_mask.len(), pred.shape()),
        ));
    }
    let eps = T::from_f64(PROB_EPS);
    let mut total = T::zero();
    for (r, &keep) in row_mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for j in r * c..(r + 1) * c {
            let t = target.data()[j];
            if t > T::zero() {
                total -= t * pred.data()[j].max(eps).ln();
            }
        }
    }
    Ok(total)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element result.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.same_shape(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, Op::Add(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.same_shape(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::from_f64(s);
        let out = self.value().map(|x| x * s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Self> {
        let (x, b) = (self.value(), bias.value());
        if b.rank() != 1 || b.len() != x.last_dim() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", x.shape(), b.shape()),
            ));
        }
        let n = b.len();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape.push(out, Op::AddBias(self.id, bias.id)))
    }

    pub fn relu(self) -> Self {
        let out = self.value().map(|x| x.max(T::zero()));
        self.tape.push(out, Op::Relu(self.id))
    }

    /// Right-multiplies the last dimension by a `k x n` matrix.
    pub fn linear(self, weight: Var<'t, T>) -> Result<Self> {
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || x.last_dim() != w.shape()[0] {
            return Err(Error::shape(
                "linear",
                format!("{:?} x {:?}", x.shape(), w.shape()),
            ));
        }
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let rows = x.len() / k;
        let mut data = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, x.data(), false, w.data(), false, &mut data, false);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(out, Op::Linear(self.id, weight.id)))
    }

    /// Batched matrix product of `(G, m, k)` with `(G, k, n)`, or with
    /// `(G, n, k)` transposed when `trans_b` is set.
    pub fn bmm(self, other: Var<'t, T>, trans_b: bool) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let bad = || Error::shape("bmm", format!("{:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape()));
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (kb, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut data = vec![T::zero(); g * m * n];
        for gi in 0..g {
            T::gemm(
                m,
                k,
                n,
                &a.data()[gi * m * k..(gi + 1) * m * k],
                false,
                &b.data()[gi * k * n..(gi + 1) * k * n],
                trans_b,
                &mut data[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(&[g, m, n], data)?;
        Ok(self.tape.push(
            out,
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
        ))
    }

    /// Row lookup into a `(vocab, d)` table; output shape is `lead ++ [d]`.
    pub fn embedding(self, ids: &[usize], lead: &[usize]) -> Result<Self> {
        let t = self.value();
        if t.rank() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("table {:?}, {} ids for lead {lead:?}", t.shape(), ids.len()),
            ));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, size: v });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes the last dimension, then applies gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Self> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let d = x.last_dim();
        if g.len() != d || b.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?}", x.shape(), g.shape()),
            ));
        }
        let inv_d = T::one() / T::from_f64(d as f64);
        let eps = T::from_f64(LN_EPS);
        let rows = x.len() / d;
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    /// `(B, m, h*dk)` to `(B*h, m, dk)`.
    pub fn split_heads(self, heads: usize) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let out = Tensor::new(&[b * heads, m, d / heads], split_heads_raw(x.data(), b, m, d, heads))?;
        Ok(self.tape.push(out, Op::SplitHeads(self.id, heads)))
    }

    /// `(B*h, m, dk)` to `(B, m, h*dk)`.
    pub fn merge_heads(self, heads: usize) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", format!("{s:?} from {heads} heads")));
        }
        let (b, m, d) = (s[0] / heads, s[1], s[2] * heads);
        let out = Tensor::new(&[b, m, d], merge_heads_raw(x.data(), b, m, d, heads))?;
        Ok(self.tape.push(out, Op::MergeHeads(self.id, heads)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn softmax_rows(self, mask: Option<&Mask>) -> Result<Self> {
        let out = softmax_values(&self.value(), mask)?;
        Ok(self.tape.push(out, Op::Softmax(self.id)))
    }

    /// Picks head `head` out of a `(B*h, r, c)` value, giving `(B, r, c)`.
    pub fn select_head(self, heads: usize, head: usize) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[0] % heads != 0 || head >= heads {
            return Err(Error::shape("select_head", format!("head {head}/{heads} of {s:?}")));
        }
        let plane = s[1] * s[2];
        let b = s[0] / heads;
        let mut data = Vec::with_capacity(b * plane);
        for bi in 0..b {
            let start = (bi * heads + head) * plane;
            data.extend_from_slice(&x.data()[start..start + plane]);
        }
        let out = Tensor::new(&[b, s[1], s[2]], data)?;
        Ok(self.tape.push(
            out,
            Op::SelectHead {
                x: self.id,
                heads,
                head,
            },
        ))
    }

    pub fn sum(self) -> Self {
        let total = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// Attention cross-entropy against a row-stochastic target; rows whose
    /// mask entry is false contribute nothing.
    pub fn cross_entropy_rows(self, target: Arc<Tensor<T>>, row_mask: &[bool]) -> Result<Self> {
        let total = cross_entropy_values(&target, &self.value(), row_mask)?;
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::CrossEntropyRows {
                pred: self.id,
                target,
                row_mask: row_mask.to_vec(),
            },
        ))
    }

    /// Summed negative log-likelihood of `targets` under `softmax(logits)`
    /// along the last dimension. `None` targets (padding) are skipped.
    pub fn softmax_cross_entropy(self, targets: &[Option<usize>]) -> Result<Self> {
        let logits = self.value();
        let v = logits.last_dim();
        if targets.len() * v != logits.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), logits.shape()),
            ));
        }
        let mut probs = vec![T::zero(); logits.len()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = &logits.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::TokenOutOfRange { id: t, size: v });
                }
                total += z.ln() + max - row[t];
            }
        }
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}
