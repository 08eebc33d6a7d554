//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends one node holding its output value. Nodes whose
//! inputs require gradients also keep what their backward rule needs.
//! [`Tape::backward`] walks the nodes once, newest first.

use std::sync::atomic::{AtomicU32, Ordering};

use super::float::Float;
use super::gemm::{gemm, View, ViewMut};
use super::tensor::Tensor;
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: Vec<(T, T)> },
    Gelu { x: usize },
    Relu { x: usize },
    Softmax { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    Transpose { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    CausalAttention { qkv: usize, heads: usize, block: usize, probs: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Work counters for cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Query-key pairs scored by causal attention, summed over heads and layers.
    pub attention_pairs: u64,
    /// Multiply-accumulates issued to matrix products in the forward pass.
    pub matmul_macs: u64,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    stats: TapeStats,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn check_finite<T: Float>(op: &'static str, data: &[T]) -> Result<(), NumericsError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn gelu<T: Float>(x: T) -> (T, T) {
    let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let one = T::one();
    let three = T::of_f64(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + three * k * x * x);
    (y, dy)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            stats: TapeStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    fn idx(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.index as usize >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(v.index as usize)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var, NumericsError> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Saved backward state is only worth keeping when gradients flow.
        let op = if rg { op } else { strip(op) };
        Ok(self.push(value, op, rg))
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NumericsError> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("var belongs to this tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.idx(v).ok()?;
        self.leaf_grads.get(i).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---------------------------------------------------------------- ops

    /// `a @ b` where `a` is `[.., k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rank() < 1 || bv.rank() != 2 || av.shape()[av.rank() - 1] != bv.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} @ {:?}", av.shape(), bv.shape())));
        }
        let (m, k) = av.as_matrix_dims();
        let n = bv.shape()[1];
        let mut out = vec![T::zero(); m * n];
        gemm(View::dense(av.data(), m, k), View::dense(bv.data(), k, n), T::zero(), ViewMut::dense(&mut out, m, n));
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.stats.matmul_macs += (m * k * n) as u64;
        let value = Tensor::new(shape, out)?;
        self.push_checked("matmul", value, Op::MatMul { a: ai, b: bi }, &[ai, bi])
    }

    /// `x @ w + b` with `x: [.., k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        if xv.rank() < 1 || wv.rank() != 2 || xv.shape()[xv.rank() - 1] != wv.shape()[0] || bv.shape() != [wv.shape()[1]] {
            return Err(shape_err(
                "linear",
                format!("{:?} @ {:?} + {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (m, k) = xv.as_matrix_dims();
        let n = wv.shape()[1];
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(View::dense(xv.data(), m, k), View::dense(wv.data(), k, n), T::one(), ViewMut::dense(&mut out, m, n));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.stats.matmul_macs += (m * k * n) as u64;
        let value = Tensor::new(shape, out)?;
        self.push_checked("linear", value, Op::Linear { x: xi, w: wi, b: bi }, &[xi, wi, bi])
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), NumericsError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked("add", value, Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked("mul", value, Op::Mul { a: ai, b: bi }, &[ai, bi])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push_checked("scale", value, Op::Scale { x: xi, c }, &[xi])
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let ti = self.idx(table)?;
        let tv = &self.nodes[ti].value;
        if tv.rank() != 2 {
            return Err(shape_err("embedding", format!("table {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { op: "embedding", index: id, bound: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push_checked("embedding", value, Op::Embedding { table: ti, ids: ids.to_vec() }, &[ti])
    }

    /// Rows of `x` (viewed as a matrix over its last axis) selected by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (rows, d) = xv.as_matrix_dims();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            if r >= rows {
                return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: r, bound: rows });
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        self.push_checked("gather_rows", value, Op::GatherRows { x: xi, idx: idx.to_vec() }, &[xi])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (xv, gv, bv) = (&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value);
        let (m, n) = xv.as_matrix_dims();
        if xv.rank() < 1 || gv.shape() != [n] || bv.shape() != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with {:?}/{:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let eps = T::of_f64(LAYER_NORM_EPS);
        let nf = T::of_usize(n);
        let mut out = Vec::with_capacity(m * n);
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / nf;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..n {
                out.push((row[c] - mean) * rstd * gv.data()[c] + bv.data()[c]);
            }
            stats.push((mean, rstd));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("layer_norm", value, Op::LayerNorm { x: xi, gamma: gi, beta: bi, stats }, &[xi, gi, bi])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu(v).0).collect())?;
        self.push_checked("gelu", value, Op::Gelu { x: xi }, &[xi])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v.max(T::zero())).collect())?;
        self.push_checked("relu", value, Op::Relu { x: xi }, &[xi])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (m, n) = xv.as_matrix_dims();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            softmax_row(xv.row(r), &mut out[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("softmax", value, Op::Softmax { x: xi }, &[xi])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let idxs = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &i in &idxs {
                let v = &self.nodes[i].value;
                let chunk: usize = v.shape()[axis..].iter().product();
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push_checked("concat", value, Op::Concat { inputs: idxs.clone(), axis }, &idxs)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} range {start}..{}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&xv.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push_checked("slice", value, Op::Slice { x: xi, axis, start }, &[xi])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.clone().reshaped(shape)?;
        self.push_checked("reshape", value, Op::Reshape { x: xi }, &[xi])
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", xv.shape())));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = xv.data()[r * n + c];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push_checked("transpose", value, Op::Transpose { x: xi }, &[xi])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let total = self.nodes[xi].value.data().iter().fold(T::zero(), |s, &v| s + v);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum { x: xi }, &[xi])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let total = xv.data().iter().fold(T::zero(), |s, &v| s + v);
        let value = Tensor::scalar(total / T::of_usize(xv.numel()));
        self.push_checked("mean", value, Op::Mean { x: xi }, &[xi])
    }

    /// Multi-head causal self-attention over packed projections.
    ///
    /// `qkv` is `[blocks * block, 3 * d]` holding queries, keys and values side
    /// by side; each consecutive run of `block` rows is one sequence. Position
    /// `p` of a block attends to positions `0..=p` of the same block only.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, block: usize) -> Result<Var, NumericsError> {
        let qi = self.idx(qkv)?;
        let qv = &self.nodes[qi].value;
        let (rows, width) = qv.as_matrix_dims();
        if qv.rank() != 2 || heads == 0 || block == 0 || width % (3 * heads) != 0 || rows % block != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("{:?} heads {heads} block {block}", qv.shape()),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let blocks = rows / block;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let data = qv.data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); blocks * heads * block * block];
        for bl in 0..blocks {
            for h in 0..heads {
                let p_off = (bl * heads + h) * block * block;
                let scores = &mut probs[p_off..p_off + block * block];
                let q = View { data, offset: bl * block * width + h * dh, rows: block, cols: dh, rs: width, cs: 1 };
                let k = View { data, offset: bl * block * width + d + h * dh, rows: block, cols: dh, rs: width, cs: 1 };
                gemm(q, k.t(), T::zero(), ViewMut::dense(scores, block, block));
                for r in 0..block {
                    let row = &mut scores[r * block..(r + 1) * block];
                    for v in row[..=r].iter_mut() {
                        *v = *v * scale;
                    }
                    let (live, masked) = row.split_at_mut(r + 1);
                    let tmp: Vec<T> = live.to_vec();
                    softmax_row(&tmp, live);
                    masked.iter_mut().for_each(|v| *v = T::zero());
                }
                let v = View { data, offset: bl * block * width + 2 * d + h * dh, rows: block, cols: dh, rs: width, cs: 1 };
                let o = ViewMut { data: &mut out, offset: bl * block * d + h * dh, rows: block, cols: dh, rs: d, cs: 1 };
                gemm(View::dense(&probs[p_off..p_off + block * block], block, block), v, T::zero(), o);
            }
        }
        let causal = (block * (block + 1) / 2) as u64;
        self.stats.attention_pairs += causal * (blocks * heads) as u64;
        self.stats.matmul_macs += 2 * (blocks * heads * block * block * dh) as u64;
        let value = Tensor::new(vec![rows, d], out)?;
        self.push_checked("causal_attention", value, Op::CausalAttention { qkv: qi, heads, block, probs }, &[qi])
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var, NumericsError> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        let (m, v) = lv.as_matrix_dims();
        if lv.rank() != 2 || targets.len() != m || weights.len() != m {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, {} targets, {} weights", lv.shape(), targets.len(), weights.len()),
            ));
        }
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for r in 0..m {
            let t = targets[r];
            if t >= v {
                return Err(NumericsError::TargetOutOfRange { target: t, vocab: v });
            }
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
            let lse = max + sum.ln();
            total = total + weights[r] * (lse - row[t]);
            softmax_row(row, &mut probs[r * v..(r + 1) * v]);
        }
        let op = Op::CrossEntropy { logits: li, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        self.push_checked("cross_entropy", Tensor::scalar(total), op, &[li])
    }

    /// Mean cross-entropy over the rows of `logits` (`[V]` or `[m, V]`).
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.value(logits).shape().to_vec();
        let logits = if shape.len() == 1 { self.reshape(logits, &[1, shape[0]])? } else { logits };
        let w = T::one() / T::of_usize(targets.len().max(1));
        self.cross_entropy(logits, targets, &vec![w; targets.len()])
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(NumericsError::NotScalar { shape: lv.shape().to_vec() });
        }
        let seed = Tensor::new(lv.shape().to_vec(), vec![T::one()])?;
        self.backward_from(&[(loss, seed)])
    }

    /// Backpropagates explicit output gradients (vector-Jacobian products).
    pub fn backward_from(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<(), NumericsError> {
        let mut top = 0;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        for (v, g) in seeds {
            let i = self.idx(*v)?;
            if g.shape() != self.nodes[i].value.shape() {
                return Err(shape_err(
                    "backward",
                    format!("seed {:?} for value {:?}", g.shape(), self.nodes[i].value.shape()),
                ));
            }
            check_finite("backward", g.data())?;
            top = top.max(i + 1);
            if grads.len() < top {
                grads.resize_with(top, || None);
            }
            if self.nodes[i].requires_grad {
                acc(&mut grads, i, g.numel(), |dst| add_into(dst, g.data()));
            }
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                check_finite("backward", &g)?;
                let shape = self.nodes[i].value.shape().to_vec();
                match &mut self.leaf_grads[i] {
                    Some(existing) => add_into(existing.data_mut(), &g),
                    slot => *slot = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = av.as_matrix_dims();
                let n = bv.shape()[1];
                if self.wants(*a) {
                    acc(grads, *a, m * k, |dst| {
                        gemm(View::dense(g, m, n), View::dense(bv.data(), k, n).t(), T::one(), ViewMut::dense(dst, m, k))
                    });
                }
                if self.wants(*b) {
                    acc(grads, *b, k * n, |dst| {
                        gemm(View::dense(av.data(), m, k).t(), View::dense(g, m, n), T::one(), ViewMut::dense(dst, k, n))
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                let (m, k) = xv.as_matrix_dims();
                let n = wv.shape()[1];
                if self.wants(*x) {
                    acc(grads, *x, m * k, |dst| {
                        gemm(View::dense(g, m, n), View::dense(wv.data(), k, n).t(), T::one(), ViewMut::dense(dst, m, k))
                    });
                }
                if self.wants(*w) {
                    acc(grads, *w, k * n, |dst| {
                        gemm(View::dense(xv.data(), m, k).t(), View::dense(g, m, n), T::one(), ViewMut::dense(dst, k, n))
                    });
                }
                if self.wants(*b) {
                    acc(grads, *b, n, |dst| {
                        for r in 0..m {
                            add_into(dst, &g[r * n..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &inp in [a, b] {
                    if self.wants(inp) {
                        acc(grads, inp, g.len(), |dst| add_into(dst, g));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if self.wants(*a) {
                    acc(grads, *a, g.len(), |dst| {
                        for j in 0..g.len() {
                            dst[j] = dst[j] + g[j] * bv[j];
                        }
                    });
                }
                if self.wants(*b) {
                    acc(grads, *b, g.len(), |dst| {
                        for j in 0..g.len() {
                            dst[j] = dst[j] + g[j] * av[j];
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    acc(grads, *x, g.len(), |dst| {
                        for j in 0..g.len() {
                            dst[j] = dst[j] + g[j] * *c;
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = &nodes[*table].value;
                    let d = tv.shape()[1];
                    acc(grads, *table, tv.numel(), |dst| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dst[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let xv = &nodes[*x].value;
                    let (_, d) = xv.as_matrix_dims();
                    acc(grads, *x, xv.numel(), |dst| {
                        for (r, &src) in idx.iter().enumerate() {
                            add_into(&mut dst[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = &nodes[*x].value;
                let gv = nodes[*gamma].value.data();
                let (m, n) = xv.as_matrix_dims();
                let nf = T::of_usize(n);
                if self.wants(*x) {
                    acc(grads, *x, m * n, |dst| {
                        let mut dxhat = vec![T::zero(); n];
                        for r in 0..m {
                            let (mean, rstd) = stats[r];
                            let row = xv.row(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for c in 0..n {
                                dxhat[c] = gr[c] * gv[c];
                                let xhat = (row[c] - mean) * rstd;
                                s1 = s1 + dxhat[c];
                                s2 = s2 + dxhat[c] * xhat;
                            }
                            s1 = s1 / nf;
                            s2 = s2 / nf;
                            for c in 0..n {
                                let xhat = (row[c] - mean) * rstd;
                                let o = r * n + c;
                                dst[o] = dst[o] + rstd * (dxhat[c] - s1 - xhat * s2);
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, n, |dst| {
                        for r in 0..m {
                            let (mean, rstd) = stats[r];
                            let row = xv.row(r);
                            for c in 0..n {
                                dst[c] = dst[c] + g[r * n + c] * (row[c] - mean) * rstd;
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    acc(grads, *beta, n, |dst| {
                        for r in 0..m {
                            add_into(dst, &g[r * n..(r + 1) * n]);
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = nodes[*x].value.data();
                    acc(grads, *x, g.len(), |dst| {
                        for j in 0..g.len() {
                            dst[j] = dst[j] + g[j] * gelu(xv[j]).1;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = nodes[*x].value.data();
                    acc(grads, *x, g.len(), |dst| {
                        for j in 0..g.len() {
                            if xv[j] > T::zero() {
                                dst[j] = dst[j] + g[j];
                            }
                        }
                    });
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = &nodes[i].value;
                    let (m, n) = y.as_matrix_dims();
                    acc(grads, *x, m * n, |dst| {
                        for r in 0..m {
                            let yr = y.row(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            for c in 0..n {
                                dst[r * n + c] = dst[r * n + c] + yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_chunk: usize = out_shape[*axis..].iter().product();
                let mut offset = 0;
                for &inp in inputs {
                    let v = &nodes[inp].value;
                    let chunk: usize = v.shape()[*axis..].iter().product();
                    if self.wants(inp) {
                        acc(grads, inp, v.numel(), |dst| {
                            for o in 0..outer {
                                let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                                add_into(&mut dst[o * chunk..(o + 1) * chunk], src);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let s = nodes[*x].value.shape();
                    let len = nodes[i].value.shape()[*axis];
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[*axis + 1..].iter().product();
                    acc(grads, *x, nodes[*x].value.numel(), |dst| {
                        for o in 0..outer {
                            let base = o * s[*axis] * inner + start * inner;
                            add_into(&mut dst[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    acc(grads, *x, g.len(), |dst| add_into(dst, g));
                }
            }
            Op::Transpose { x } => {
                if self.wants(*x) {
                    let s = nodes[*x].value.shape();
                    let (m, n) = (s[0], s[1]);
                    acc(grads, *x, m * n, |dst| {
                        for r in 0..m {
                            for c in 0..n {
                                dst[r * n + c] = dst[r * n + c] + g[c * m + r];
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = nodes[*x].value.numel();
                    acc(grads, *x, n, |dst| dst.iter_mut().for_each(|d| *d = *d + g[0]));
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let n = nodes[*x].value.numel();
                    let share = g[0] / T::of_usize(n);
                    acc(grads, *x, n, |dst| dst.iter_mut().for_each(|d| *d = *d + share));
                }
            }
            Op::CausalAttention { qkv, heads, block, probs } => {
                if self.wants(*qkv) {
                    let qv = &nodes[*qkv].value;
                    let (rows, width) = qv.as_matrix_dims();
                    acc(grads, *qkv, rows * width, |dst| {
                        attention_backward(qv.data(), g, probs, dst, rows, width, *heads, *block)
                    });
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                if self.wants(*logits) {
                    let (m, v) = nodes[*logits].value.as_matrix_dims();
                    acc(grads, *logits, m * v, |dst| {
                        for r in 0..m {
                            let w = g[0] * weights[r];
                            for c in 0..v {
                                dst[r * v + c] = dst[r * v + c] + w * probs[r * v + c];
                            }
                            dst[r * v + targets[r]] = dst[r * v + targets[r]] - w;
                        }
                    });
                }
            }
        }
    }
}

/// Drops saved backward state from ops whose output needs no gradient.
fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::CausalAttention { qkv, heads, block, .. } => Op::CausalAttention { qkv, heads, block, probs: Vec::new() },
        Op::CrossEntropy { logits, .. } => {
            Op::CrossEntropy { logits, targets: Vec::new(), weights: Vec::new(), probs: Vec::new() }
        }
        Op::LayerNorm { x, gamma, beta, .. } => Op::LayerNorm { x, gamma, beta, stats: Vec::new() },
        other => other,
    }
}

fn acc<T: Float>(grads: &mut [Option<Vec<T>>], i: usize, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[i].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

pub(crate) fn softmax_row<T: Float>(src: &[T], dst: &mut [T]) {
    let max = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum = sum + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Float>(
    qkv: &[T],
    g: &[T],
    probs: &[T],
    dst: &mut [T],
    rows: usize,
    width: usize,
    heads: usize,
    block: usize,
) {
    let d = width / 3;
    let dh = d / heads;
    let blocks = rows / block;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut dp = vec![T::zero(); block * block];
    for bl in 0..blocks {
        for h in 0..heads {
            let p = &probs[(bl * heads + h) * block * block..(bl * heads + h + 1) * block * block];
            let p_view = View::dense(p, block, block);
            let base = bl * block * width;
            let view = |off: usize| View { data: qkv, offset: base + off + h * dh, rows: block, cols: dh, rs: width, cs: 1 };
            let go = View { data: g, offset: bl * block * d + h * dh, rows: block, cols: dh, rs: d, cs: 1 };
            // dV = P^T dO
            gemm(
                p_view.t(),
                go,
                T::one(),
                ViewMut { data: dst, offset: base + 2 * d + h * dh, rows: block, cols: dh, rs: width, cs: 1 },
            );
            // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
            gemm(go, view(2 * d).t(), T::zero(), ViewMut::dense(&mut dp, block, block));
            for r in 0..block {
                let pr = &p[r * block..(r + 1) * block];
                let dr = &mut dp[r * block..(r + 1) * block];
                let dot = pr[..=r].iter().zip(&dr[..=r]).fold(T::zero(), |s, (&a, &b)| s + a * b);
                for c in 0..block {
                    dr[c] = if c <= r { pr[c] * (dr[c] - dot) * scale } else { T::zero() };
                }
            }
            let ds = View::dense(&dp, block, block);
            // dQ = dS K, dK = dS^T Q
            gemm(
                ds,
                view(d),
                T::one(),
                ViewMut { data: dst, offset: base + h * dh, rows: block, cols: dh, rs: width, cs: 1 },
            );
            gemm(
                ds.t(),
                view(0),
                T::one(),
                ViewMut { data: dst, offset: base + d + h * dh, rows: block, cols: dh, rs: width, cs: 1 },
            );
        }
    }
}
