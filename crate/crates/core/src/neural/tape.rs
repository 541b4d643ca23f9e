//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! by reference (no copy) through [`Tape::param`]; frozen inputs enter
//! through [`Tape::constant`]. [`Tape::backward`] walks the record in reverse
//! and returns the gradient of a scalar loss with respect to every node that
//! depends on a parameter.

use super::tensor::{gemm_view, Scalar, Tensor, View, ViewMut};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a stacked batch: query rows
/// `[q_start, q_start+q_len)` attend over key rows `[k_start, k_start+k_len)`,
/// of which only the first `k_valid` are visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub k_valid: usize,
}

impl Segment {
    /// Self-attention over `len` rows starting at `start`, all visible.
    pub fn square(start: usize, len: usize) -> Self {
        Segment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            k_valid: len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` sees only keys `j <= i` (relative to the segment).
    pub causal: bool,
}

enum Val<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Val<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    MulConst(Var, Tensor<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        /// Softmax weights per segment, per head (`q_len x k_len`).
        probs: Vec<Vec<Tensor<T>>>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SegmentMean { a: Var, segs: Vec<(usize, usize)> },
    RowNorm { a: Var, target: T, norms: Vec<T> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
    },
    WeightedBce { p: Var, labels: Tensor<T>, w: T },
    Sum(Var),
}

struct Node<'p, T> {
    value: Val<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Clamp applied to probabilities inside the weighted BCE.
pub const BCE_CLAMP: f64 = 1e-7;
/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Val<'p, T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Val::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf that owns its value (used by gradient checks).
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Val::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Val::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Val::Borrowed(t), Op::Leaf, false)
    }

    /// `op(a) * op(b)`.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = Tensor::matmul(self.value(a), ta, self.value(b), tb);
        let g = self.g(a) || self.g(b);
        self.push(Val::Owned(out), Op::MatMul { a, b, ta, tb }, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(Val::Owned(out), Op::Add(a, b), g)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, r.cols());
        let g = self.g(a) || self.g(row);
        self.push(Val::Owned(out), Op::AddRow(a, row), g)
    }

    /// `x * w + b` with `w: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let g = self.g(a);
        self.push(Val::Owned(out), Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let g = self.g(a);
        self.push(Val::Owned(out), Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let g = self.g(a);
        self.push(Val::Owned(out), Op::Sigmoid(a), g)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Tensor<T>) -> Var {
        assert_eq!(self.shape(a), m.shape(), "mul_const shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &s) in out.data_mut().iter_mut().zip(m.data()) {
            *o *= s;
        }
        let g = self.g(a);
        self.push(Val::Owned(out), Op::MulConst(a, m), g)
    }

    /// Row-wise layer normalization with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.shape(gain), (1, cols), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, cols), "layer_norm bias shape");
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gg), &bb) in out.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * gg + bb;
            }
        }
        let g = self.g(x) || self.g(gain) || self.g(bias);
        self.push(
            Val::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        )
    }

    /// Multi-head scaled dot-product attention over stacked segments.
    ///
    /// `q`, `k`, `v` hold already-projected rows; head `h` uses columns
    /// `[h*dk, (h+1)*dk)`. Rows of `q` not covered by any segment produce
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.cols(), d, "attention value width");
        assert_eq!(kv.rows(), vv.rows(), "attention key/value rows");
        assert!(spec.heads >= 1 && d % spec.heads == 0, "heads must divide width");
        let dk = d / spec.heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(spec.segments.len());
        for seg in &spec.segments {
            assert!(seg.q_start + seg.q_len <= qv.rows(), "segment query range");
            assert!(seg.k_start + seg.k_len <= kv.rows(), "segment key range");
            assert!(seg.k_valid <= seg.k_len, "segment valid keys");
            if spec.causal {
                assert_eq!(seg.q_len, seg.k_len, "causal attention needs square segments");
            }
            let mut per_head = Vec::with_capacity(spec.heads);
            for h in 0..spec.heads {
                let mut s = Tensor::zeros(seg.q_len, seg.k_len);
                {
                    let qa = View::block(qv, seg.q_start, seg.q_len, h * dk, dk);
                    let kb = View::block(kv, seg.k_start, seg.k_len, h * dk, dk).t();
                    let so = ViewMut::block(&mut s, 0, seg.q_len, 0, seg.k_len);
                    gemm_view(scale, qa, kb, T::zero(), &so);
                }
                for i in 0..seg.q_len {
                    let visible = if spec.causal {
                        (i + 1).min(seg.k_valid)
                    } else {
                        seg.k_valid
                    };
                    softmax_prefix(s.row_mut(i), visible);
                }
                {
                    let pa = View::block(&s, 0, seg.q_len, 0, seg.k_len);
                    let vb = View::block(vv, seg.k_start, seg.k_len, h * dk, dk);
                    let oo = ViewMut::block(&mut out, seg.q_start, seg.q_len, h * dk, dk);
                    gemm_view(T::one(), pa, vb, T::zero(), &oo);
                }
                per_head.push(s);
            }
            probs.push(per_head);
        }
        let g = self.g(q) || self.g(k) || self.g(v);
        self.push(
            Val::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            g,
        )
    }

    /// Attention weights recorded by an attention node, per segment per head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<Tensor<T>>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "gather id {id} out of range");
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let g = self.g(table);
        self.push(
            Val::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(
            Val::Owned(Tensor::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
            g,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols height mismatch");
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(Val::Owned(out), Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let g = self.g(a);
        self.push(Val::Owned(out), Op::SliceRows { a, start }, g)
    }

    /// One output row per `(start, len)` segment: the mean of those rows.
    pub fn segment_mean(&mut self, a: Var, segs: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(segs.len(), av.cols());
        for (r, &(start, len)) in segs.iter().enumerate() {
            assert!(len >= 1 && start + len <= av.rows(), "segment_mean range");
            let inv = T::one() / T::from_usize(len).unwrap();
            let o = out.row_mut(r);
            for i in start..start + len {
                for (x, &v) in o.iter_mut().zip(av.row(i)) {
                    *x += v;
                }
            }
            for x in o.iter_mut() {
                *x *= inv;
            }
        }
        let g = self.g(a);
        self.push(
            Val::Owned(out),
            Op::SegmentMean {
                a,
                segs: segs.to_vec(),
            },
            g,
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let rows = self.value(a).rows();
        self.segment_mean(a, &[(0, rows)])
    }

    /// Scales every row to Euclidean norm `target`.
    ///
    /// Panics on an all-zero row; callers check degenerate inputs first.
    pub fn row_norm(&mut self, a: Var, target: T) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
            assert!(n > T::zero(), "row_norm of a zero row");
            norms.push(n);
            let s = target / n;
            for x in out.row_mut(r) {
                *x *= s;
            }
        }
        let g = self.g(a);
        self.push(Val::Owned(out), Op::RowNorm { a, target, norms }, g)
    }

    /// Summed softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logits row");
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                assert!(t < row.len(), "target {t} out of range");
                loss += lse - row[t];
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let g = self.g(logits);
        self.push(
            Val::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        )
    }

    /// `sum_i -w_i [t_i log p_i + (1 - t_i) log(1 - p_i)]` with
    /// `w_i = w` for negatives and `1 - w` for positives.
    pub fn weighted_bce(&mut self, p: Var, labels: Tensor<T>, w: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), labels.shape(), "weighted_bce shape mismatch");
        let lo = T::lit(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut loss = T::zero();
        for (&pr, &t) in pv.data().iter().zip(labels.data()) {
            let pc = pr.max(lo).min(hi);
            let wi = if t > T::zero() { T::one() - w } else { w };
            loss -= wi * (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
        }
        let g = self.g(p);
        self.push(
            Val::Owned(Tensor::scalar(loss)),
            Op::WeightedBce { p, labels, w },
            g,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.g(a);
        self.push(Val::Owned(Tensor::scalar(s)), Op::Sum(a), g)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.g(*a) {
                    let da = if *ta {
                        Tensor::matmul(bv, *tb, dy, true)
                    } else {
                        Tensor::matmul(dy, false, bv, !*tb)
                    };
                    accumulate(grads, *a, da);
                }
                if self.g(*b) {
                    let db = if *tb {
                        Tensor::matmul(dy, true, av, *ta)
                    } else {
                        Tensor::matmul(av, !*ta, dy, false)
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.g(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.g(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.g(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.g(*row) {
                    accumulate(grads, *row, column_sums(dy));
                }
            }
            Op::Scale(a, s) => {
                if self.g(*a) {
                    accumulate(grads, *a, dy.map(|x| x * *s));
                }
            }
            Op::Relu(a) => {
                let y = node.value.get();
                let mut da = dy.clone();
                for (d, &yy) in da.data_mut().iter_mut().zip(y.data()) {
                    if yy <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = node.value.get();
                let mut da = dy.clone();
                for (d, &yy) in da.data_mut().iter_mut().zip(y.data()) {
                    *d *= yy * (T::one() - yy);
                }
                accumulate(grads, *a, da);
            }
            Op::MulConst(a, m) => {
                let mut da = dy.clone();
                for (d, &s) in da.data_mut().iter_mut().zip(m.data()) {
                    *d *= s;
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                if self.g(*gain) {
                    let mut dg = Tensor::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        for ((o, &d), &xh) in
                            dg.data_mut().iter_mut().zip(dy.row(r)).zip(xhat.row(r))
                        {
                            *o += d * xh;
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.g(*bias) {
                    accumulate(grads, *bias, column_sums(dy));
                }
                if self.g(*x) {
                    let cols = xhat.cols();
                    let n = T::from_usize(cols).unwrap();
                    let mut dx = Tensor::zeros(xhat.rows(), cols);
                    let mut dxh = vec![T::zero(); cols];
                    for r in 0..xhat.rows() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            dxh[c] = dy.get(r, c) * gv.data()[c];
                            s1 += dxh[c];
                            s2 += dxh[c] * xhat.get(r, c);
                        }
                        let k = inv_std[r] / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (n * dxh[c] - s1 - xhat.get(r, c) * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.backprop_attention(*q, *k, *v, spec, probs, dy, grads),
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &d) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.g(p) {
                        accumulate(grads, p, dy.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.g(p) {
                        let mut dp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        accumulate(grads, p, dp);
                    }
                    off += cols;
                }
            }
            Op::SliceRows { a, start } => {
                let (rows, cols) = self.shape(*a);
                let mut da = Tensor::zeros(rows, cols);
                for r in 0..dy.rows() {
                    da.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                accumulate(grads, *a, da);
            }
            Op::SegmentMean { a, segs } => {
                let (rows, cols) = self.shape(*a);
                let mut da = Tensor::zeros(rows, cols);
                for (r, &(start, len)) in segs.iter().enumerate() {
                    let inv = T::one() / T::from_usize(len).unwrap();
                    for i in start..start + len {
                        for (o, &d) in da.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *o += d * inv;
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::RowNorm { a, target, norms } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let x = av.row(r);
                    let d = dy.row(r);
                    let n = norms[r];
                    let xd = x.iter().zip(d).map(|(&xi, &di)| xi * di).sum::<T>();
                    let k = *target / n;
                    for ((o, &xi), &di) in da.row_mut(r).iter_mut().zip(x).zip(d) {
                        *o = k * (di - xi * xd / (n * n));
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let g = dy.item();
                let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for (o, &p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = g * p;
                        }
                        dl.row_mut(r)[t] -= g;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::WeightedBce { p, labels, w } => {
                let g = dy.item();
                let pv = self.value(*p);
                let lo = T::lit(BCE_CLAMP);
                let hi = T::one() - lo;
                let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                for ((o, &pr), &t) in dp.data_mut().iter_mut().zip(pv.data()).zip(labels.data())
                {
                    if pr < lo || pr > hi {
                        continue;
                    }
                    let wi = if t > T::zero() { T::one() - *w } else { *w };
                    *o = -g * wi * (t / pr - (T::one() - t) / (T::one() - pr));
                }
                accumulate(grads, *p, dp);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(rows, cols, dy.item()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[Vec<Tensor<T>>],
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dk = d / spec.heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dkm = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        for (seg, per_head) in spec.segments.iter().zip(probs) {
            for (h, p) in per_head.iter().enumerate() {
                // dV_h += P^T dO_h
                {
                    let pa = View::block(p, 0, seg.q_len, 0, seg.k_len).t();
                    let da = View::block(dy, seg.q_start, seg.q_len, h * dk, dk);
                    let o = ViewMut::block(&mut dv, seg.k_start, seg.k_len, h * dk, dk);
                    gemm_view(T::one(), pa, da, T::one(), &o);
                }
                // dP = dO_h V_h^T, then softmax backward in place.
                let mut ds = Tensor::zeros(seg.q_len, seg.k_len);
                {
                    let da = View::block(dy, seg.q_start, seg.q_len, h * dk, dk);
                    let vb = View::block(vv, seg.k_start, seg.k_len, h * dk, dk).t();
                    let o = ViewMut::block(&mut ds, 0, seg.q_len, 0, seg.k_len);
                    gemm_view(T::one(), da, vb, T::zero(), &o);
                }
                for i in 0..seg.q_len {
                    let pr = p.row(i);
                    let row = ds.row_mut(i);
                    let dot = row.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pp) in row.iter_mut().zip(pr) {
                        *x = pp * (*x - dot);
                    }
                }
                // dQ_h += scale dS K_h ; dK_h += scale dS^T Q_h
                {
                    let sa = View::block(&ds, 0, seg.q_len, 0, seg.k_len);
                    let kb = View::block(kv, seg.k_start, seg.k_len, h * dk, dk);
                    let o = ViewMut::block(&mut dq, seg.q_start, seg.q_len, h * dk, dk);
                    gemm_view(scale, sa, kb, T::one(), &o);
                }
                {
                    let sa = View::block(&ds, 0, seg.q_len, 0, seg.k_len).t();
                    let qa = View::block(qv, seg.q_start, seg.q_len, h * dk, dk);
                    let o = ViewMut::block(&mut dkm, seg.k_start, seg.k_len, h * dk, dk);
                    gemm_view(scale, sa, qa, T::one(), &o);
                }
            }
        }
        if self.g(q) {
            accumulate(grads, q, dq);
        }
        if self.g(k) {
            accumulate(grads, k, dkm);
        }
        if self.g(v) {
            accumulate(grads, v, dv);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not depend
    /// on it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// In-place softmax over the first `visible` entries; the rest become 0.
fn softmax_prefix<T: Scalar>(row: &mut [T], visible: usize) {
    if visible == 0 {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let m = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in &mut row[..visible] {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in &mut row[..visible] {
        *x = *x / total;
    }
    for x in &mut row[visible..] {
        *x = T::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_transposes_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_t(&mut rng, 3, 4);
            let b = rand_t(&mut rng, if ta == tb { 4 } else { 3 }, if ta == tb { 3 } else { 4 });
            let (a2, b2) = (a.clone(), b.clone());
            let b2 = if ta == tb { b2 } else { b2 };
            let report = check_gradients(&[a2, b2], 1e-5, |tape, p| {
                let m = tape.matmul_t(p[0], ta, p[1], tb);
                let s = tape.sigmoid(m);
                tape.sum(s)
            });
            assert!(report.max_rel_err <= 1e-6, "ta={ta} tb={tb}: {report:?}");
        }
    }

    #[test]
    fn structural_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, 5, 4);
        let b = rand_t(&mut rng, 2, 4);
        let w = rand_t(&mut rng, 8, 3);
        let report = check_gradients(&[a, b, w], 1e-5, |tape, p| {
            let cat = tape.concat_rows(&[p[0], p[1]]);
            let sl = tape.slice_rows(cat, 1, 5);
            let g = tape.gather(sl, &[0, 4, 4, 2]);
            let cc = tape.concat_cols(&[g, g]);
            let mm = tape.matmul(cc, p[2]);
            let r = tape.relu(mm);
            let sm = tape.segment_mean(r, &[(0, 2), (1, 3)]);
            let n = tape.row_norm(sm, 2.0);
            let sc = tape.scale(n, 0.7);
            let s = tape.sigmoid(sc);
            tape.sum(s)
        });
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn attention_probabilities_respect_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, 5, 4);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let seg = Segment {
            q_start: 0,
            q_len: 5,
            k_start: 0,
            k_len: 5,
            k_valid: 3,
        };
        let out = tape.attention(
            v,
            v,
            v,
            AttentionSpec {
                heads: 2,
                segments: vec![seg],
                causal: false,
            },
        );
        for head in &tape.attention_probs(out).unwrap()[0] {
            for r in 0..5 {
                let row = head.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(&row[3..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn causal_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_t(&mut rng, 6, 4);
        let k = rand_t(&mut rng, 6, 4);
        let v = rand_t(&mut rng, 6, 4);
        let report = check_gradients(&[q, k, v], 1e-5, |tape, p| {
            let a = tape.attention(
                p[0],
                p[1],
                p[2],
                AttentionSpec {
                    heads: 2,
                    segments: vec![Segment::square(0, 4), Segment::square(4, 2)],
                    causal: true,
                },
            );
            let s = tape.sigmoid(a);
            tape.sum(s)
        });
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }
}
