//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse, skipping nodes that do not depend on any
//! gradient-requiring leaf, so frozen sub-networks cost forward time only.

use crate::tensor::{self, cst, Scalar, Tensor, View};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    LogAddExp(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    SumEachRow(Var),
    SumEachCol(Var),
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    PickCols(Var, Vec<usize>),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<S>, rstd: Vec<S> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Tensor<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; no gradient is ever accumulated for it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant carrying the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x · w + b` with `b` a 1×n row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.recip());
        let rg = self.rg(a);
        self.push(value, Op::Recip(a), rg)
    }

    /// Elementwise `ln(e^a + e^b)`, computed stably.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| {
            let m = x.max(y);
            if m == S::neg_infinity() {
                m
            } else {
                m + ((x - m).exp() + (y - m).exp()).ln()
            }
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::LogAddExp(a, b), rg)
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(self.value(b).rows(), 1, "add_row expects a single row");
        value.add_row_assign(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRow(a, b), rg)
    }

    /// Multiplies every row of `a` elementwise by the 1×n row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "mul_row expects a single row");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            value.row_mut(r).iter_mut().zip(bv.data()).for_each(|(x, &s)| *x *= s);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MulRow(a, b), rg)
    }

    /// Multiplies row `i` of `a` by the scalar `c[i]` (`c` is n×1).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let av = self.value(a);
        let cv = self.value(c);
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects an n×1 column");
        let mut value = av.clone();
        for r in 0..value.rows() {
            let s = cv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(value, Op::MulCol(a, c), rg)
    }

    /// n×m → n×1
    pub fn sum_each_row(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().copied().sum()).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::SumEachRow(a), rg)
    }

    /// n×m → 1×m
    pub fn sum_each_col(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut data = vec![S::zero(); av.cols()];
        for r in 0..av.rows() {
            for (o, &x) in data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let value = Tensor::from_vec(1, av.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::SumEachCol(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::from_usize(n).unwrap())
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        tensor::softmax_rows_inplace(&mut value);
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        if cols > 0 {
            for r in value.data_mut().chunks_mut(cols) {
                tensor::log_softmax_inplace(r);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Rows `idx` of `a` (repeats allowed); used for embedding lookups and
    /// row selection.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&refs);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Element `a[i, cols[i]]` for every row `i`, as an n×1 column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), cols.len(), "pick_cols expects one column per row");
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let value = Tensor::from_vec(cols.len(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::PickCols(a, cols.to_vec()), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (value, mean, rstd) = tensor::layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data());
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd }, rg)
    }

    /// Multi-head attention; see [`tensor::attention`] for the masking rule.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let n = self.value(q).rows();
        let m = self.value(k).rows();
        let offset = m.saturating_sub(n);
        let (value, probs) = tensor::attention(self.value(q), self.value(k), self.value(v), heads, offset, causal);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(value, Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b));
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Sqrt(a) => {
                let half = cst::<S>(0.5);
                self.acc(grads, *a, g.zip_map(out, |x, y| x * half / y));
            }
            Op::Recip(a) => self.acc(grads, *a, g.zip_map(out, |x, y| -x * y * y)),
            Op::LogAddExp(a, b) => {
                if self.rg(*a) {
                    let wa = self.value(*a).zip_map(out, |x, r| (x - r).exp());
                    self.acc(grads, *a, g.zip_map(&wa, |x, w| x * w));
                }
                if self.rg(*b) {
                    let wb = self.value(*b).zip_map(out, |x, r| (x - r).exp());
                    self.acc(grads, *b, g.zip_map(&wb, |x, w| x * w));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::MulRow(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        ga.row_mut(r).iter_mut().zip(bv.data()).for_each(|(x, &s)| *x *= s);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += x * y;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::MulCol(a, c) => {
                let av = self.value(*a);
                let cv = self.value(*c);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*c) {
                    let data = (0..g.rows()).map(|r| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum()).collect();
                    self.acc(grads, *c, Tensor::from_vec(g.rows(), 1, data));
                }
            }
            Op::SumEachRow(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let s = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x = s);
                }
                self.acc(grads, *a, ga);
            }
            Op::SumEachCol(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(g.row(0));
                }
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let dot: S = p.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = p[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let lp = out.row(r);
                    let gr = g.row(r);
                    let gs: S = gr.iter().copied().sum();
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = gr[j] - lp[j].exp() * gs;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| x * tensor::gelu_grad(y));
                self.acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if n == 0 {
                        continue;
                    }
                    if self.rg(p) {
                        self.acc(grads, p, g.slice_rows(start, start + n));
                    }
                    start += n;
                }
            }
            Op::PickCols(a, cols) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (row, &col) in cols.iter().enumerate() {
                    ga.set(row, col, g.get(row, 0));
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let (n, d) = xv.shape();
                let inv_d = S::one() / S::from_usize(d).unwrap();
                let mut gx = Tensor::zeros(n, d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                let mut xhat = vec![S::zero(); d];
                let mut dxhat = vec![S::zero(); d];
                for r in 0..n {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        ggain.data_mut()[j] += gr[j] * xhat[j];
                        gbias.data_mut()[j] += gr[j];
                    }
                    let m1: S = dxhat.iter().copied().sum::<S>() * inv_d;
                    let m2: S = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<S>() * inv_d;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gain, ggain);
                self.acc(grads, *bias, gbias);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<S>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows();
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(m, d);
        let mut gv = Tensor::zeros(m, d);
        if n == 0 || m == 0 {
            return;
        }
        let mut dscores = vec![S::zero(); n * m];
        for h in 0..heads {
            let p = &probs.data()[h * n * m..(h + 1) * n * m];
            let pview = View { data: p, rows: n, cols: m, rs: m, cs: 1 };
            let gblock = g.col_block(h * dh, dh);
            // dV_h = Pᵀ dO_h
            tensor::gemm_into(S::one(), pview.t(), gblock, S::one(), &mut gv.data_mut()[h * dh..], d);
            // dP = dO_h V_hᵀ
            tensor::gemm_into(S::one(), gblock, vv.col_block(h * dh, dh).t(), S::zero(), &mut dscores, m);
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dscores[i * m..(i + 1) * m];
                let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot);
                }
            }
            let sview = View { data: &dscores, rows: n, cols: m, rs: m, cs: 1 };
            tensor::gemm_into(scale, sview, kv.col_block(h * dh, dh), S::one(), &mut gq.data_mut()[h * dh..], d);
            tensor::gemm_into(scale, sview.t(), qv.col_block(h * dh, dh), S::one(), &mut gk.data_mut()[h * dh..], d);
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}
