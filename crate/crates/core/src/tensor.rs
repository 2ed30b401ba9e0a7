//! Dense row-major matrices and the numeric kernels shared by the
//! autodiff tape and the no-grad inference path.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type. Training runs in `f32`; gradient checks
/// run the identical code in `f64`.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static {
    /// `C <- alpha * A * B + beta * C` over strided views.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[inline]
pub fn cst<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("constant representable")
}

/// A strided read-only view used to express transposes and column blocks
/// without copying.
#[derive(Clone, Copy)]
pub struct View<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S: Scalar> View<'a, S> {
    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `out <- alpha * a * b + beta * out`, where `out` is a row-major block
/// starting at `out[0]` with row stride `out_rs`.
pub fn gemm_into<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, out: &mut [S], out_rs: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() > (m - 1) * out_rs + (n - 1), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut out[i * out_rs..i * out_rs + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.data.len() > a.max_index() && b.data.len() > b.max_index());
    // SAFETY: bounds of every view were checked above.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            out_rs as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    /// The single element of a 1×1 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn view(&self) -> View<'_, S> {
        View { data: &self.data, rows: self.rows, cols: self.cols, rs: self.cols, cs: 1 }
    }

    /// Columns `[start, start + width)` as a strided view.
    pub fn col_block(&self, start: usize, width: usize) -> View<'_, S> {
        assert!(start + width <= self.cols);
        View { data: &self.data[start.min(self.data.len())..], rows: self.rows, cols: width, rs: self.cols, cs: 1 }
    }

    pub fn push_row(&mut self, row: &[S]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn append_rows(&mut self, other: &Tensor<S>) {
        if other.rows == 0 {
            return;
        }
        if self.rows == 0 && self.cols == 0 {
            self.cols = other.cols;
        }
        assert_eq!(self.cols, other.cols, "append_rows width mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<S> {
        assert!(start <= end && end <= self.rows);
        Tensor::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<S> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(idx.len(), self.cols, data)
    }

    pub fn concat_rows(parts: &[&Tensor<S>]) -> Tensor<S> {
        let cols = parts.iter().find(|p| p.rows > 0).map_or_else(|| parts.first().map_or(0, |p| p.cols), |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rows == 0 {
                continue;
            }
            assert_eq!(p.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        matmul_views(self.view(), other.view())
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Tensor<S>) -> Tensor<S> {
        matmul_views(self.view().t(), other.view())
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Tensor<S> {
        matmul_views(self.view(), other.view().t())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: S) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_assign(&mut self, bias: &[S]) {
        assert_eq!(bias.len(), self.cols);
        for r in self.data.chunks_mut(self.cols.max(1)) {
            for (a, &b) in r.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn column_means(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = S::from_usize(self.rows.max(1)).unwrap();
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

pub fn matmul_views<S: Scalar>(a: View<'_, S>, b: View<'_, S>) -> Tensor<S> {
    let mut out = Tensor::zeros(a.rows, b.cols);
    let n = b.cols;
    gemm_into(S::one(), a, b, S::zero(), &mut out.data, n);
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns the output along with the
/// per-row mean and reciprocal standard deviation used by the backward pass.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &[S], bias: &[S]) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let d = x.cols();
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut out = Tensor::zeros(x.rows(), d);
    let mut means = Vec::with_capacity(x.rows());
    let mut rstds = Vec::with_capacity(x.rows());
    let inv_d = S::one() / S::from_usize(d).unwrap();
    let eps = cst::<S>(LN_EPS);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rstd = S::one() / (var + eps).sqrt();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<S: Scalar>(x: S) -> S {
    let c = cst::<S>(GELU_C);
    let a = cst::<S>(GELU_A);
    let half = cst::<S>(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = cst::<S>(GELU_C);
    let a = cst::<S>(GELU_A);
    let half = cst::<S>(0.5);
    let three = cst::<S>(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Row-wise softmax in place.
pub fn softmax_rows_inplace<S: Scalar>(t: &mut Tensor<S>) {
    let cols = t.cols();
    if cols == 0 {
        return;
    }
    for r in t.data_mut().chunks_mut(cols) {
        softmax_inplace(r);
    }
}

pub fn softmax_inplace<S: Scalar>(r: &mut [S]) {
    let m = r.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut z = S::zero();
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in r.iter_mut() {
        *v /= z;
    }
}

pub fn log_softmax_inplace<S: Scalar>(r: &mut [S]) {
    let m = r.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let lse = r.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
    for v in r.iter_mut() {
        *v -= lse;
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is n×d, `k` and `v` are m×d. Query row `i` sits at absolute position
/// `offset + i`; with `causal`, it attends to key rows `j <= offset + i` only.
/// Returns the n×d output and the attention probabilities, stacked per head
/// as an (heads·n)×m matrix with masked entries exactly zero.
pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    offset: usize,
    causal: bool,
) -> (Tensor<S>, Tensor<S>) {
    let (n, d) = q.shape();
    let m = k.rows();
    assert_eq!(k.cols(), d);
    assert_eq!(v.shape(), (m, d));
    assert!(heads > 0 && d % heads == 0, "heads must divide width");
    if causal {
        assert!(offset + n <= m, "causal attention beyond key range");
    }
    let dh = d / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut probs = Tensor::zeros(heads * n, m);
    let mut out = Tensor::zeros(n, d);
    if n == 0 || m == 0 {
        return (out, probs);
    }
    for h in 0..heads {
        let block = &mut probs.data_mut()[h * n * m..(h + 1) * n * m];
        gemm_into(scale, q.col_block(h * dh, dh), k.col_block(h * dh, dh).t(), S::zero(), block, m);
        for i in 0..n {
            let row = &mut block[i * m..(i + 1) * m];
            let visible = if causal { offset + i + 1 } else { m };
            softmax_inplace(&mut row[..visible]);
            for p in &mut row[visible..] {
                *p = S::zero();
            }
        }
        let pview = View { data: &*block, rows: n, cols: m, rs: m, cs: 1 };
        gemm_into(S::one(), pview, v.col_block(h * dh, dh), S::zero(), &mut out.data_mut()[h * dh..], d);
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.transpose().matmul_tn(&b), c);
        assert_eq!(a.matmul_nt(&b.transpose()), c);
    }

    #[test]
    fn causal_attention_rows_ignore_future_keys() {
        let q = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let k = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.11).cos()).collect());
        let v = Tensor::from_vec(3, 4, (0..12).map(|i| i as f64).collect());
        let (out, probs) = attention(&q, &k, &v, 2, 0, true);
        // first query sees only the first key
        assert_eq!(out.row(0), v.row(0));
        for h in 0..2 {
            assert_eq!(probs.get(h * 3, 1), 0.0);
            assert_eq!(probs.get(h * 3 + 1, 2), 0.0);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::from_vec(2, 4, vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let (y, _, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            let var: f64 = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
