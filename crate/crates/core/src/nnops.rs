//! Differentiable numeric primitives used by the sentence encoder.
//!
//! Every forward operation has a matching backward that maps an upstream
//! gradient onto input and parameter gradients. Values are stored in the
//! scalar type `T`; dot products accumulate in `f64`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dense row-major matrix. Used for sentence matrices, intermediate feature
/// maps, filter banks and the dense projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// `d × m` bank holding one length-`m` filter per row.
pub type FilterBank<T> = FeatureMatrix<T>;
/// One bias per row of the matrix being convolved.
pub type BiasBank<T> = Vec<T>;
/// `(K_h·d·k_h) × n` projection from the flattened top-level maps.
pub type DenseMatrix<T> = FeatureMatrix<T>;

impl<T: Real> FeatureMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "FeatureMatrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("FeatureMatrix::from_rows", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "FeatureMatrix::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

#[inline]
fn dot_acc<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_acc() * y.to_acc())
        .sum()
}

/// Wide one-dimensional convolution of a single row.
///
/// `c_j = fᵀ s_{j−m+1..j} + b` for `j` in `[0, L+m−1)`, reading zeros outside
/// `s`. The output is never empty, even when `L < m`.
pub fn wide_conv_row<T: Real>(f: &[T], s: &[T], b: T) -> Vec<T> {
    assert!(
        !f.is_empty() && !s.is_empty(),
        "wide_conv_row needs m, L >= 1"
    );
    let mut out = vec![T::zero(); s.len() + f.len() - 1];
    wide_conv_row_into(f, s, b, &mut out);
    out
}

/// Adds `conv(f, s) + b` into `out`.
#[inline]
fn wide_conv_row_into<T: Real>(f: &[T], s: &[T], b: T, out: &mut [T]) {
    let mut acc = vec![0f64; out.len()];
    conv_row_acc(f, s, b, &mut acc);
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = T::from_acc(o.to_acc() + a);
    }
}

/// `acc = conv(f, s) + b` in f64. Each cell sums the bias first, then the
/// taps in ascending order.
#[inline]
fn conv_row_acc<T: Real>(f: &[T], s: &[T], b: T, acc: &mut [f64]) {
    let m = f.len();
    let len = s.len();
    acc.fill(b.to_acc());
    // tap t writes out[i + (m-1) - t] from s[i]
    for (t, &ft) in f.iter().enumerate() {
        let ft = ft.to_acc();
        let dst = &mut acc[m - 1 - t..m - 1 - t + len];
        for (a, &sv) in dst.iter_mut().zip(s) {
            *a += ft * sv.to_acc();
        }
    }
}

fn check_conv_shapes<T: Real>(
    context: &'static str,
    s: &FeatureMatrix<T>,
    f: &FilterBank<T>,
    bias_len: Option<usize>,
) -> Result<()> {
    if s.rows() == 0 || s.cols() == 0 || f.cols() == 0 {
        return Err(Error::shape(
            context,
            "non-empty input and filter",
            format!("{:?} / {:?}", s.shape(), f.shape()),
        ));
    }
    if f.rows() != s.rows() {
        return Err(Error::shape(
            context,
            format!("{} filter rows", s.rows()),
            f.rows(),
        ));
    }
    if let Some(b) = bias_len {
        if b != s.rows() {
            return Err(Error::shape(context, format!("{} biases", s.rows()), b));
        }
    }
    Ok(())
}

/// Row-wise wide convolution: `d×L → d×(L+m−1)`.
pub fn wide_conv<T: Real>(
    s: &FeatureMatrix<T>,
    f: &FilterBank<T>,
    b: &[T],
) -> Result<FeatureMatrix<T>> {
    check_conv_shapes("wide_conv", s, f, Some(b.len()))?;
    let mut out = FeatureMatrix::zeros(s.rows(), s.cols() + f.cols() - 1);
    wide_conv_accumulate(s, f, b, &mut out);
    Ok(out)
}

/// `out += conv(s, f, b)`; shapes are the caller's responsibility.
pub(crate) fn wide_conv_accumulate<T: Real>(
    s: &FeatureMatrix<T>,
    f: &FilterBank<T>,
    b: &[T],
    out: &mut FeatureMatrix<T>,
) {
    debug_assert_eq!(out.shape(), (s.rows(), s.cols() + f.cols() - 1));
    let mut acc = vec![0f64; out.cols()];
    for r in 0..s.rows() {
        conv_row_acc(f.row(r), s.row(r), b[r], &mut acc);
        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = T::from_acc(o.to_acc() + a);
        }
    }
}

/// Gradients of [`wide_conv`] with respect to its three inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub input: FeatureMatrix<T>,
    pub filter: FilterBank<T>,
    pub bias: BiasBank<T>,
}

pub fn wide_conv_backward<T: Real>(
    s: &FeatureMatrix<T>,
    f: &FilterBank<T>,
    upstream: &FeatureMatrix<T>,
) -> Result<ConvGrads<T>> {
    check_conv_shapes("wide_conv_backward", s, f, None)?;
    let expected = (s.rows(), s.cols() + f.cols() - 1);
    if upstream.shape() != expected {
        return Err(Error::shape(
            "wide_conv_backward upstream",
            format!("{expected:?}"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut grads = ConvGrads {
        input: FeatureMatrix::zeros(s.rows(), s.cols()),
        filter: FeatureMatrix::zeros(f.rows(), f.cols()),
        bias: vec![T::zero(); s.rows()],
    };
    wide_conv_backward_accumulate(
        s,
        f,
        upstream,
        Some(&mut grads.input),
        &mut grads.filter,
        &mut grads.bias,
    );
    Ok(grads)
}

/// Accumulating form of [`wide_conv_backward`]. `d_input` may be skipped when
/// the input is not differentiable.
pub(crate) fn wide_conv_backward_accumulate<T: Real>(
    s: &FeatureMatrix<T>,
    f: &FilterBank<T>,
    upstream: &FeatureMatrix<T>,
    mut d_input: Option<&mut FeatureMatrix<T>>,
    d_filter: &mut FilterBank<T>,
    d_bias: &mut [T],
) {
    let m = f.cols();
    let len = s.cols();
    let mut scratch = vec![0f64; len];
    for r in 0..s.rows() {
        let up = upstream.row(r);
        let sr = s.row(r);
        let fr = f.row(r);

        let db: f64 = up.iter().map(|v| v.to_acc()).sum();
        d_bias[r] = T::from_acc(d_bias[r].to_acc() + db);

        // df[t] = Σ_j up[j] · s[j + t - (m-1)]
        let dfr = d_filter.row_mut(r);
        for (t, df) in dfr.iter_mut().enumerate() {
            // valid j: 0 <= j + t - (m-1) < len
            let j_lo = (m - 1).saturating_sub(t);
            let j_hi = len + m - 1 - t;
            let s_lo = j_lo + t + 1 - m;
            let acc = dot_acc(&up[j_lo..j_hi], &sr[s_lo..s_lo + (j_hi - j_lo)]);
            *df = T::from_acc(df.to_acc() + acc);
        }

        // ds[i] = Σ_t up[i + (m-1) - t] · f[t], taps ascending
        if let Some(d_in) = d_input.as_deref_mut() {
            scratch.fill(0.0);
            for (t, &fv) in fr.iter().enumerate() {
                let fv = fv.to_acc();
                for (a, &u) in scratch.iter_mut().zip(&up[m - 1 - t..m - 1 - t + len]) {
                    *a += fv * u.to_acc();
                }
            }
            for (ds, a) in d_in.row_mut(r).iter_mut().zip(&scratch) {
                *ds = T::from_acc(ds.to_acc() + a);
            }
        }
    }
}

pub fn relu<T: Real>(a: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let mut out = a.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Real>(a: &mut FeatureMatrix<T>) {
    for v in a.as_mut_slice() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Passes `upstream` where the pre-activation is strictly positive; the
/// gradient at exactly zero is zero.
pub fn relu_backward<T: Real>(
    pre: &FeatureMatrix<T>,
    upstream: &FeatureMatrix<T>,
) -> Result<FeatureMatrix<T>> {
    if pre.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", pre.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let data = pre
        .as_slice()
        .iter()
        .zip(upstream.as_slice())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect();
    FeatureMatrix::from_vec(pre.rows(), pre.cols(), data)
}

/// Source positions chosen by k-max pooling of one sequence, ascending.
/// Shorter than `k` when the input had fewer than `k` values.
pub fn kmax_indices<T: Real>(a: &[T], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k.min(a.len()));
    for_each_kmax(a, k, |i| out.push(i));
    out
}

/// Calls `f` with each selected index in ascending order.
#[inline]
fn for_each_kmax<T: Real>(a: &[T], k: usize, mut f: impl FnMut(usize)) {
    if a.len() <= k {
        (0..a.len()).for_each(f);
        return;
    }
    if a.len() > 64 {
        let mut order: Vec<usize> = (0..a.len()).collect();
        // largest first, earliest index on ties
        order.sort_by(|&i, &j| {
            a[j].partial_cmp(&a[i])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        order.truncate(k);
        order.sort_unstable();
        order.into_iter().for_each(f);
        return;
    }
    // i survives when fewer than k entries beat it: larger, or equal and earlier
    for (i, &v) in a.iter().enumerate() {
        let beaten_by = a[..i].iter().filter(|&&u| u >= v).count()
            + a[i + 1..].iter().filter(|&&u| u > v).count();
        if beaten_by < k {
            f(i);
        }
    }
}

/// The `k` largest values of `a` in their original order, zero-padded on the
/// right when `a` is shorter than `k`.
pub fn kmax_pool<T: Real>(a: &[T], k: usize) -> Vec<T> {
    assert!(k >= 1, "k-max pooling needs k >= 1");
    let mut out: Vec<T> = kmax_indices(a, k).into_iter().map(|i| a[i]).collect();
    out.resize(k, T::zero());
    out
}

/// Which input column feeds each pooled cell; `None` marks zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KmaxSelection {
    rows: usize,
    k: usize,
    input_cols: usize,
    source: Vec<Option<u32>>,
}

impl KmaxSelection {
    pub fn source(&self, row: usize, cell: usize) -> Option<usize> {
        self.source[row * self.k + cell].map(|c| c as usize)
    }

    pub fn input_cols(&self) -> usize {
        self.input_cols
    }
}

/// Row-wise k-max pooling `d×L → d×k`.
pub fn kmax_pool_matrix<T: Real>(
    a: &FeatureMatrix<T>,
    k: usize,
) -> (FeatureMatrix<T>, KmaxSelection) {
    assert!(k >= 1, "k-max pooling needs k >= 1");
    let mut out = FeatureMatrix::zeros(a.rows(), k);
    let mut source = vec![None; a.rows() * k];
    for r in 0..a.rows() {
        let row = a.row(r);
        let mut cell = 0;
        let dst = out.row_mut(r);
        for_each_kmax(row, k, |idx| {
            dst[cell] = row[idx];
            source[r * k + cell] = Some(idx as u32);
            cell += 1;
        });
    }
    let sel = KmaxSelection {
        rows: a.rows(),
        k,
        input_cols: a.cols(),
        source,
    };
    (out, sel)
}

/// Routes the pooled gradient back to the selected source columns.
pub fn kmax_backward<T: Real>(
    sel: &KmaxSelection,
    upstream: &FeatureMatrix<T>,
) -> Result<FeatureMatrix<T>> {
    if upstream.shape() != (sel.rows, sel.k) {
        return Err(Error::shape(
            "kmax_backward",
            format!("{:?}", (sel.rows, sel.k)),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut grad = FeatureMatrix::zeros(sel.rows, sel.input_cols);
    for r in 0..sel.rows {
        for cell in 0..sel.k {
            if let Some(c) = sel.source(r, cell) {
                let v = grad.get(r, c) + upstream.get(r, cell);
                grad.set(r, c, v);
            }
        }
    }
    Ok(grad)
}

/// `x = pᵀH`.
pub fn dense_forward<T: Real>(p: &[T], h: &DenseMatrix<T>) -> Result<Vec<T>> {
    if p.len() != h.rows() {
        return Err(Error::shape("dense_forward", h.rows(), p.len()));
    }
    let mut acc = vec![0f64; h.cols()];
    for (i, &pi) in p.iter().enumerate() {
        let pi = pi.to_acc();
        if pi == 0.0 {
            continue;
        }
        for (a, &hv) in acc.iter_mut().zip(h.row(i)) {
            *a += pi * hv.to_acc();
        }
    }
    Ok(acc.into_iter().map(T::from_acc).collect())
}

/// Returns `dp = H·dx` and accumulates `dH += p ⊗ dx`.
pub fn dense_backward<T: Real>(
    p: &[T],
    h: &DenseMatrix<T>,
    dx: &[T],
    d_h: &mut DenseMatrix<T>,
) -> Result<Vec<T>> {
    if p.len() != h.rows() || dx.len() != h.cols() || d_h.shape() != h.shape() {
        return Err(Error::shape(
            "dense_backward",
            format!("p {} / dx {} / dH {:?}", h.rows(), h.cols(), h.shape()),
            format!("p {} / dx {} / dH {:?}", p.len(), dx.len(), d_h.shape()),
        ));
    }
    let mut dp = Vec::with_capacity(p.len());
    for (i, &pi) in p.iter().enumerate() {
        dp.push(T::from_acc(dot_acc(h.row(i), dx)));
        let pi = pi.to_acc();
        if pi != 0.0 {
            for (g, &d) in d_h.row_mut(i).iter_mut().zip(dx) {
                *g = T::from_acc(g.to_acc() + pi * d.to_acc());
            }
        }
    }
    Ok(dp)
}

/// Inverted dropout. Returns the output and the per-unit scale mask (`0` for
/// dropped units, `1/(1−rate)` for kept ones). Inference is the identity.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    p: &[T],
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((p.to_vec(), vec![T::one(); p.len()]));
    }
    let keep = T::from_acc(1.0 / (1.0 - rate));
    let mask: Vec<T> = p
        .iter()
        .map(|_| if rng.gen_bool(rate) { T::zero() } else { keep })
        .collect();
    let out = p.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Zero-extended sliding window, written independently of the kernel.
    fn naive_conv_row(f: &[f64], s: &[f64], b: f64) -> Vec<f64> {
        let m = f.len() as isize;
        let len = s.len() as isize;
        (0..(len + m - 1))
            .map(|j| {
                let mut acc = b;
                for t in 0..m {
                    let idx = j - m + 1 + t;
                    if idx >= 0 && idx < len {
                        acc += f[t as usize] * s[idx as usize];
                    }
                }
                acc
            })
            .collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn conv_row_examples() {
        assert_eq!(
            naive_conv_row(&[1., 1.], &[1., 2., 3.], 0.),
            vec![1., 3., 5., 3.]
        );
        assert_eq!(
            wide_conv_row(&[1f64, 1.], &[1., 2., 3.], 0.),
            vec![1., 3., 5., 3.]
        );
        assert_eq!(
            wide_conv_row(&[0f64; 3], &[4., 5., 6., 7.], 0.),
            vec![0.; 6]
        );
        assert_eq!(naive_conv_row(&[2.], &[1., 2.], 1.), vec![3., 5.]);
        assert_eq!(wide_conv_row(&[2f64], &[1., 2.], 1.), vec![3., 5.]);
    }

    #[test]
    fn conv_row_shorter_than_filter() {
        let f = [1.0f64, -2.0, 0.5, 3.0];
        let s = [2.0f64];
        assert_eq!(wide_conv_row(&f, &s, 0.25), naive_conv_row(&f, &s, 0.25));
    }

    #[test]
    fn conv_matrix_shape_and_bias() {
        let s = FeatureMatrix::<f32>::zeros(4, 6);
        let f = FeatureMatrix::zeros(4, 3);
        let b = vec![0.5f32, -1.0, 2.0, 0.0];
        let c = wide_conv(&s, &f, &b).unwrap();
        assert_eq!(c.shape(), (4, 8));
        for r in 0..4 {
            assert!(c.row(r).iter().all(|&v| v == b[r]));
        }
    }

    #[test]
    fn conv_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_matrix(&mut rng, 3, 5);
        let f = random_matrix(&mut rng, 3, 2);
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = wide_conv(&s, &f, &b).unwrap();
        for r in 0..3 {
            assert_eq!(
                c.row(r),
                naive_conv_row(f.row(r), s.row(r), b[r]).as_slice()
            );
        }
    }

    #[test]
    fn conv_rejects_mismatched_rows() {
        let s = FeatureMatrix::<f32>::zeros(4, 6);
        let f = FeatureMatrix::zeros(3, 3);
        assert!(matches!(
            wide_conv(&s, &f, &[0.; 4]),
            Err(Error::Shape { .. })
        ));
        let f = FeatureMatrix::zeros(4, 3);
        assert!(matches!(
            wide_conv(&s, &f, &[0.; 3]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_matrix(&mut rng, 2, 4);
        let f = random_matrix(&mut rng, 2, 2);
        let g = wide_conv_backward(&s, &f, &FeatureMatrix::zeros(2, 5)).unwrap();
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.filter.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_bias_is_row_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_matrix(&mut rng, 3, 4);
        let f = random_matrix(&mut rng, 3, 3);
        let up = random_matrix(&mut rng, 3, 6);
        let g = wide_conv_backward(&s, &f, &up).unwrap();
        for r in 0..3 {
            let sum: f64 = up.row(r).iter().sum();
            assert!((g.bias[r] - sum).abs() < 1e-12);
        }
    }

    /// Central differences of `Σ upstream ⊙ conv(S, F, B)` in 32-bit.
    #[test]
    fn conv_backward_matches_finite_differences_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let to32 = |m: FeatureMatrix<f64>| {
            FeatureMatrix::from_vec(
                m.rows(),
                m.cols(),
                m.as_slice().iter().map(|&v| v as f32).collect(),
            )
            .unwrap()
        };
        let s = to32(random_matrix(&mut rng, 2, 4));
        let f = to32(random_matrix(&mut rng, 2, 2));
        let b = vec![0.3f32, -0.2];
        let up = to32(random_matrix(&mut rng, 2, 5));
        let g = wide_conv_backward(&s, &f, &up).unwrap();

        let objective = |s: &FeatureMatrix<f32>, f: &FeatureMatrix<f32>, b: &[f32]| -> f64 {
            let c = wide_conv(s, f, b).unwrap();
            c.as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(&a, &u)| a as f64 * u as f64)
                .sum()
        };
        let h = 1e-3f32;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-2);

        for i in 0..s.as_slice().len() {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp.as_mut_slice()[i] += h;
            sm.as_mut_slice()[i] -= h;
            let n = (objective(&sp, &f, &b) - objective(&sm, &f, &b)) / (2.0 * h as f64);
            assert!(rel(g.input.as_slice()[i] as f64, n) < 1e-3);
        }
        for i in 0..f.as_slice().len() {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp.as_mut_slice()[i] += h;
            fm.as_mut_slice()[i] -= h;
            let n = (objective(&s, &fp, &b) - objective(&s, &fm, &b)) / (2.0 * h as f64);
            assert!(rel(g.filter.as_slice()[i] as f64, n) < 1e-3);
        }
        for i in 0..2 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let n = (objective(&s, &f, &bp) - objective(&s, &f, &bm)) / (2.0 * h as f64);
            assert!(rel(g.bias[i] as f64, n) < 1e-3);
        }
    }

    #[test]
    fn relu_forward_and_backward() {
        let a = FeatureMatrix::from_vec(1, 3, vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&a).as_slice(), &[0.0, 0.0, 2.0]);
        let neg = FeatureMatrix::from_vec(2, 2, vec![-1.0f32, -2.0, -0.5, -3.0]).unwrap();
        assert!(relu(&neg).as_slice().iter().all(|&v| v == 0.0));
        let up = FeatureMatrix::from_vec(1, 3, vec![5.0f32, 6.0, 7.0]).unwrap();
        assert_eq!(relu_backward(&a, &up).unwrap().as_slice(), &[0.0, 0.0, 7.0]);
    }

    #[test]
    fn kmax_examples() {
        assert_eq!(kmax_pool(&[3.0f32, 1.0, 5.0], 2), vec![3.0, 5.0]);
        assert_eq!(
            kmax_pool(&[1.0f32, 5.0, 2.0, 4.0, 3.0], 3),
            vec![5.0, 4.0, 3.0]
        );
        assert_eq!(kmax_pool(&[2.0f32, 7.0], 3), vec![2.0, 7.0, 0.0]);
        assert_eq!(kmax_indices(&[2.0f32, 2.0, 2.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn kmax_matrix_shape_and_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 4, 8);
        let (p, sel) = kmax_pool_matrix(&a, 5);
        assert_eq!(p.shape(), (4, 5));

        let short = FeatureMatrix::from_vec(1, 2, vec![1.0f64, -3.0]).unwrap();
        let (p, sel_short) = kmax_pool_matrix(&short, 3);
        assert_eq!(p.as_slice(), &[1.0, -3.0, 0.0]);
        let up = FeatureMatrix::from_vec(1, 3, vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(
            kmax_backward(&sel_short, &up).unwrap().as_slice(),
            &[10.0, 20.0]
        );

        let up = FeatureMatrix::from_vec(4, 5, vec![1.0; 20]).unwrap();
        let g = kmax_backward(&sel, &up).unwrap();
        for r in 0..4 {
            let picked: Vec<usize> = (0..5).map(|c| sel.source(r, c).unwrap()).collect();
            for c in 0..8 {
                let expected = if picked.contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(g.get(r, c), expected);
            }
        }
    }

    #[test]
    fn dense_identity_and_shapes() {
        let p = vec![1.0f64, -2.0, 3.0];
        assert_eq!(dense_forward(&p, &FeatureMatrix::identity(3)).unwrap(), p);
        let h = FeatureMatrix::<f32>::zeros(24, 5);
        assert_eq!(dense_forward(&[0.0; 24], &h).unwrap().len(), 5);
        assert!(dense_forward(&[0.0f32; 23], &h).is_err());
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = random_matrix(&mut rng, 6, 4);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &[f64], h: &FeatureMatrix<f64>| -> f64 {
            dense_forward(p, h)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut dh = FeatureMatrix::zeros(6, 4);
        let dp = dense_backward(&p, &h, &w, &mut dh).unwrap();
        let eps = 1e-5;
        for i in 0..6 {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp[i] += eps;
            pm[i] -= eps;
            let n = (objective(&pp, &h) - objective(&pm, &h)) / (2.0 * eps);
            assert!((dp[i] - n).abs() < 1e-9);
        }
        for i in 0..24 {
            let (mut hp, mut hm) = (h.clone(), h.clone());
            hp.as_mut_slice()[i] += eps;
            hm.as_mut_slice()[i] -= eps;
            let n = (objective(&p, &hp) - objective(&p, &hm)) / (2.0 * eps);
            assert!((dh.as_slice()[i] - n).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f32> = (0..50).map(|i| i as f32 * 0.37 - 4.0).collect();
        for mode in [Mode::Train, Mode::Infer] {
            let (out, mask) = dropout(&p, 0.0, &mut rng, mode).unwrap();
            assert_eq!(out, p);
            assert!(mask.iter().all(|&m| m == 1.0));
        }
        let (out, _) = dropout(&p, 0.2, &mut rng, Mode::Infer).unwrap();
        assert_eq!(
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(dropout(&p, 1.0, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = vec![1.0f32; 10_000];
        let (out, mask) = dropout(&p, 0.5, &mut rng, Mode::Train).unwrap();
        let dropped = out.iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((dropped - 0.5).abs() <= 0.02, "drop fraction {dropped}");
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
    }
}
