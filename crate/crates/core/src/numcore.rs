//! Dense f64 linear algebra, activations and finite-difference gradient checks.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Matrix`].
//! Everything here is a pure function of its inputs.

use crate::error::{Error, Result};

pub type DenseVector = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += W x`, unchecked apart from debug assertions.
    #[inline]
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += Wᵀ y`.
    #[inline]
    pub fn tr_matvec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi == 0.0 {
                continue;
            }
            axpy(yi, row, out);
        }
    }

    /// `W += a bᵀ`.
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ai == 0.0 {
                continue;
            }
            axpy(ai, b, row);
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<DenseVector> {
    if w.cols != x.len() {
        return Err(Error::shape("affine (input)", w.cols, x.len()));
    }
    if w.rows != b.len() {
        return Err(Error::shape("affine (bias)", w.rows, b.len()));
    }
    let mut out = b.to_vec();
    w.matvec_acc(x, &mut out);
    Ok(out)
}

pub fn tanh_map(x: &[f64]) -> DenseVector {
    x.iter().map(|v| v.tanh()).collect()
}

/// Logistic function, branching on sign so that `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_map(x: &[f64]) -> DenseVector {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// Squared Euclidean distance.
pub fn l2sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("l2sq", a.len(), b.len()));
    }
    Ok(l2sq_unchecked(a, b))
}

#[inline]
pub(crate) fn l2sq_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn concat(a: &[f64], b: &[f64]) -> DenseVector {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Central-difference gradient of a scalar function.
///
/// A non-finite function value at any probe point is reported as
/// [`Error::Verification`] instead of propagating NaN.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<DenseVector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Verification(format!(
                "non-finite function value probing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Floor applied to the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let out = affine(&Matrix::identity(2), &[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);

        let out = affine(&Matrix::zeros(2, 2), &[3.0, 4.0], &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);

        let w = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let out = affine(&w, &[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![4.0, 1.0]);
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let w = Matrix::zeros(2, 3);
        assert!(matches!(
            affine(&w, &[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            affine(&w, &[1.0, 2.0, 3.0], &[0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_map(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert!((tanh_map(&[1e9])[0] - 1.0).abs() < 1e-12);
        assert!((tanh_map(&[1.0])[0] - 0.7615941559557649).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_map(&[0.0]), vec![0.5]);
        let s = sigmoid(-50.0);
        assert!(s > 0.0 && s < 1e-12);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
        // no overflow at the extremes
        assert!(sigmoid(-700.0) > 0.0);
        assert_eq!(sigmoid(700.0), 1.0);
    }

    #[test]
    fn l2sq_examples() {
        assert_eq!(l2sq(&[7.0, -3.0], &[7.0, -3.0]).unwrap(), 0.0);
        assert_eq!(l2sq(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 25.0);
        assert_eq!(l2sq(&[0.0], &[3.0]).unwrap(), 9.0);
        assert!(l2sq(&[0.0], &[3.0, 1.0]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);

        let g = finite_diff_grad(|x| x.iter().sum(), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        for gi in g {
            assert!((gi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let r = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Verification(_))));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn matrix_transpose_products_agree() {
        let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]);
        let y = [2.0, -3.0];
        let mut out = vec![0.0; 3];
        w.tr_matvec_acc(&y, &mut out);
        assert_eq!(out, vec![5.0, 2.5, 0.0]);

        let mut g = Matrix::zeros(2, 3);
        g.add_outer(&y, &[1.0, 0.0, -1.0]);
        assert_eq!(g.as_slice(), &[2.0, 0.0, -2.0, -3.0, 0.0, 3.0]);
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn l2sq_symmetric_and_translation_invariant((a, b, v) in vec_pair()) {
            let ab = l2sq(&a, &b).unwrap();
            prop_assert_eq!(ab, l2sq(&b, &a).unwrap());
            prop_assert_eq!(l2sq(&a, &a).unwrap(), 0.0);
            let av: Vec<f64> = a.iter().zip(&v).map(|(x, y)| x + y).collect();
            let bv: Vec<f64> = b.iter().zip(&v).map(|(x, y)| x + y).collect();
            prop_assert!((l2sq(&av, &bv).unwrap() - ab).abs() < 1e-9);
        }

        #[test]
        fn sigmoid_complement(x in -700.0f64..700.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn affine_gradient_matches_finite_differences(
            w in prop::collection::vec(-2.0f64..2.0, 6),
            x in prop::collection::vec(-2.0f64..2.0, 3),
            up in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            // f(x) = upᵀ tanh(Wx + b), df/dx = Wᵀ (up ⊙ (1 - tanh²))
            let w = Matrix::from_vec(2, 3, w).unwrap();
            let b = [0.1, -0.2];
            let f = |x: &[f64]| dot(&up, &tanh_map(&affine(&w, x, &b).unwrap()));
            let out = tanh_map(&affine(&w, &x, &b).unwrap());
            let delta: Vec<f64> = up.iter().zip(&out).map(|(u, o)| u * (1.0 - o * o)).collect();
            let mut analytic = vec![0.0; 3];
            w.tr_matvec_acc(&delta, &mut analytic);
            let numeric = finite_diff_grad(f, &x, 1e-5).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                prop_assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }
}
