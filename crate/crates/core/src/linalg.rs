//! Dense small-matrix numerics.
//!
//! Matrices are `nalgebra::DMatrix<f64>` (column-major storage). The half
//! vectorization `vec_l` stacks the columns of the lower triangle, and
//! [`kappa`] gives the 1-based position of entry `(i, j)` in that ordering.
//! Lyapunov and Sylvester equations are solved by dense Kronecker
//! vectorization, which is exact and cheap for the state dimensions used
//! here (n up to ~10).

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Margin on the spectral abscissa below which a matrix counts as Hurwitz.
pub const HURWITZ_MARGIN: f64 = -1e-9;

/// Number of independent entries of a symmetric `n x n` matrix.
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`tri_len`]: the `n` with `n(n+1)/2 == len`, if any.
pub fn tri_dim(len: usize) -> Option<usize> {
    let n = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (n..=n + 1).find(|&k| tri_len(k) == len)
}

/// 0-based position of entry `(i, j)` with `i >= j` (both 0-based) in `vec_l`.
#[inline]
pub(crate) fn tri_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(j <= i && i < n);
    j * n - j * j.saturating_sub(1) / 2 + (i - j)
}

/// 1-based index of `Z(i, j)` (1-based, `i >= j`) inside `vec_l(Z)`.
pub fn kappa(i: usize, j: usize, n: usize) -> Result<usize> {
    if j < 1 || i < j || i > n {
        return Err(Error::IndexOutOfRange { i, j, n });
    }
    Ok(tri_index(i - 1, j - 1, n) + 1)
}

/// Stacks the columns of the lower triangle of a square matrix.
pub fn vec_l(z: &Mat) -> Result<Vector> {
    if !z.is_square() {
        return Err(Error::Dimension(format!(
            "vec_l needs a square matrix, got {}x{}",
            z.nrows(),
            z.ncols()
        )));
    }
    let n = z.nrows();
    let mut out = Vector::zeros(tri_len(n));
    for j in 0..n {
        for i in j..n {
            out[tri_index(i, j, n)] = z[(i, j)];
        }
    }
    Ok(out)
}

/// Quadratic regressor `phi(x) = vec_l(x x^T)`.
pub fn phi(x: &Vector) -> Vector {
    let n = x.len();
    let mut out = Vector::zeros(tri_len(n));
    for j in 0..n {
        for i in j..n {
            out[tri_index(i, j, n)] = x[i] * x[j];
        }
    }
    out
}

/// Jacobian of [`phi`]: an `n(n+1)/2 x n` matrix.
pub fn grad_vec_l(x: &Vector) -> Mat {
    let n = x.len();
    let mut g = Mat::zeros(tri_len(n), n);
    for j in 0..n {
        for i in j..n {
            let row = tri_index(i, j, n);
            g[(row, i)] += x[j];
            g[(row, j)] += x[i];
        }
    }
    g
}

/// Weights of a quadratic form over the `phi` regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    n: usize,
    w: Vec<f64>,
}

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let n = tri_dim(w.len()).ok_or(Error::NotTriangular(w.len()))?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite weight".into()));
        }
        Ok(Self { n, w })
    }

    pub fn from_vector(w: &Vector) -> Result<Self> {
        Self::new(w.iter().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn to_vector(&self) -> Vector {
        Vector::from_column_slice(&self.w)
    }

    /// Evaluates `phi(x)^T w`.
    pub fn eval(&self, x: &Vector) -> f64 {
        phi(x).dot(&self.to_vector())
    }
}

/// `W(kappa(i,j)) = P(i,j) + P(j,i) - delta_ij P(i,j)`, so that
/// `x^T P x = phi(x)^T W` for every `x`.
pub fn weights_from_matrix(p: &Mat) -> Result<WeightVector> {
    if !p.is_square() {
        return Err(Error::Dimension(format!(
            "weights_from_matrix needs a square matrix, got {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    let n = p.nrows();
    let mut w = vec![0.0; tri_len(n)];
    for j in 0..n {
        for i in j..n {
            w[tri_index(i, j, n)] = if i == j { p[(i, i)] } else { p[(i, j)] + p[(j, i)] };
        }
    }
    WeightVector::new(w)
}

/// Symmetric matrix whose quadratic form has the given weights.
pub fn matrix_from_weights(w: &WeightVector) -> Mat {
    let n = w.n;
    let mut p = Mat::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = w.w[tri_index(i, j, n)];
            if i == j {
                p[(i, i)] = v;
            } else {
                p[(i, j)] = 0.5 * v;
                p[(j, i)] = 0.5 * v;
            }
        }
    }
    p
}

/// `e^{M t}` (nalgebra's scaling and squaring with Padé approximants).
pub fn expm_at(m: &Mat, t: f64) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension("expm_at needs a square matrix".into()));
    }
    if !t.is_finite() || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("expm_at: non-finite input".into()));
    }
    let e = (m * t).exp();
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "matrix exponential overflowed (|M t|_1 = {:e})",
            (m * t).abs().column_sum().max()
        )));
    }
    Ok(e)
}

pub fn eigenvalues(m: &Mat) -> Vec<Complex<f64>> {
    if m.nrows() == 1 {
        return vec![Complex::new(m[(0, 0)], 0.0)];
    }
    m.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &Mat) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &Mat) -> bool {
    spectral_abscissa(m) <= HURWITZ_MARGIN
}

pub(crate) fn ensure_hurwitz(m: &Mat) -> Result<()> {
    let abscissa = spectral_abscissa(m);
    if abscissa <= HURWITZ_MARGIN {
        Ok(())
    } else {
        Err(Error::NotHurwitz { abscissa })
    }
}

/// Rank threshold used throughout: `max(rows, cols) * sigma_max * 1e-12`.
pub fn rank_threshold(singular_values: &[f64], rows: usize, cols: usize) -> f64 {
    let smax = singular_values.iter().copied().fold(0.0, f64::max);
    rows.max(cols) as f64 * smax * 1e-12
}

/// Thin singular value decomposition `A = U diag(s) V^T` with `s` sorted
/// in descending order; `V` is always square (`cols x cols`).
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

impl Svd {
    /// Minimum-norm least-squares solution, discarding `s <= tol`.
    pub fn solve(&self, b: &Vector, tol: f64) -> Vector {
        let utb = self.u.tr_mul(b);
        let mut y = Vector::zeros(self.v.ncols());
        for (k, &sk) in self.s.iter().enumerate() {
            if sk > tol {
                y[k] = utb[k] / sk;
            }
        }
        &self.v * y
    }
}

/// One-sided Jacobi SVD. Rows are zero-padded up to the column count, so
/// `V` spans the full input space and zero singular values are kept.
///
/// nalgebra's bidiagonal SVD occasionally returns factors that do not
/// reconstruct the input (seen on small rank-deficient operators), which
/// would corrupt rank and least-squares decisions.
pub fn svd(a: &Mat) -> Svd {
    let (rows, n) = a.shape();
    let mut w = if rows < n { a.clone().resize_vertically(n, 0.0) } else { a.clone() };
    let mut v = Mat::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for i in 0..mat.nrows() {
                        let (xp, xq) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * xp - s * xq;
                        mat[(i, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let m = w.nrows();
    let mut u = Mat::zeros(m, n);
    let mut vs = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > 0.0 {
            u.set_column(k, &(w.column(j) / sigma));
        }
        vs.set_column(k, &v.column(j));
        s.push(sigma);
    }
    Svd {
        u: u.rows(0, rows).into_owned(),
        s,
        v: vs,
    }
}

/// Singular values of a complex matrix via its real embedding
/// `[[Re, -Im], [Im, Re]]`, which doubles every singular value.
pub fn complex_singular_values(z: &nalgebra::DMatrix<Complex<f64>>) -> Vec<f64> {
    let emb = real_embedding(z);
    svd(&emb).s.into_iter().step_by(2).collect()
}

pub(crate) fn real_embedding(z: &nalgebra::DMatrix<Complex<f64>>) -> Mat {
    let (r, c) = z.shape();
    Mat::from_fn(2 * r, 2 * c, |i, j| {
        let v = z[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

pub fn singular_values(m: &Mat) -> Vec<f64> {
    let mut s = svd(m).s;
    s.truncate(m.nrows().min(m.ncols()));
    s
}

pub fn numerical_rank(m: &Mat) -> usize {
    let s = singular_values(m);
    let tol = rank_threshold(&s, m.nrows(), m.ncols());
    s.iter().filter(|&&v| v > tol).count()
}

/// 2-norm condition number; infinite when the smallest retained singular
/// value vanishes.
pub fn condition_number(m: &Mat) -> f64 {
    if m.nrows() < m.ncols() {
        return f64::INFINITY;
    }
    let s = singular_values(m);
    match (s.first(), s.get(m.ncols().min(m.nrows()).saturating_sub(1))) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

fn max_abs_asym(p: &Mat) -> f64 {
    (p - p.transpose()).abs().max()
}

pub(crate) fn symmetrize(p: &Mat) -> Mat {
    (p + p.transpose()) * 0.5
}

pub(crate) fn ensure_square(m: &Mat, what: &str) -> Result<usize> {
    if m.is_square() {
        Ok(m.nrows())
    } else {
        Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Solves `P Acl + Acl^T P = -Qbar` for a Hurwitz `Acl`.
pub fn solve_lyapunov(acl: &Mat, qbar: &Mat) -> Result<Mat> {
    let n = ensure_square(acl, "Acl")?;
    if qbar.shape() != (n, n) {
        return Err(Error::Dimension("Qbar must match Acl".into()));
    }
    ensure_hurwitz(acl)?;
    let at = acl.transpose();
    let eye = Mat::identity(n, n);
    let op = at.kronecker(&eye) + eye.kronecker(&at);
    let rhs = -Vector::from_column_slice(qbar.as_slice());
    let s = singular_values(&op);
    if s[s.len() - 1] <= s[0] * (n * n) as f64 * f64::EPSILON {
        return Err(Error::Singular("Lyapunov operator"));
    }
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("Lyapunov operator"))?;
    let p = Mat::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&p))
}

/// Solution of a possibly singular Sylvester-type equation.
#[derive(Debug, Clone)]
pub struct SylvesterSolution {
    /// Minimum-norm solution.
    pub x: Mat,
    /// Dimension of the kernel of the linear map.
    pub nullity: usize,
    /// Basis of the kernel, each element shaped like `x`.
    pub kernel: Vec<Mat>,
}

/// Solves `op * vec(X) = vec(W)` with `X` of shape `rows x cols`.
fn solve_vectorized(
    op: Mat,
    rhs: Vector,
    rows: usize,
    cols: usize,
    context: &'static str,
) -> Result<SylvesterSolution> {
    let unknowns = op.ncols();
    let dec = svd(&op);
    let tol = rank_threshold(&dec.s, op.nrows(), unknowns).max(f64::MIN_POSITIVE);
    let sol = dec.solve(&rhs, tol);
    let residual = (&op * &sol - &rhs).norm();
    if residual > 1e-9 * rhs.norm().max(1.0) {
        return Err(Error::Inconsistent { context, residual });
    }
    let kernel: Vec<Mat> = (0..unknowns)
        .filter(|&k| dec.s[k] <= tol)
        .map(|k| Mat::from_column_slice(rows, cols, dec.v.column(k).as_slice()))
        .collect();
    Ok(SylvesterSolution {
        x: Mat::from_column_slice(rows, cols, sol.as_slice()),
        nullity: kernel.len(),
        kernel,
    })
}

/// Solves `A1 X + X A2 = W`.
///
/// When the spectra of `A1` and `-A2` intersect the map is singular; a
/// minimum-norm solution is returned together with the kernel if `W` lies
/// in the image, otherwise [`Error::Inconsistent`].
pub fn solve_sylvester(a1: &Mat, a2: &Mat, w: &Mat) -> Result<SylvesterSolution> {
    let p = ensure_square(a1, "A1")?;
    let q = ensure_square(a2, "A2")?;
    if w.shape() != (p, q) {
        return Err(Error::Dimension(format!(
            "W must be {p}x{q}, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let op = Mat::identity(q, q).kronecker(a1) + a2.transpose().kronecker(&Mat::identity(p, p));
    solve_vectorized(
        op,
        Vector::from_column_slice(w.as_slice()),
        p,
        q,
        "Sylvester equation",
    )
}

/// Solves `Li^T R K + K^T R Li = W2` for `K` (same shape as `Li`).
pub fn solve_sylvester_transpose(li: &Mat, r: &Mat, w2: &Mat) -> Result<SylvesterSolution> {
    let (m, n) = li.shape();
    if r.shape() != (m, m) || w2.shape() != (n, n) {
        return Err(Error::Dimension(
            "Sylvester-transpose: need Li m x n, R m x m, W2 n x n".into(),
        ));
    }
    let left = li.transpose() * r;
    let mut op = Mat::zeros(n * n, m * n);
    for q in 0..n {
        for p in 0..m {
            let mut e = Mat::zeros(m, n);
            e[(p, q)] = 1.0;
            let image = &left * &e + (&left * &e).transpose();
            op.set_column(q * m + p, &Vector::from_column_slice(image.as_slice()));
        }
    }
    solve_vectorized(
        op,
        Vector::from_column_slice(w2.as_slice()),
        m,
        n,
        "Sylvester-transpose equation",
    )
}

/// Output of the model-based Kleinman iteration.
#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: Mat,
    pub k: Mat,
    pub iterations: usize,
    /// Frobenius norm of the Riccati residual at `p`.
    pub residual: f64,
    /// Value matrices `P_0, P_1, ...` in iteration order.
    pub history: Vec<Mat>,
}

/// `P A + A^T P - P B R^{-1} B^T P + Q`.
pub fn care_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let rinv_bt = r
        .clone()
        .lu()
        .solve(&b.transpose())
        .ok_or(Error::Singular("R"))?;
    Ok(p * a + a.transpose() * p - p * b * rinv_bt * p + q)
}

/// `-R^{-1} B^T P`.
pub fn gain_from_value(p: &Mat, b: &Mat, r: &Mat) -> Result<Mat> {
    if b.nrows() != p.nrows() || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("gain_from_value: shapes of P, B, R".into()));
    }
    let rhs = -(b.transpose() * p);
    let lu = r.clone().lu();
    if !lu.is_invertible() {
        return Err(Error::Singular("R"));
    }
    lu.solve(&rhs).ok_or(Error::Singular("R"))
}

/// Model-based Kleinman policy iteration for the stabilizing CARE solution.
pub fn kleinman_care(a: &Mat, b: &Mat, q: &Mat, r: &Mat, k0: &Mat) -> Result<CareSolution> {
    const MAX_ITER: usize = 200;
    let n = ensure_square(a, "A")?;
    let m = b.ncols();
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) || k0.shape() != (m, n) {
        return Err(Error::Dimension("kleinman_care: inconsistent shapes".into()));
    }
    ensure_hurwitz(&(a + b * k0))?;

    let mut k = k0.clone();
    let mut history: Vec<Mat> = Vec::new();
    let mut last_change = f64::INFINITY;
    for it in 0..MAX_ITER {
        let acl = a + b * &k;
        let p = solve_lyapunov(&acl, &(q + k.transpose() * r * &k))?;
        k = gain_from_value(&p, b, r)?;
        if let Some(prev) = history.last() {
            last_change = (&p - prev).norm();
            if last_change <= 1e-12 * p.norm().max(1.0) {
                history.push(p.clone());
                let residual = care_residual(a, b, q, r, &p)?.norm();
                ensure_hurwitz(&(a + b * &k))?;
                return Ok(CareSolution {
                    p,
                    k,
                    iterations: it + 1,
                    residual,
                    history,
                });
            }
        }
        history.push(p);
    }
    Err(Error::NotConverged {
        iterations: MAX_ITER,
        last_change,
    })
}

pub(crate) fn assert_symmetric(p: &Mat, tol: f64) -> bool {
    max_abs_asym(p) <= tol * p.abs().max().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, data)
    }

    #[test]
    fn svd_reconstructs_rank_deficient_operator() {
        let li = Mat::from_column_slice(
            2,
            2,
            &[1.0122894531301856, -1.7856667159349122, -2.3787632310949, -0.8802780816367066],
        );
        let r = Mat::identity(2, 2) * 2.0;
        let left = li.transpose() * &r;
        let mut op = Mat::zeros(4, 4);
        for q in 0..2 {
            for p in 0..2 {
                let mut e = Mat::zeros(2, 2);
                e[(p, q)] = 1.0;
                let image = &left * &e + (&left * &e).transpose();
                op.set_column(q * 2 + p, &Vector::from_column_slice(image.as_slice()));
            }
        }
        let dec = svd(&op);
        let back = &dec.u * Mat::from_diagonal(&Vector::from_vec(dec.s.clone())) * dec.v.transpose();
        assert!((back - &op).amax() < 1e-12);
        assert!((dec.v.transpose() * &dec.v - Mat::identity(4, 4)).amax() < 1e-12);
        assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(numerical_rank(&op), 3);
    }

    #[test]
    fn svd_of_wide_matrix_keeps_full_v() {
        let a = mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let dec = svd(&a);
        assert_eq!(dec.u.shape(), (2, 3));
        assert_eq!(dec.v.shape(), (3, 3));
        assert!(dec.s[2] < 1e-12);
        let back = &dec.u * Mat::from_diagonal(&Vector::from_vec(dec.s.clone())) * dec.v.transpose();
        assert!((back - &a).amax() < 1e-12);
        let x = dec.solve(&Vector::from_vec(vec![1.0, 1.0]), 1e-12);
        assert!((&a * x - Vector::from_vec(vec![1.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn complex_singular_values_match_magnitudes() {
        let z = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex::new(3.0, 4.0),
            Complex::new(0.0, -1.0),
        ]));
        let s = complex_singular_values(&z);
        assert_eq!(s.len(), 2);
        assert!((s[0] - 5.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(1, 1, 3).unwrap(), 1);
        assert_eq!(kappa(3, 3, 3).unwrap(), 6);
        assert_eq!(kappa(2, 1, 3).unwrap(), 2);
        assert_eq!(kappa(2, 2, 3).unwrap(), 4);
        assert!(matches!(kappa(1, 2, 3), Err(Error::IndexOutOfRange { .. })));
        assert!(kappa(4, 1, 3).is_err());
        assert!(kappa(1, 0, 3).is_err());
    }

    #[test]
    fn kappa_is_bijective() {
        for n in 1..8 {
            let mut seen = vec![false; tri_len(n)];
            for j in 1..=n {
                for i in j..=n {
                    let k = kappa(i, j, n).unwrap();
                    assert!(!seen[k - 1]);
                    seen[k - 1] = true;
                }
            }
            assert!(seen.into_iter().all(|s| s));
            assert_eq!(kappa(n, n, n).unwrap(), tri_len(n));
        }
    }

    #[test]
    fn tri_dim_inverts_tri_len() {
        for n in 0..20 {
            assert_eq!(tri_dim(tri_len(n)), Some(n));
        }
        assert_eq!(tri_dim(4), None);
        assert_eq!(tri_dim(7), None);
    }

    #[test]
    fn vec_l_examples() {
        assert_eq!(vec_l(&Mat::identity(2, 2)).unwrap().as_slice(), &[1.0, 0.0, 1.0]);
        assert_eq!(vec_l(&mat(2, 2, &[1., 2., 3., 4.])).unwrap().as_slice(), &[1.0, 3.0, 4.0]);
        assert_eq!(vec_l(&Mat::zeros(3, 3)).unwrap(), Vector::zeros(6));
        assert!(vec_l(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn grad_vec_l_examples() {
        let g = grad_vec_l(&Vector::from_vec(vec![1.0, 2.0]));
        assert_eq!(g, mat(3, 2, &[2., 0., 2., 1., 0., 4.]));
        assert_eq!(grad_vec_l(&Vector::zeros(3)), Mat::zeros(6, 3));
    }

    #[test]
    fn weights_examples() {
        let w = weights_from_matrix(&mat(2, 2, &[2., 1., 1., 3.])).unwrap();
        assert_eq!(w.as_slice(), &[2.0, 2.0, 3.0]);
        let w = weights_from_matrix(&Mat::identity(3, 3)).unwrap();
        assert_eq!(w.as_slice(), &[1., 0., 0., 1., 0., 1.]);
        assert!(weights_from_matrix(&Mat::zeros(2, 3)).is_err());

        let p = matrix_from_weights(&WeightVector::new(vec![2., 2., 3.]).unwrap());
        assert_eq!(p, mat(2, 2, &[2., 1., 1., 3.]));
        let p = matrix_from_weights(&WeightVector::new(vec![1., 0., 0., 1., 0., 1.]).unwrap());
        assert_eq!(p, Mat::identity(3, 3));
        assert_eq!(WeightVector::new(vec![0.0; 4]), Err(Error::NotTriangular(4)));
    }

    #[test]
    fn expm_examples() {
        assert_eq!(expm_at(&Mat::zeros(3, 3), 1.0).unwrap(), Mat::identity(3, 3));
        let e = expm_at(&mat(1, 1, &[-1.0]), 2f64.ln()).unwrap();
        assert!((e[(0, 0)] - 0.5).abs() < 1e-15);
        let e = expm_at(&mat(2, 2, &[0., 1., 0., 0.]), 1.0).unwrap();
        assert!((e - mat(2, 2, &[1., 1., 0., 1.])).norm() < 1e-15);
        assert!(expm_at(&mat(1, 1, &[1.0]), 1e6).is_err());
    }

    #[test]
    fn expm_matches_rotation() {
        // e^{[[0, w], [-w, 0]] t} is a rotation by w t.
        let w = 3.7;
        let t = 2.3;
        let e = expm_at(&mat(2, 2, &[0., w, -w, 0.]), t).unwrap();
        let (s, c) = (w * t).sin_cos();
        let expected = mat(2, 2, &[c, s, -s, c]);
        assert!((e - expected).norm() < 1e-12);
    }

    #[test]
    fn lyapunov_examples() {
        let p = solve_lyapunov(&mat(1, 1, &[-1.0]), &mat(1, 1, &[2.0])).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
        let p = solve_lyapunov(&(-Mat::identity(2, 2)), &(Mat::identity(2, 2) * 2.0)).unwrap();
        assert!((p - Mat::identity(2, 2)).norm() < 1e-14);
        assert!(matches!(
            solve_lyapunov(&mat(1, 1, &[1.0]), &mat(1, 1, &[1.0])),
            Err(Error::NotHurwitz { .. })
        ));
    }

    #[test]
    fn lyapunov_car_following_first_evaluation() {
        let a_h = mat(3, 3, &[-1., 0., 0., 1., 0., -1., 0., 1., -2.]);
        let kh = mat(1, 3, &[0., 1., -1.]);
        let q_h = Mat::identity(3, 3) * 5.0 + kh.transpose() * &kh;
        let p = solve_lyapunov(&a_h, &q_h).unwrap();
        let res = &p * &a_h + a_h.transpose() * &p + &q_h;
        assert!(res.norm() <= 1e-10 * q_h.norm());
        assert!(assert_symmetric(&p, 1e-12));
        assert!(p.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn sylvester_examples() {
        let s = solve_sylvester(&mat(1, 1, &[-1.]), &mat(1, 1, &[-1.]), &mat(1, 1, &[2.])).unwrap();
        assert!((s.x[(0, 0)] + 1.0).abs() < 1e-14);
        assert_eq!(s.nullity, 0);

        let err = solve_sylvester(&mat(1, 1, &[1.]), &mat(1, 1, &[-1.]), &mat(1, 1, &[1.]));
        assert!(matches!(err, Err(Error::Inconsistent { .. })));

        // Consistent but singular: the zero right-hand side has a 1-D kernel.
        let s = solve_sylvester(&mat(1, 1, &[1.]), &mat(1, 1, &[-1.]), &mat(1, 1, &[0.])).unwrap();
        assert_eq!(s.nullity, 1);
    }

    #[test]
    fn sylvester_reduces_to_lyapunov() {
        let a = mat(3, 3, &[-2., 1., 0., 0.5, -3., 1., 0., 0.2, -1.]);
        let q = mat(3, 3, &[2., 0.5, 0., 0.5, 1., 0.1, 0., 0.1, 3.]);
        let p_lyap = solve_lyapunov(&a, &q).unwrap();
        let s = solve_sylvester(&a.transpose(), &a, &(-&q)).unwrap();
        assert!((s.x - p_lyap).norm() < 1e-12);
    }

    #[test]
    fn sylvester_transpose_cases() {
        let li = mat(1, 3, &[0.3, -1.2, 0.7]);
        let r = mat(1, 1, &[10.0]);
        let s = solve_sylvester_transpose(&li, &r, &Mat::zeros(3, 3)).unwrap();
        assert!(s.x.norm() < 1e-14);

        let k0 = mat(1, 3, &[1.5, -0.4, 2.0]);
        let w2 = li.transpose() * &r * &k0 + k0.transpose() * &r * &li;
        let s = solve_sylvester_transpose(&li, &r, &w2).unwrap();
        let back = li.transpose() * &r * &s.x + s.x.transpose() * &r * &li;
        assert!((back - &w2).norm() < 1e-9);

        // Not symmetric, therefore outside the image.
        let bad = mat(3, 3, &[0., 1., 0., 0., 0., 0., 0., 0., 0.]);
        assert!(matches!(
            solve_sylvester_transpose(&li, &r, &bad),
            Err(Error::Inconsistent { .. })
        ));
    }

    #[test]
    fn kleinman_scalar_cases() {
        let one = mat(1, 1, &[1.0]);
        let sol = kleinman_care(&mat(1, 1, &[0.0]), &one, &one, &one, &mat(1, 1, &[-1.0])).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sol.k[(0, 0)] + 1.0).abs() < 1e-12);

        let sol = kleinman_care(&one, &one, &one, &one, &mat(1, 1, &[-2.0])).unwrap();
        assert!((sol.p[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!(sol.residual <= 1e-8);
    }

    #[test]
    fn kleinman_rejects_destabilizing_start() {
        let one = mat(1, 1, &[1.0]);
        assert!(matches!(
            kleinman_care(&one, &one, &one, &one, &mat(1, 1, &[0.0])),
            Err(Error::NotHurwitz { .. })
        ));
    }

    #[test]
    fn kleinman_is_monotone_in_loewner_order() {
        let a = mat(3, 3, &[-1., 0., 0., 1., 0., -1., 0., 0., -1.]);
        let b = mat(3, 1, &[0., 0., 1.]);
        let sol = kleinman_care(&a, &b, &(Mat::identity(3, 3) * 5.0), &mat(1, 1, &[10.]), &mat(1, 3, &[0., 1., -1.]))
            .unwrap();
        assert!(sol.residual <= 1e-8);
        for pair in sol.history.windows(2) {
            let diff = &pair[0] - &pair[1];
            assert!(symmetrize(&diff).symmetric_eigenvalues().min() >= -1e-9);
        }
        assert!(is_hurwitz(&(&a + &b * &sol.k)));
    }
}
