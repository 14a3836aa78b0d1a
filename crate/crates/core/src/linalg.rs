//! Dense linear algebra on top of faer: eigendecompositions with the inverse
//! eigenbasis, the matrix exponential, and small solves.

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::Mat;
use num_complex::Complex64;

pub type CMat = Mat<Complex64>;

/// Eigendecomposition `A = V diag(values) V^{-1}` with unit-norm columns of
/// `V`. Rows of `inverse` are the left eigenvectors dual to the columns.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<Complex64>,
    pub vectors: CMat,
    pub inverse: CMat,
    /// `||V||_1 ||V^{-1}||_1`.
    pub cond: f64,
}

pub fn eigen(a: &CMat) -> Option<Eigen> {
    let (values, vectors) = eigen_vectors(a)?;
    let inverse = vectors.as_ref().partial_piv_lu().inverse();
    let cond = norm1(&vectors) * norm1(&inverse);
    if !cond.is_finite() {
        return None;
    }
    Some(Eigen { values, vectors, inverse, cond })
}

/// Eigenvalues and unit-norm right eigenvectors, without the inverse basis.
pub fn eigen_vectors(a: &CMat) -> Option<(Vec<Complex64>, CMat)> {
    let n = a.nrows();
    let evd = a.as_ref().eigen().ok()?;
    let s = evd.S().column_vector();
    let values: Vec<Complex64> = (0..n).map(|i| s[i]).collect();
    if values.iter().any(|z| !z.is_finite()) {
        return None;
    }
    let u = evd.U();
    let mut vectors = Mat::from_fn(n, n, |i, j| u[(i, j)]);
    for j in 0..n {
        let nrm = (0..n).map(|i| vectors[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        if nrm > 0.0 {
            for i in 0..n {
                vectors[(i, j)] /= nrm;
            }
        }
    }
    Some((values, vectors))
}

pub fn solve_complex(a: &CMat, b: &[Complex64]) -> Option<Vec<Complex64>> {
    let n = b.len();
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = a.as_ref().partial_piv_lu().solve(&rhs);
    let out: Vec<Complex64> = (0..n).map(|i| x[(i, 0)]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

pub fn eigenvalues(a: &CMat) -> Option<Vec<Complex64>> {
    let v = a.as_ref().eigenvalues().ok()?;
    v.iter().all(|z| z.is_finite()).then_some(v)
}

/// Maximum absolute column sum.
pub fn norm1(a: &CMat) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn identity(n: usize) -> CMat {
    Mat::from_fn(n, n, |i, j| if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) })
}

pub fn matvec(a: &CMat, x: &[Complex64]) -> Vec<Complex64> {
    let n = a.nrows();
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == Complex64::new(0.0, 0.0) {
            continue;
        }
        let col = a.col(j);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += col[i] * xj;
        }
    }
    y
}

fn lin_comb(terms: &[(f64, &CMat)], n: usize) -> CMat {
    Mat::from_fn(n, n, |i, j| terms.iter().map(|(c, m)| m[(i, j)] * *c).sum())
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with the degree-13 Padé
/// approximant (Higham 2005).
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    let nrm = norm1(a);
    let s = if nrm > THETA13 { (nrm / THETA13).log2().ceil() as i32 } else { 0 };
    let scale = 0.5f64.powi(s);
    let a = lin_comb(&[(scale, a)], n);
    let id = identity(n);
    let b = &PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = lin_comb(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)], n);
    let rest_u = lin_comb(&[(b[7], &a6), (b[5], &a4), (b[3], &a2), (b[1], &id)], n);
    let u = &a * &(&(&a6 * &inner_u) + &rest_u);
    let inner_v = lin_comb(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)], n);
    let rest_v = lin_comb(&[(b[6], &a6), (b[4], &a4), (b[2], &a2), (b[0], &id)], n);
    let v = &(&a6 * &inner_v) + &rest_v;
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.as_ref().partial_piv_lu().solve(&p);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Solves the dense real system `a x = b`; `None` if the result is not
/// finite (singular matrix).
pub fn solve_real(a: &Mat<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = a.as_ref().partial_piv_lu().solve(&rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}
