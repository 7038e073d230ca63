//! Small dense linear-algebra helpers on top of nalgebra.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular("real LU".into()))
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular("real LU".into()))
}

pub fn to_complex(a: &DMatrix<f64>) -> DMatrix<C64> {
    a.map(|x| C64::new(x, 0.0))
}

/// Eigenvalues of a real square matrix, sorted by decreasing real part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<C64>> {
    let schur =
        nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000).ok_or(Error::NonConvergence { iters: 10_000, residual: f64::NAN })?;
    let mut ev: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    sort_by_real_desc(&mut ev);
    Ok(ev)
}

pub fn sort_by_real_desc(v: &mut [C64]) {
    v.sort_by(|a, b| {
        b.re.partial_cmp(&a.re).unwrap_or(core::cmp::Ordering::Equal).then(b.im.partial_cmp(&a.im).unwrap_or(core::cmp::Ordering::Equal))
    });
}

/// Right eigenvector for an (approximate) eigenvalue by shifted inverse iteration.
pub fn inverse_iteration(a: &DMatrix<f64>, lambda: C64) -> Result<DVector<C64>> {
    let n = a.nrows();
    let scale = 1.0 + lambda.norm();
    let shift = lambda + C64::new(1e-10 * scale, 1e-11 * scale);
    let mut m = to_complex(a);
    for i in 0..n {
        m[(i, i)] -= shift;
    }
    let lu = m.lu();
    let mut v = DVector::from_fn(n, |i, _| C64::new(1.0 + 0.1 * (i as f64).sin_approx(), 0.0));
    for _ in 0..4 {
        let nv = lu.solve(&v).ok_or_else(|| Error::Singular("inverse iteration".into()))?;
        let nrm = nv.norm();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::Singular("inverse iteration".into()));
        }
        v = nv / C64::new(nrm, 0.0);
    }
    Ok(v)
}

trait SinApprox {
    fn sin_approx(self) -> f64;
}
impl SinApprox for f64 {
    // deterministic, non-degenerate starting vector
    fn sin_approx(self) -> f64 {
        libm::sin(1.3 * self + 0.7)
    }
}

/// Solve a complex tridiagonal system (Thomas algorithm, no pivoting).
pub fn tridiag_solve(lo: &[C64], di: &[C64], up: &[C64], rhs: &[C64]) -> Result<Vec<C64>> {
    let n = di.len();
    let mut c = alloc::vec![C64::new(0.0, 0.0); n];
    let mut d = alloc::vec![C64::new(0.0, 0.0); n];
    let mut den = di[0];
    if den.norm() == 0.0 {
        return Err(Error::Singular("tridiagonal".into()));
    }
    if n > 1 {
        c[0] = up[0] / den;
    }
    d[0] = rhs[0] / den;
    for i in 1..n {
        den = di[i] - lo[i - 1] * c[i - 1];
        if den.norm() == 0.0 {
            return Err(Error::Singular("tridiagonal".into()));
        }
        if i < n - 1 {
            c[i] = up[i] / den;
        }
        d[i] = (rhs[i] - lo[i - 1] * d[i - 1]) / den;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let t = c[i] * x[i + 1];
        x[i] -= t;
    }
    Ok(x)
}

/// Least-squares line through `(t, v)`; returns `(slope, intercept, rms residual)`.
pub fn fit_line(t: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut stt, mut stv) = (0.0, 0.0);
    for (a, b) in t.iter().zip(v) {
        stt += (a - mt) * (a - mt);
        stv += (a - mt) * (b - mv);
    }
    let slope = stv / stt;
    let icpt = mv - slope * mt;
    let rms = libm::sqrt(t.iter().zip(v).map(|(a, b)| (b - icpt - slope * a).powi_(2)).sum::<f64>() / n);
    (slope, icpt, rms)
}

trait Sq {
    fn powi_(self, n: i32) -> f64;
}
impl Sq for f64 {
    fn powi_(self, n: i32) -> f64 {
        crate::math::powi(self, n)
    }
}

/// Matrix exponential by scaling and squaring with a diagonal [8/8] Padé
/// approximant (nalgebra only provides one with `std`).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let norm1 = (0..n).map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    if !norm1.is_finite() {
        return Err(Error::InvalidParameter("non-finite matrix".into()));
    }
    let mut s = 0i32;
    while norm1 / crate::math::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let x = a / crate::math::powi(2.0, s);
    const Q: usize = 8;
    let mut c = 1.0;
    let id = DMatrix::<f64>::identity(n, n);
    let mut num = id.clone();
    let mut den = id.clone();
    let mut pw = id;
    for j in 1..=Q {
        c *= (Q - j + 1) as f64 / ((j * (2 * Q - j + 1)) as f64);
        pw = &pw * &x;
        num += &pw * c;
        den += &pw * if j % 2 == 0 { c } else { -c };
    }
    let mut e = solve(&den, &num)?;
    for _ in 0..s {
        e = &e * &e;
    }
    Ok(e)
}

/// Frobenius-norm relative difference.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
