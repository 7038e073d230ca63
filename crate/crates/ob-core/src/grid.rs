//! Mapped Chebyshev–Gauss–Lobatto grids on `[0, h]`.
//!
//! Nodes are clustered at the wall by `y = h·expm1(αt)/expm1(α)`, with `t`
//! the CGL points on `[0, 1]`. `α = 0` gives the plain affine map.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math::{cos, exp, expm1, log1p};

/// Map stretch constant: roughly a quarter of the nodes fall inside `y < 4/b`.
pub const LAYER_MAP_C: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct Grid {
    pub h: f64,
    pub alpha: f64,
    /// Node positions, increasing, `y[0] = 0`, `y[n-1] = h`.
    pub y: Vec<f64>,
    /// Clenshaw–Curtis weights in `y`.
    pub w: Vec<f64>,
    /// First-derivative matrix in `y`.
    pub d1: DMatrix<f64>,
}

impl Grid {
    /// Plain Chebyshev grid with `n` nodes.
    pub fn chebyshev(n: usize, h: f64) -> Result<Self> {
        Self::mapped(n, h, 0.0)
    }

    /// Grid resolving a wall layer of width `~1/b`.
    pub fn boundary_layer(n: usize, h: f64, b: f64) -> Result<Self> {
        Self::boundary_layer_c(n, h, b, LAYER_MAP_C)
    }

    pub fn boundary_layer_c(n: usize, h: f64, b: f64, c: f64) -> Result<Self> {
        if !(b > 0.0) || !(c > 0.0) {
            return Err(Error::InvalidParameter("layer map needs b, c > 0".into()));
        }
        Self::mapped(n, h, log1p(h * b / c))
    }

    pub fn mapped(n: usize, h: f64, alpha: f64) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidParameter("grid needs at least 4 nodes".into()));
        }
        if !(h > 0.0) || !h.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidParameter("grid needs h > 0, alpha >= 0".into()));
        }
        let nn = n - 1;
        // CGL in x = cos(pi j / N), reordered so that t increases.
        let x: Vec<f64> = (0..n).map(|j| cos(PI * j as f64 / nn as f64)).collect();
        let t: Vec<f64> = x.iter().map(|&xj| (1.0 - xj) / 2.0).collect();
        let dx = cheb_diff(&x);
        let cc = clenshaw_curtis(nn);

        let (y, dy_dt): (Vec<f64>, Vec<f64>) = if alpha < 1e-12 {
            (t.iter().map(|&ti| h * ti).collect(), vec![h; n])
        } else {
            let den = expm1(alpha);
            (t.iter().map(|&ti| h * expm1(alpha * ti) / den).collect(), t.iter().map(|&ti| h * alpha * exp(alpha * ti) / den).collect())
        };
        let mut y = y;
        y[0] = 0.0;
        y[nn] = h;
        // d/dt = -2 d/dx ; d/dy = (1/y'(t)) d/dt
        let mut d1 = dx * -2.0;
        for i in 0..n {
            let s = 1.0 / dy_dt[i];
            for j in 0..n {
                d1[(i, j)] *= s;
            }
        }
        let w = (0..n).map(|j| cc[j] / 2.0 * dy_dt[j]).collect();
        Ok(Grid { h, alpha, y, w, d1 })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d2(&self) -> DMatrix<f64> {
        &self.d1 * &self.d1
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.w).map(|(a, b)| a * b).sum()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.y.iter().map(|&y| f(y)).collect()
    }

    /// Computational coordinate `t ∈ [0, 1]` of a point `y`.
    pub fn stretched(&self, y: f64) -> f64 {
        if self.alpha < 1e-12 {
            y / self.h
        } else {
            log1p(y / self.h * expm1(self.alpha)) / self.alpha
        }
    }

    /// Barycentric interpolation in the computational variable.
    pub fn interpolate(&self, f: &[f64], y: f64) -> f64 {
        let n = self.len();
        let nn = n - 1;
        let t = self.stretched(y);
        let xq = 1.0 - 2.0 * t;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            let xj = cos(PI * j as f64 / nn as f64);
            let diff = xq - xj;
            if diff.abs() < 1e-15 {
                return f[j];
            }
            let mut wj = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == nn {
                wj *= 0.5;
            }
            num += wj * f[j] / diff;
            den += wj / diff;
        }
        num / den
    }
}

/// Chebyshev differentiation matrix on the points `x` (CGL, decreasing).
fn cheb_diff(x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let nn = n - 1;
    let c = |j: usize| -> f64 {
        let s = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
        if j == 0 || j == nn {
            2.0 * s
        } else {
            s
        }
    };
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d[(i, j)] = c(i) / c(j) / (x[i] - x[j]);
            }
        }
    }
    // negative-sum trick for the diagonal
    for i in 0..n {
        let s: f64 = (0..n).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    d
}

/// Clenshaw–Curtis weights on `[-1, 1]` at `cos(pi j / N)`.
fn clenshaw_curtis(nn: usize) -> Vec<f64> {
    let theta: Vec<f64> = (0..=nn).map(|j| PI * j as f64 / nn as f64).collect();
    let mut w = vec![0.0; nn + 1];
    let nf = nn as f64;
    let mut v = vec![1.0; nn.saturating_sub(1)];
    if nn.is_multiple_of(2) {
        w[0] = 1.0 / (nf * nf - 1.0);
        w[nn] = w[0];
        for k in 1..nn / 2 {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * cos(2.0 * k as f64 * theta[i + 1]) / (4.0 * (k * k) as f64 - 1.0);
            }
        }
        for (i, vi) in v.iter_mut().enumerate() {
            *vi -= cos(nf * theta[i + 1]) / (nf * nf - 1.0);
        }
    } else {
        w[0] = 1.0 / (nf * nf);
        w[nn] = w[0];
        for k in 1..=(nn - 1) / 2 {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * cos(2.0 * k as f64 * theta[i + 1]) / (4.0 * (k * k) as f64 - 1.0);
            }
        }
    }
    for i in 1..nn {
        w[i] = 2.0 * v[i - 1] / nf;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sin;
    use proptest::prelude::*;

    #[test]
    fn weights_sum_to_length() {
        for &(n, a) in &[(17, 0.0), (40, 3.0), (81, 6.5)] {
            let g = Grid::mapped(n, 7.0, a).unwrap();
            assert!((g.w.iter().sum::<f64>() - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_is_resolved() {
        let b = 30.0;
        let h = 10.0 * libm::log(b);
        let g = Grid::boundary_layer(120, h, b).unwrap();
        let inside = g.y.iter().filter(|&&y| y < 5.0 / b).count();
        assert!(inside >= 20, "{inside}");
        let f = g.sample(|y| exp(-b * y));
        assert!((g.integrate(&f) - 1.0 / b).abs() < 1e-12);
        let df = &g.d1 * nalgebra::DVector::from_vec(f.clone());
        assert!((df[0] + b).abs() < 1e-7 * b);
    }

    #[test]
    fn interpolation_matches_function() {
        let g = Grid::boundary_layer(60, 20.0, 10.0).unwrap();
        let f = g.sample(|y| exp(-y) * sin(y));
        for &y in &[0.013, 0.5, 3.3, 17.0] {
            assert!((g.interpolate(&f, y) - exp(-y) * sin(y)).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn derivative_of_polynomial_is_exact(c0 in -2.0..2.0f64, c1 in -2.0..2.0f64, c2 in -2.0..2.0f64, a in 0.0..4.0f64) {
            let g = Grid::mapped(24, 3.0, a).unwrap();
            // polynomial in t is exact; polynomial in y only for a = 0, so use t
            let f: Vec<f64> = g.y.iter().map(|&y| c0 + c1 * y + c2 * y * y).collect();
            let df = &g.d1 * nalgebra::DVector::from_vec(f);
            for (i, &y) in g.y.iter().enumerate() {
                prop_assert!((df[i] - (c1 + 2.0 * c2 * y)).abs() < 1e-6 * (1.0 + a.powi(4)));
            }
        }
    }
}
