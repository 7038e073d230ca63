//! Per-wavenumber spectrum of the linearized operator.
//!
//! Two independent routes: a collocation eigenproblem on a wall-graded grid,
//! and a scalar root equation in `z = k̄/k`, `k̄ = sqrt(k² + λ)`.
//!
//! The per-`k` system is `L²ψ = −k² w`, `λ w = L w − s·U_y ψ` with
//! `L = D² − k²`, clamped `ψ` and Robin `w`. The coupling sign `s` is
//! configurable (see [`Coupling`]).

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{self, C64};
use crate::math::{exp, log, powi, sqrt};
use crate::profile::TemperatureProfile;

/// Sign convention of the temperature–stream coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// `λw = Lw + U_y ψ`, the sign obtained from the stream-function form.
    #[default]
    StreamConsistent,
    /// `λw = Lw − U_y ψ`.
    AsWritten,
}

impl Coupling {
    pub fn sign(self) -> f64 {
        match self {
            Coupling::StreamConsistent => -1.0,
            Coupling::AsWritten => 1.0,
        }
    }
}

// ---------------------------------------------------------------- Green

/// Half-line Robin Green function of `k̄² − D²` (unit negative derivative jump).
pub fn green_closed(kbar: C64, beta: f64, y: f64, y0: f64) -> Result<C64> {
    if !(kbar.re > 0.0) {
        return Err(Error::InvalidParameter("Re kbar must be positive".into()));
    }
    let (lo, hi) = if y < y0 { (y, y0) } else { (y0, y) };
    let near = (kbar * (lo - hi)).exp();
    let far = (-kbar * (lo + hi)).exp();
    // (k̄ cosh k̄lo + β sinh k̄lo) e^{-k̄hi}, written without overflow
    let phi = kbar * (near + far) * 0.5 + (near - far) * (beta * 0.5);
    Ok(phi / (kbar * (kbar + beta)))
}

/// Discrete Green matrix `G[i][j] = Γ(y_i, y_j)` for Robin data `β` at 0 and
/// `β1` at `h`. Uses the exact three-point relation for `u'' = k̄²u`, so
/// nodal values are exact on any grid.
pub fn green_numeric(kbar: C64, beta: f64, beta1: f64, grid: &Grid) -> Result<DMatrix<C64>> {
    if !(kbar.re > 0.0) {
        return Err(Error::InvalidParameter("Re kbar must be positive".into()));
    }
    let n = grid.len();
    let y = &grid.y;
    let mut lo = vec![C64::new(0.0, 0.0); n - 1];
    let mut up = vec![C64::new(0.0, 0.0); n - 1];
    let mut di = vec![C64::new(0.0, 0.0); n];
    for i in 0..n - 1 {
        let hh = y[i + 1] - y[i];
        let (s, c) = ((kbar * hh).sinh(), (kbar * hh).cosh());
        let a = kbar / s;
        // flux leaving node i to the right: a(u_{i+1} − c u_i)
        up[i] += a;
        di[i] -= a * c;
        // flux arriving at node i+1 from the left: a(c u_{i+1} − u_i); enters with minus
        di[i + 1] -= a * c;
        lo[i] += a;
    }
    di[0] -= C64::new(beta, 0.0);
    di[n - 1] += C64::new(beta1, 0.0);
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut rhs = vec![C64::new(0.0, 0.0); n];
        rhs[j] = C64::new(-1.0, 0.0);
        let col = linalg::tridiag_solve(&lo, &di, &up, &rhs)?;
        if col.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Singular("Green discretization".into()));
        }
        for i in 0..n {
            g[(i, j)] = col[i];
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------- operator

/// Collocation form of the per-`k` problem with `ψ` eliminated.
///
/// `stream` maps `w` to the clamped `ψ`; `prolong` rebuilds `w` from its
/// interior values via the Robin rows; `a_red` is the interior operator whose
/// eigenvalues are the `λ_k`.
#[derive(Debug, Clone)]
pub struct Pencil {
    pub k: u32,
    pub coupling: Coupling,
    pub grid: Grid,
    pub beta: f64,
    pub beta1: f64,
    pub u_y: Vec<f64>,
    pub stream: DMatrix<f64>,
    pub prolong: DMatrix<f64>,
    pub a_red: DMatrix<f64>,
}

fn laplacian(grid: &Grid, k: f64) -> DMatrix<f64> {
    let mut l = grid.d2();
    for i in 0..grid.len() {
        l[(i, i)] -= k * k;
    }
    l
}

/// `S` with `ψ = S w` solving `L²ψ = −k² w`, `ψ = ψ' = 0` at both ends.
pub fn clamped_stream_operator(grid: &Grid, k: f64) -> Result<DMatrix<f64>> {
    Ok(clamped_pair_operators(grid, k)?.0)
}

/// `(S, Φ)` with `ψ = S w`, `ϕ = Φ w` for the second-order pair
/// `Lψ = ϕ`, `Lϕ = −k² w` with both clamping conditions on `ψ`.
pub fn clamped_pair_operators(grid: &Grid, k: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = grid.len();
    let l = laplacian(grid, k);
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    let mut r = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = l[(i, j)];
            m[(n + i, n + j)] = l[(i, j)];
        }
        m[(i, n + i)] = -1.0;
        r[(n + i, i)] = -k * k;
    }
    for (row, node) in [(0, 0), (n - 1, n - 1)] {
        for j in 0..2 * n {
            m[(row, j)] = 0.0;
        }
        m[(row, node)] = 1.0;
    }
    for (row, node) in [(n, 0), (2 * n - 1, n - 1)] {
        for j in 0..2 * n {
            m[(row, j)] = 0.0;
        }
        for j in 0..n {
            m[(row, j)] = grid.d1[(node, j)];
            r[(row, j)] = 0.0;
        }
    }
    let sol = linalg::solve(&m, &r)?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, n).into_owned()))
}

/// Matrix `P` (n × (n−2)) with `w = P w_interior` satisfying both Robin rows.
pub fn robin_prolongation(grid: &Grid, beta: f64, beta1: f64) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let d = &grid.d1;
    let mut bb = DMatrix::zeros(2, 2);
    bb[(0, 0)] = d[(0, 0)] - beta;
    bb[(0, 1)] = d[(0, n - 1)];
    bb[(1, 0)] = d[(n - 1, 0)];
    bb[(1, 1)] = d[(n - 1, n - 1)] - beta1;
    let mut bi = DMatrix::zeros(2, n - 2);
    for j in 1..n - 1 {
        bi[(0, j - 1)] = d[(0, j)];
        bi[(1, j - 1)] = d[(n - 1, j)];
    }
    let q = -linalg::solve(&bb, &bi)?;
    let mut p = DMatrix::zeros(n, n - 2);
    for j in 0..n - 2 {
        p[(0, j)] = q[(0, j)];
        p[(n - 1, j)] = q[(1, j)];
        p[(j + 1, j)] = 1.0;
    }
    Ok(p)
}

fn restrict_interior(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    a.rows(1, n - 2).into_owned()
}

pub fn assemble_pencil(k: u32, profile: &TemperatureProfile, grid: &Grid, coupling: Coupling) -> Result<Pencil> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let kf = k as f64;
    let b = profile.params.b;
    // first interior spacing must resolve the wall layer
    if grid.y[1] > 1.0 / (4.0 * b) {
        return Err(Error::InvalidParameter("grid too coarse for the wall layer".into()));
    }
    let u_y = grid.sample(|y| profile.u_y(y));
    let stream = clamped_stream_operator(grid, kf)?;
    let s = coupling.sign();
    let mut a = laplacian(grid, kf);
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            a[(i, j)] -= s * u_y[i] * stream[(i, j)];
        }
    }
    let (beta, beta1) = (profile.params.beta, profile.params.beta1);
    let prolong = robin_prolongation(grid, beta, beta1)?;
    let a_red = restrict_interior(&(a * &prolong));
    Ok(Pencil { k, coupling, grid: grid.clone(), beta, beta1, u_y, stream, prolong, a_red })
}

impl Pencil {
    /// Generalized form `λ B v = A v` over stacked `(ψ, ϕ = Lψ, w)`, with
    /// boundary rows carrying zeros in `B`.
    pub fn generalized(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let g = &self.grid;
        let n = g.len();
        let kf = self.k as f64;
        let l = laplacian(g, kf);
        let s = self.coupling.sign();
        let mut a = DMatrix::zeros(3 * n, 3 * n);
        let mut bm = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = l[(i, j)];
                a[(n + i, n + j)] = l[(i, j)];
                a[(2 * n + i, 2 * n + j)] = l[(i, j)];
            }
            a[(i, n + i)] = -1.0;
            a[(n + i, 2 * n + i)] = kf * kf;
            a[(2 * n + i, i)] = -s * self.u_y[i];
            bm[(2 * n + i, 2 * n + i)] = 1.0;
        }
        let mut set_row = |row: usize, entries: &[(usize, f64)]| {
            for j in 0..3 * n {
                a[(row, j)] = 0.0;
                bm[(row, j)] = 0.0;
            }
            for &(c, v) in entries {
                a[(row, c)] += v;
            }
        };
        set_row(0, &[(0, 1.0)]);
        set_row(n - 1, &[(n - 1, 1.0)]);
        let d0: Vec<(usize, f64)> = (0..n).map(|j| (j, g.d1[(0, j)])).collect();
        let dh: Vec<(usize, f64)> = (0..n).map(|j| (j, g.d1[(n - 1, j)])).collect();
        set_row(n, &d0);
        set_row(2 * n - 1, &dh);
        let mut w0: Vec<(usize, f64)> = (0..n).map(|j| (2 * n + j, g.d1[(0, j)])).collect();
        w0.push((2 * n, -self.beta));
        let mut wh: Vec<(usize, f64)> = (0..n).map(|j| (2 * n + j, g.d1[(n - 1, j)])).collect();
        wh.push((3 * n - 1, -self.beta1));
        set_row(2 * n, &w0);
        set_row(3 * n - 1, &wh);
        (a, bm)
    }

    pub fn eigenvalues(&self) -> Result<Vec<C64>> {
        linalg::eigenvalues(&self.a_red)
    }

    /// Full `(ψ, w)` for an interior eigenvector.
    pub fn expand(&self, v: &DVector<C64>) -> (Vec<C64>, Vec<C64>) {
        let w = linalg::to_complex(&self.prolong) * v;
        let psi = linalg::to_complex(&self.stream) * &w;
        (psi.iter().copied().collect(), w.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenMode {
    pub k: u32,
    pub lambda: C64,
    pub psi: Vec<C64>,
    pub w: Vec<C64>,
    pub rho2: C64,
}

impl EigenMode {
    /// Largest boundary residual, relative to the field sup norms.
    pub fn boundary_residual(&self, grid: &Grid, beta: f64, beta1: f64) -> f64 {
        let n = grid.len();
        let d = |f: &[C64], i: usize| -> C64 { (0..n).map(|j| f[j] * grid.d1[(i, j)]).sum() };
        let mp = self.psi.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        let mw = self.w.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        let rp =
            [self.psi[0].norm(), self.psi[n - 1].norm(), d(&self.psi, 0).norm(), d(&self.psi, n - 1).norm()].iter().fold(0.0f64, |m, v| m.max(*v))
                / mp;
        let rw = (d(&self.w, 0) - self.w[0] * beta).norm().max((d(&self.w, n - 1) - self.w[n - 1] * beta1).norm()) / mw;
        rp.max(rw)
    }
}

/// Result of the refinement-filtered eigen solve.
#[derive(Debug, Clone)]
pub struct ModeSolve {
    pub modes: Vec<EigenMode>,
    /// Eigenvalues in the half-plane that moved too much under refinement.
    pub rejected: Vec<C64>,
}

pub const REFINE_TOL: f64 = 1e-4;

/// Eigenpairs with `Re λ > −halfplane`, keeping only those reproduced by the
/// refined operator to [`REFINE_TOL`].
pub fn solve_modes(coarse: &Pencil, fine: &Pencil, halfplane: f64) -> Result<ModeSolve> {
    let ev = coarse.eigenvalues()?;
    let evf = fine.eigenvalues()?;
    let mut out = ModeSolve { modes: vec![], rejected: vec![] };
    for &lam in ev.iter().filter(|l| l.re > -halfplane) {
        let nearest = evf.iter().map(|m| (m - lam).norm()).fold(f64::INFINITY, f64::min);
        if nearest / lam.norm().max(1.0) >= REFINE_TOL {
            out.rejected.push(lam);
            continue;
        }
        out.modes.push(mode_for(coarse, lam)?);
    }
    Ok(out)
}

/// Eigenfunction for `lambda`, scaled so that `ψ''(0)/2 = 1`.
pub fn mode_for(p: &Pencil, lambda: C64) -> Result<EigenMode> {
    let v = linalg::inverse_iteration(&p.a_red, lambda)?;
    let (mut psi, mut w) = p.expand(&v);
    let d2 = p.grid.d2();
    let n = p.grid.len();
    let rho: C64 = (0..n).map(|j| psi[j] * d2[(0, j)]).sum::<C64>() * 0.5;
    let scale_ref = psi.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let norm = if rho.norm() > 1e-10 * scale_ref { rho } else { C64::new(scale_ref, 0.0) };
    for x in psi.iter_mut().chain(w.iter_mut()) {
        *x /= norm;
    }
    Ok(EigenMode { k: p.k, lambda, psi, w, rho2: rho / norm })
}

/// Leading (largest real part) eigenvalue on an `n`-node layer grid.
pub fn leading_eigenvalue(k: u32, profile: &TemperatureProfile, n: usize, coupling: Coupling) -> Result<C64> {
    let prm = &profile.params;
    let grid = Grid::boundary_layer(n, prm.h, prm.b)?;
    let p = assemble_pencil(k, profile, &grid, coupling)?;
    Ok(p.eigenvalues()?[0])
}

// ---------------------------------------------------------------- scalar route

/// How the perturbation `Y_k` of the scalar equation is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum YModel {
    /// Polynomial target terms only; optionally plus the layer correction `H_k`.
    Truncated { include_hk: bool },
    /// `ψ''(0)` from a direct solve of the normalized inhomogeneous problem.
    Resolved { n: usize },
}

impl Default for YModel {
    fn default() -> Self {
        YModel::Truncated { include_hk: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ScalarOptions {
    pub model: YModel,
    pub coupling: Coupling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarEigenContext {
    pub z: C64,
    pub a: f64,
    pub xi_tilde: C64,
    pub hk: C64,
    pub hk_tilde: C64,
    pub yk: C64,
}

/// `8 / ((1 + a z)(1 + z)²)`, the leading part of `ψ''(0)`.
pub fn main_term(z: C64, a: f64) -> C64 {
    let one = C64::new(1.0, 0.0);
    C64::new(8.0, 0.0) / ((one + z * a) * (one + z) * (one + z))
}

/// First-order `ψ''(0)` of the layer-only problem on the half-line: the wall
/// layer of `U_y` acting once on `y²`; closed form.
pub fn layer_psi2_closed(z: C64, k: u32, profile: &TemperatureProfile, coupling: Coupling) -> C64 {
    let p = &profile.params;
    let kf = k as f64;
    let kb = z * kf;
    let q = kb * kb;
    let b = C64::new(p.b, 0.0);
    let c = p.c_u * p.r * powi(p.b, 4);
    let s = coupling.sign();
    let e = b * b - q;
    let g0 = -2.0 / (e * e) + 8.0 * b * b / (e * e * e);
    let g1 = 6.0 * b / (e * e) - 8.0 * b * b * b / (e * e * e);
    let kpb = b + kf;
    let (a0, a1, a2) = (1.0 / (kpb * kpb), -2.0 / (kpb * kpb * kpb), 6.0 / (kpb * kpb * kpb * kpb));
    let (b0, b1, b2) = (1.0 / e, -2.0 * b / (e * e), g0);
    let g2 = a2 * b0 + 2.0 * a1 * b1 + a0 * b2;
    let cc = (g1 - g0 * p.beta) * (s * c) / (kb + p.beta);
    let kk = kb + kf;
    -(kf * kf) * (g2 * (s * c) + cc / (kk * kk))
}

/// `ψ''(0)` from the normalized inhomogeneous problem on an independent grid:
/// the layer part of `U_y` acting on `y²` is moved to the right-hand side.
pub fn resolved_psi2(z: C64, k: u32, profile: &TemperatureProfile, coupling: Coupling, n: usize) -> Result<C64> {
    psi2_solve(z, k, profile, coupling, n, true)
}

/// Single pass of the layer forcing through the `w` and `ψ` problems (no
/// feedback); this is the quantity [`layer_psi2_closed`] evaluates.
pub fn first_order_psi2(z: C64, k: u32, profile: &TemperatureProfile, coupling: Coupling, n: usize) -> Result<C64> {
    psi2_solve(z, k, profile, coupling, n, false)
}

fn psi2_solve(z: C64, k: u32, profile: &TemperatureProfile, coupling: Coupling, n: usize, feedback: bool) -> Result<C64> {
    let p = &profile.params;
    let fb = if feedback { 1.0 } else { 0.0 };
    let grid = Grid::boundary_layer_c(n, p.h, p.b, 3.0)?;
    let kf = k as f64;
    let kb2 = z * z * (kf * kf);
    let s = coupling.sign();
    let d1 = &grid.d1;
    let d2 = grid.d2();
    let layer = |y: f64| p.c_u * p.r * powi(p.b, 4) * exp(-p.b * y);
    let zc = C64::new(0.0, 0.0);
    let mut m = DMatrix::from_element(3 * n, 3 * n, zc);
    let mut rhs = DVector::from_element(3 * n, zc);
    for i in 0..n {
        let y = grid.y[i];
        for j in 0..n {
            let dd = C64::new(d2[(i, j)], 0.0);
            m[(i, j)] = dd;
            m[(n + i, n + j)] = dd;
            m[(2 * n + i, 2 * n + j)] = dd;
            // ρ2(ψ) feedback of the moved layer term
            m[(2 * n + i, j)] += C64::new(fb * s * layer(y) * y * y * d2[(0, j)] * 0.5, 0.0);
        }
        m[(i, i)] -= kf * kf;
        m[(n + i, n + i)] -= kf * kf;
        m[(2 * n + i, 2 * n + i)] -= kb2;
        m[(i, n + i)] = C64::new(-1.0, 0.0);
        m[(n + i, 2 * n + i)] = C64::new(kf * kf, 0.0);
        m[(2 * n + i, i)] -= fb * s * profile.u_y(y);
        rhs[2 * n + i] = C64::new(s * layer(y) * y * y, 0.0);
    }
    let mut set = |row: usize, cols: &[(usize, f64)]| {
        for j in 0..3 * n {
            m[(row, j)] = zc;
        }
        for &(c, v) in cols {
            m[(row, c)] += v;
        }
        rhs[row] = zc;
    };
    set(0, &[(0, 1.0)]);
    set(n - 1, &[(n - 1, 1.0)]);
    let r0: Vec<(usize, f64)> = (0..n).map(|j| (j, d1[(0, j)])).collect();
    let rh: Vec<(usize, f64)> = (0..n).map(|j| (j, d1[(n - 1, j)])).collect();
    set(n, &r0);
    set(2 * n - 1, &rh);
    let mut w0: Vec<(usize, f64)> = (0..n).map(|j| (2 * n + j, d1[(0, j)])).collect();
    w0.push((2 * n, -p.beta));
    let mut wh: Vec<(usize, f64)> = (0..n).map(|j| (2 * n + j, d1[(n - 1, j)])).collect();
    wh.push((3 * n - 1, -p.beta1));
    set(2 * n, &w0);
    set(3 * n - 1, &wh);
    let sol = m.lu().solve(&rhs).ok_or_else(|| Error::Singular("normalized inhomogeneous problem".into()))?;
    Ok((0..n).map(|j| sol[j] * d2[(0, j)]).sum())
}

/// Admissible search domain: `Re z > 0`, `|z| < h·β/k`.
pub fn in_domain(z: C64, k: u32, profile: &TemperatureProfile) -> bool {
    let p = &profile.params;
    z.re > 0.0 && z.norm() < p.h * p.beta / k as f64
}

/// Residual `(z+1)² − 4/(1+az) − Y_k(z)` of the scalar eigenvalue equation.
pub fn scalar_residual(z: C64, k: u32, profile: &TemperatureProfile, opts: &ScalarOptions) -> Result<(C64, ScalarEigenContext)> {
    if !in_domain(z, k, profile) {
        return Err(Error::OutsideDomain { z_re: z.re, z_im: z.im });
    }
    let p = &profile.params;
    let kf = k as f64;
    let a = kf / p.beta;
    let one = C64::new(1.0, 0.0);
    let zp1sq = (one + z) * (one + z);
    let xi_tilde = C64::new(1.0 + p.r, 0.0) / (one + z * a);
    let main = main_term(z, a);
    let pk = 1.0 / kf;
    let poly_part = p.mu * powi(kf, -6) * (profile.poly.z(pk) + kf / (p.beta + kf) * profile.poly.z_tilde(pk));
    let (hk, hk_tilde, yk) = match opts.model {
        YModel::Truncated { include_hk } => {
            let hk = if include_hk { layer_psi2_closed(z, k, profile, opts.coupling) - main } else { C64::new(0.0, 0.0) };
            let ht = C64::new(poly_part, 0.0);
            (hk, ht, ht + zp1sq * hk * 0.5)
        }
        YModel::Resolved { n } => {
            let psi2 = resolved_psi2(z, k, profile, opts.coupling, n)?;
            let hk = layer_psi2_closed(z, k, profile, opts.coupling) - main;
            let yk = zp1sq * (psi2 - main) * 0.5;
            (hk, yk - zp1sq * hk * 0.5, yk)
        }
    };
    let f = zp1sq - 4.0 / (one + z * a) - yk;
    Ok((f, ScalarEigenContext { z, a, xi_tilde, hk, hk_tilde, yk }))
}

/// Newton iteration from `z = 1` with a finite-difference derivative and
/// residual-decrease damping.
pub fn find_root_z(k: u32, profile: &TemperatureProfile, opts: &ScalarOptions) -> Result<C64> {
    find_root_z_from(C64::new(1.0, 0.0), k, profile, opts)
}

pub fn find_root_z_from(z0: C64, k: u32, profile: &TemperatureProfile, opts: &ScalarOptions) -> Result<C64> {
    let f = |z: C64| scalar_residual(z, k, profile, opts).map(|r| r.0);
    let mut z = z0;
    let mut fz = f(z)?;
    for it in 0..100 {
        if fz.norm() < 1e-13 {
            return Ok(z);
        }
        let e = 1e-6 * z.norm().max(1e-3);
        let df = (f(z + e)? - f(z - e)?) / (2.0 * e);
        if df.norm() == 0.0 {
            return Err(Error::NonConvergence { iters: it, residual: fz.norm() });
        }
        let step = -fz / df;
        let mut t = 1.0;
        loop {
            let zn = z + step * t;
            if in_domain(zn, k, profile) {
                let fn_ = f(zn)?;
                if fn_.norm() < fz.norm() {
                    z = zn;
                    fz = fn_;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-10 {
                if (step * t).norm() < 1e-14 * z.norm().max(1.0) || fz.norm() < 1e-11 {
                    return Ok(z);
                }
                return Err(Error::NonConvergence { iters: it, residual: fz.norm() });
            }
        }
        if (step * t).norm() < 1e-15 * z.norm().max(1.0) {
            return Ok(z);
        }
    }
    if fz.norm() < 1e-10 {
        Ok(z)
    } else {
        Err(Error::NonConvergence { iters: 100, residual: fz.norm() })
    }
}

pub fn lambda_from_z(z: C64, k: u32) -> C64 {
    let kf = (k * k) as f64;
    (z * z - 1.0) * kf
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Scalar,
    Pencil,
    /// Not solved: covered by the a-priori bound on `|k̄|`.
    Bound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub k: u32,
    pub lambda: Option<C64>,
    pub method: Method,
    pub in_kernel_set: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub records: Vec<SpectrumRecord>,
    pub gap: f64,
    pub kernel_residual: f64,
    pub kernel_tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub scalar: ScalarOptions,
    pub pencil_n: usize,
    /// Largest `k` solved with the collocation operator (0 disables it).
    pub pencil_kmax: u32,
    pub kernel_tol: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { scalar: ScalarOptions::default(), pencil_n: 100, pencil_kmax: 21, kernel_tol: 1e-6 }
    }
}

/// All records for one `k` (scalar, and pencil when affordable).
pub fn spectrum_records(k: u32, kset: &[u32], profile: &TemperatureProfile, opts: &ReportOptions) -> Result<Vec<SpectrumRecord>> {
    let p = &profile.params;
    let in_k = kset.contains(&k);
    if k as f64 > p.h * p.beta {
        return Ok(vec![SpectrumRecord { k, lambda: None, method: Method::Bound, in_kernel_set: in_k }]);
    }
    let z = find_root_z(k, profile, &opts.scalar)?;
    let mut out = vec![SpectrumRecord { k, lambda: Some(lambda_from_z(z, k)), method: Method::Scalar, in_kernel_set: in_k }];
    if k <= opts.pencil_kmax.min(64) && opts.pencil_n > 0 {
        let lam = leading_eigenvalue(k, profile, opts.pencil_n, opts.scalar.coupling)?;
        out.push(SpectrumRecord { k, lambda: Some(lam), method: Method::Pencil, in_kernel_set: in_k });
    }
    Ok(out)
}

/// Gap and kernel residual are taken from the scalar records.
pub fn assemble_report(records: Vec<SpectrumRecord>, kernel_tol: f64) -> SpectrumReport {
    let mut gap = f64::INFINITY;
    let mut kres: f64 = 0.0;
    for r in records.iter().filter(|r| r.method == Method::Scalar) {
        let lam = r.lambda.unwrap_or_default();
        if r.in_kernel_set {
            kres = kres.max(lam.norm());
        } else {
            gap = gap.min(-lam.re);
        }
    }
    let pass = kres < kernel_tol && gap > 0.0;
    SpectrumReport { records, gap, kernel_residual: kres, kernel_tol, pass }
}

pub fn spectrum_report(kset: &[u32], kmax: u32, profile: &TemperatureProfile, opts: &ReportOptions) -> Result<SpectrumReport> {
    let mut recs = vec![];
    for k in 1..=kmax {
        recs.extend(spectrum_records(k, kset, profile, opts)?);
    }
    Ok(assemble_report(recs, opts.kernel_tol))
}

// ---------------------------------------------------------------- conjugates

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugateMode {
    pub k: u32,
    pub lambda: C64,
    pub phi: Vec<C64>,
    pub wtilde: Vec<C64>,
}

/// Adjoint operator `L − s·S·U_y` restricted like the direct one.
pub fn assemble_adjoint(k: u32, profile: &TemperatureProfile, grid: &Grid, coupling: Coupling) -> Result<Pencil> {
    let mut p = assemble_pencil(k, profile, grid, coupling)?;
    let s = coupling.sign();
    let n = grid.len();
    let mut a = laplacian(grid, k as f64);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= s * p.stream[(i, j)] * p.u_y[j];
        }
    }
    p.a_red = restrict_interior(&(a * &p.prolong));
    Ok(p)
}

/// Conjugate eigenpair nearest to `target`, with `w̃(0) = 1`.
pub fn solve_conjugate_mode(k: u32, profile: &TemperatureProfile, grid: &Grid, coupling: Coupling, target: C64) -> Result<ConjugateMode> {
    let adj = assemble_adjoint(k, profile, grid, coupling)?;
    let ev = adj.eigenvalues()?;
    let lam = *ev
        .iter()
        .min_by(|a, b| (*a - target).norm().partial_cmp(&(*b - target).norm()).unwrap_or(core::cmp::Ordering::Equal))
        .ok_or_else(|| Error::Singular("empty adjoint spectrum".into()))?;
    let v = linalg::inverse_iteration(&adj.a_red, lam)?;
    let w = linalg::to_complex(&adj.prolong) * v;
    let w0 = if w[0].norm() > 1e-12 * w.norm() { w[0] } else { C64::new(w.norm(), 0.0) };
    let w = w / w0;
    let uw = DVector::from_iterator(grid.len(), w.iter().zip(&adj.u_y).map(|(a, u)| a * *u));
    let s = coupling.sign();
    let phi = linalg::to_complex(&adj.stream) * uw * C64::new(-s / profile.params.nu, 0.0);
    Ok(ConjugateMode { k, lambda: lam, phi: phi.iter().copied().collect(), wtilde: w.iter().copied().collect() })
}

// ---------------------------------------------------------------- basis

/// One real mode with the profiles the reduction needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisMode {
    pub k: u32,
    pub psi: Vec<f64>,
    pub dpsi: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub dtheta_star: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeBasis {
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    pub modes: Vec<BasisMode>,
    /// Pairings `⟨e_j, e*_i⟩` after normalization (row `i`, column `j`).
    pub gram: Vec<Vec<f64>>,
}

impl ModeBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
    pub fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.y.len()).map(|q| f(q) * self.weights[q]).sum()
    }
}

/// Temperature-part pairing with the `x`-inner product normalized so that
/// `(2/π)∫₀^π cos²(kx) dx = 1`.
pub fn pairing_matrix(modes: &[BasisMode], weights: &[f64]) -> DMatrix<f64> {
    let n = modes.len();
    DMatrix::from_fn(n, n, |i, j| {
        if modes[i].k != modes[j].k {
            0.0
        } else {
            (0..weights.len()).map(|q| modes[j].theta[q] * modes[i].theta_star[q] * weights[q]).sum()
        }
    })
}

/// Rescale conjugates so that the pairing matrix becomes the identity.
pub fn biorthogonalize(mut modes: Vec<BasisMode>, y: Vec<f64>, weights: Vec<f64>) -> Result<ModeBasis> {
    let g = pairing_matrix(&modes, &weights);
    let sv = g.clone().singular_values();
    let smax = sv.iter().fold(0.0f64, |m, v| m.max(*v));
    let smin = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !(smin > 1e-10 * smax) {
        return Err(Error::Singular("kernel Gram matrix (defective or duplicated mode)".into()));
    }
    let x = g.clone().try_inverse().ok_or_else(|| Error::Singular("kernel Gram matrix".into()))?;
    let n = modes.len();
    let npts = y.len();
    let old: Vec<(Vec<f64>, Vec<f64>)> = modes.iter().map(|m| (m.theta_star.clone(), m.dtheta_star.clone())).collect();
    for i in 0..n {
        let mut ts = vec![0.0; npts];
        let mut dts = vec![0.0; npts];
        for m in 0..n {
            let c = x[(i, m)];
            if c != 0.0 {
                for q in 0..npts {
                    ts[q] += c * old[m].0[q];
                    dts[q] += c * old[m].1[q];
                }
            }
        }
        modes[i].theta_star = ts;
        modes[i].dtheta_star = dts;
    }
    let gram = pairing_matrix(&modes, &weights);
    let gram = (0..n).map(|i| (0..n).map(|j| gram[(i, j)]).collect()).collect();
    Ok(ModeBasis { y, weights, modes, gram })
}

/// Leading-order zero-mode profiles (unnormalized conjugates).
pub fn asymptotic_mode(k: u32, b: f64, grid: &Grid) -> BasisMode {
    let kf = k as f64;
    let psi = grid.sample(|y| y * y * exp(-kf * y));
    let dpsi = grid.sample(|y| (2.0 * y - kf * y * y) * exp(-kf * y));
    // L²(y² e^{-ky}) = 8k² e^{-ky} fixes the outer amplitude of θ
    let theta = grid.sample(|y| 8.0 * kf * (exp(-b * y) - exp(-kf * y)));
    let theta_star = grid.sample(|y| (kf * y * y + y) * exp(-kf * y));
    let dtheta_star = grid.sample(|y| (1.0 + 2.0 * kf * y - kf * (kf * y * y + y)) * exp(-kf * y));
    BasisMode { k, psi, dpsi, theta, theta_star, dtheta_star }
}

pub fn asymptotic_basis(ks: &[u32], b: f64, grid: &Grid) -> Result<ModeBasis> {
    let modes = ks.iter().map(|&k| asymptotic_mode(k, b, grid)).collect();
    biorthogonalize(modes, grid.y.clone(), grid.w.clone())
}

// ---------------------------------------------------------------- semigroup

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted `d/dt log‖z(t)‖` (negative for decay).
    pub slope: f64,
    pub rms: f64,
    pub times: Vec<f64>,
    pub log_norms: Vec<f64>,
}

fn quad_norm(p: &Pencil, v: &DVector<f64>) -> f64 {
    let w = &p.prolong * v;
    sqrt(w.iter().zip(&p.grid.w).map(|(a, q)| a * a * q).sum())
}

/// Evolve interior data under `exp(A t)`, renormalizing each step, and fit the
/// slope of `log‖z‖` over the second half of the horizon.
pub fn semigroup_decay(p: &Pencil, init: &DVector<f64>, horizon: f64, steps: usize) -> Result<DecayFit> {
    if !(horizon > 0.0) || steps < 4 {
        return Err(Error::InvalidParameter("need horizon > 0 and >= 4 steps".into()));
    }
    let dt = horizon / steps as f64;
    let prop = linalg::expm(&(&p.a_red * dt))?;
    let mut v = init.clone();
    let mut acc = log(quad_norm(p, &v));
    let mut times = vec![0.0];
    let mut logs = vec![acc];
    for s in 1..=steps {
        let nv = &prop * &v;
        let nn = quad_norm(p, &nv);
        let on = quad_norm(p, &v);
        if !(nn > 0.0) || !nn.is_finite() {
            return Err(Error::Integration("linear propagator lost the solution".into()));
        }
        acc += log(nn / on);
        v = nv / nn;
        times.push(s as f64 * dt);
        logs.push(acc);
    }
    let half = steps / 2;
    let (slope, _, rms) = linalg::fit_line(&times[half..], &logs[half..]);
    Ok(DecayFit { slope, rms, times, log_norms: logs })
}

/// Seeded interior data.
pub fn random_interior(p: &Pencil, seed: u64) -> DVector<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(p.a_red.nrows(), |_, _| rng.random_range(-1.0..1.0))
}

/// Doubling the horizon until the fitted slopes of consecutive runs agree.
pub fn semigroup_decay_adaptive(p: &Pencil, init: &DVector<f64>, horizon0: f64, rel_tol: f64) -> Result<DecayFit> {
    let mut h = horizon0;
    let mut prev = semigroup_decay(p, init, h, 64)?;
    for _ in 0..16 {
        h *= 2.0;
        let next = semigroup_decay(p, init, h, 64)?;
        if (next.slope - prev.slope).abs() <= rel_tol * next.slope.abs() {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Integration("horizon too short for tail separation".into()))
}
