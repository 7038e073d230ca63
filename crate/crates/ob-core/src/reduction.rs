//! Coefficients of the reduced quadratic system `dX/dt = K(X) + M X + f`.
//!
//! Inner products integrate over `[0, π] × [0, h]` with the `x`-measure
//! normalized by `2/π`, so `⟨cos kx, cos kx⟩_x = 1` for `k ≥ 1`. The overall
//! normalization cancels against the biorthogonal conjugates.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::spectral::ModeBasis;

/// Cosine-series coefficients `û_n(y)` sampled on the basis grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierProfileSet {
    pub entries: BTreeMap<u32, Vec<f64>>,
}

impl FourierProfileSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, n: u32) -> Option<&[f64]> {
        self.entries.get(&n).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, n: u32, profile: Vec<f64>) {
        self.entries.insert(n, profile);
    }

    pub fn scaled_sum(&self, a: f64, other: &Self, b: f64) -> Self {
        let mut out = FourierProfileSet::new();
        for (&n, v) in &self.entries {
            out.insert(n, v.iter().map(|x| a * x).collect());
        }
        for (&n, v) in &other.entries {
            let e = out.entries.entry(n).or_insert_with(|| vec![0.0; v.len()]);
            for (x, y) in e.iter_mut().zip(v) {
                *x += b * y;
            }
        }
        out
    }

    /// `Σ_n û_n(y_q) cos(n x)`.
    pub fn eval(&self, x: f64, q: usize) -> f64 {
        self.entries.iter().map(|(&n, v)| v[q] * libm::cos(n as f64 * x)).sum()
    }
}

/// Dense `N × N × N` tensor, index order `(i, j, l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Tensor3 { n, data: vec![0.0; n * n * n] }
    }
    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + l]
    }
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + l] = v;
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
    /// Symmetrize over the last two indices.
    pub fn symmetrized(&self) -> Self {
        let mut t = Tensor3::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                for l in 0..self.n {
                    t.set(i, j, l, 0.5 * (self.get(i, j, l) + self.get(i, l, j)));
                }
            }
        }
        t
    }
    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n).map(|i| (0..self.n).map(|j| (0..self.n).map(|l| self.get(i, j, l)).collect()).collect()).collect()
    }
    pub fn from_nested(v: &[Vec<Vec<f64>>]) -> Self {
        let n = v.len();
        let mut t = Tensor3::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    t.set(i, j, l, v[i][j][l]);
                }
            }
        }
        t
    }
}

/// `(ζ_ij, ζ̃_ij)`: the `cos((k_i − k_j)x)` and `cos((k_i + k_j)x)` parts of
/// `2{ψ_j, θ*_i}` with `{f, g} = f_x g_y − f_y g_x`.
pub fn zeta_profiles(i: usize, j: usize, basis: &ModeBasis) -> (Vec<f64>, Vec<f64>) {
    let (mi, mj) = (&basis.modes[i], &basis.modes[j]);
    let (ki, kj) = (mi.k as f64, mj.k as f64);
    let n = basis.y.len();
    let mut z = vec![0.0; n];
    let mut zt = vec![0.0; n];
    for q in 0..n {
        let a = kj * mj.psi[q] * mi.dtheta_star[q];
        let b = ki * mj.dpsi[q] * mi.theta_star[q];
        z[q] = a + b;
        zt[q] = a - b;
    }
    (z, zt)
}

fn dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), q)| x * y * q).sum()
}

/// `M_ij = ⟨{ψ_j, θ*_i}, u₁⟩`.
pub fn compute_m(u1: &FourierProfileSet, basis: &ModeBasis) -> DMatrix<f64> {
    let n = basis.len();
    let w = &basis.weights;
    DMatrix::from_fn(n, n, |i, j| {
        let (ki, kj) = (basis.modes[i].k, basis.modes[j].k);
        let (z, zt) = zeta_profiles(i, j, basis);
        let mut v = 0.0;
        if let Some(u) = u1.get(ki + kj) {
            v += 0.5 * dot(&zt, u, w);
        }
        if let Some(u) = u1.get(ki.abs_diff(kj)) {
            // the zero mode has twice the normalized x-mass of cos(nx)
            let slot = if ki == kj { 1.0 } else { 0.5 };
            v += slot * dot(&z, u, w);
        }
        v
    })
}

/// `K_ijl = −⟨{ψ_j, θ*_i}, θ_l⟩` before symmetrization (velocity-side
/// `O(ν⁻¹)` terms dropped).
pub fn compute_k_raw(basis: &ModeBasis) -> Tensor3 {
    let n = basis.len();
    let mut t = Tensor3::zeros(n);
    for l in 0..n {
        let mut u = FourierProfileSet::new();
        u.insert(basis.modes[l].k, basis.modes[l].theta.clone());
        let m = compute_m(&u, basis);
        for i in 0..n {
            for j in 0..n {
                t.set(i, j, l, -m[(i, j)]);
            }
        }
    }
    t
}

pub fn compute_k(basis: &ModeBasis) -> Tensor3 {
    compute_k_raw(basis).symmetrized()
}

/// `true` when `k_i = k_j + k_l` or `k_i = |k_j − k_l|`.
pub fn is_resonant(ki: u32, kj: u32, kl: u32) -> bool {
    ki == kj + kl || ki == kj.abs_diff(kl)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    pub max_resonant: f64,
    pub max_nonresonant: f64,
    /// Resonant triples above `tol·max|K|`, as `(i, j, l, K_ijl)` with `j ≤ l`.
    pub resonant: Vec<(usize, usize, usize, f64)>,
}

impl SparsityReport {
    pub fn ratio(&self) -> f64 {
        self.max_nonresonant / self.max_resonant.max(f64::MIN_POSITIVE)
    }
}

pub fn sparsity(k: &Tensor3, ks: &[u32], tol: f64) -> SparsityReport {
    let n = k.n;
    let mut rep = SparsityReport { max_resonant: 0.0, max_nonresonant: 0.0, resonant: vec![] };
    let kmax = k.max_abs();
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let v = k.get(i, j, l);
                if is_resonant(ks[i], ks[j], ks[l]) {
                    rep.max_resonant = rep.max_resonant.max(v.abs());
                    if j <= l && v.abs() > tol * kmax {
                        rep.resonant.push((i, j, l, v));
                    }
                } else {
                    rep.max_nonresonant = rep.max_nonresonant.max(v.abs());
                }
            }
        }
    }
    rep
}

/// `f_i = ⟨θ*_i, η₁⟩`.
pub fn compute_f(eta1: &FourierProfileSet, basis: &ModeBasis) -> Vec<f64> {
    basis.modes.iter().map(|m| eta1.get(m.k).map_or(0.0, |e| dot(&m.theta_star, e, &basis.weights))).collect()
}

/// `η₁ = Σ f_i θ_i cos(k_i x)`, so that `compute_f` returns `f`.
pub fn eta_for_f(f: &[f64], basis: &ModeBasis) -> FourierProfileSet {
    let mut out = FourierProfileSet::new();
    for (m, &fi) in basis.modes.iter().zip(f) {
        let e = out.entries.entry(m.k).or_insert_with(|| vec![0.0; basis.y.len()]);
        for (x, t) in e.iter_mut().zip(&m.theta) {
            *x += fi * t;
        }
    }
    out
}

/// The serialized reduced system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSystem {
    #[serde(rename = "N")]
    pub n: usize,
    pub kset: Vec<u32>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    #[serde(rename = "R0")]
    pub r0: f64,
}

impl ReducedSystem {
    pub fn build(basis: &ModeBasis, u1: &FourierProfileSet, eta1: &FourierProfileSet, r0: f64) -> Self {
        let k = compute_k(basis);
        let m = compute_m(u1, basis);
        let n = basis.len();
        ReducedSystem {
            n,
            kset: basis.modes.iter().map(|m| m.k).collect(),
            k: k.to_nested(),
            m: (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect(),
            f: compute_f(eta1, basis),
            r0,
        }
    }

    pub fn tensor(&self) -> Tensor3 {
        Tensor3::from_nested(&self.k)
    }
}

/// Independent tensor-grid evaluation of `⟨{ψ_j, θ*_i}, u₁⟩`: the `x`
/// integral uses Gauss–Legendre nodes and exact `x`-derivatives of the
/// separated fields `ψ_j = Ψ_j sin(k_j x)`, `θ*_i = Θ*_i cos(k_i x)`.
pub fn bracket_pairing_2d(i: usize, j: usize, u1: &FourierProfileSet, basis: &ModeBasis, nx: usize) -> f64 {
    let (xs, wx) = gauss_legendre(nx, 0.0, core::f64::consts::PI);
    let (mi, mj) = (&basis.modes[i], &basis.modes[j]);
    let (ki, kj) = (mi.k as f64, mj.k as f64);
    let mut total = 0.0;
    for (x, wxi) in xs.iter().zip(&wx) {
        let (sj, cj) = (libm::sin(kj * x), libm::cos(kj * x));
        let (si, ci) = (libm::sin(ki * x), libm::cos(ki * x));
        for q in 0..basis.y.len() {
            // f = ψ_j, g = θ*_i
            let fx = kj * cj * mj.psi[q];
            let fy = sj * mj.dpsi[q];
            let gx = -ki * si * mi.theta_star[q];
            let gy = ci * mi.dtheta_star[q];
            total += (fx * gy - fy * gx) * u1.eval(*x, q) * wxi * basis.weights[q];
        }
    }
    total * 2.0 / core::f64::consts::PI
}

/// Gauss–Legendre nodes and weights on `[a, b]` (Newton on `P_n`).
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * z * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = 0.5 * (a + b) + 0.5 * (b - a) * z;
        w[i] = (b - a) / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}
