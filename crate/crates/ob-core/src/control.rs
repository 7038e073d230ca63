//! Inverse problems: wavenumber sets with distinct pairwise sums, the
//! decomposition solve, and synthesis of `u₁` achieving a target `M`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::exp;
use crate::reduction::{FourierProfileSet, Tensor3};
use crate::spectral::ModeBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavenumberSet {
    pub p: usize,
    pub base: Vec<u32>,
    /// Base followed by the sorted unordered pairwise sums.
    pub full: Vec<u32>,
    /// `(j, l, i)` with `j ≤ l` and `full[i] = base[j] + base[l]`.
    pub sum_index: Vec<(usize, usize, usize)>,
}

impl WavenumberSet {
    pub fn from_base(base: &[u32]) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::BadWavenumberSet("empty base".into()));
        }
        if let Some(b) = base.iter().find(|&&b| b == 0 || b % 5 == 0) {
            return Err(Error::BadWavenumberSet(format!("base element {b} is divisible by 5")));
        }
        let p = base.len();
        let mut sums = BTreeMap::new();
        for j in 0..p {
            for l in j..p {
                let s = base[j] + base[l];
                if sums.insert(s, (j, l)).is_some() {
                    return Err(Error::BadWavenumberSet(format!("pairwise sum {s} repeats")));
                }
            }
        }
        let mut full = base.to_vec();
        let mut sum_index = vec![];
        for (&s, &(j, l)) in &sums {
            if full.contains(&s) {
                return Err(Error::BadWavenumberSet(format!("sum {s} coincides with a base element")));
            }
            sum_index.push((j, l, full.len()));
            full.push(s);
        }
        Ok(WavenumberSet { p, base: base.to_vec(), full, sum_index })
    }

    pub fn n(&self) -> usize {
        self.full.len()
    }

    pub fn sum_index(&self, j: usize, l: usize) -> usize {
        let (a, b) = if j <= l { (j, l) } else { (l, j) };
        self.sum_index.iter().find(|t| t.0 == a && t.1 == b).map(|t| t.2).expect("total on base pairs")
    }
}

/// `{1, 7}` followed by the least odd integer above every existing pairwise
/// sum that is not a multiple of 5.
pub fn sidon_set(p: usize) -> Vec<u32> {
    let mut base = vec![];
    for _ in 0..p {
        let next = match base.len() {
            0 => 1,
            1 => 7,
            _ => {
                let mut c = 2 * base.iter().copied().max().unwrap_or(0) + 1;
                while c % 2 == 0 || c % 5 == 0 {
                    c += 1;
                }
                c
            }
        };
        base.push(next);
    }
    base
}

pub fn extended_set(p: usize) -> Result<WavenumberSet> {
    WavenumberSet::from_base(&sidon_set(p))
}

/// `(n, m) = (|k_j − k_i|, k_j + k_i)` for `i ≥ j` is injective on the set.
pub fn pair_map_injective(ks: &[u32]) -> bool {
    let mut seen = BTreeMap::new();
    for i in 0..ks.len() {
        for j in 0..=i {
            if seen.insert((ks[i].abs_diff(ks[j]), ks[i] + ks[j]), ()).is_some() {
                return false;
            }
        }
    }
    true
}

/// Solve `Σ_{i fast} K_ijl χ_i = b_jl` for all slow pairs `j ≤ l`.
pub fn verify_decomposition(k: &Tensor3, kset: &WavenumberSet, rhs: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = kset.p;
    let n = kset.n();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |l| (j, l))).collect();
    let kmax = k.max_abs();
    for &(j, l) in &pairs {
        let i = kset.sum_index(j, l);
        if !(k.get(i, j, l).abs() > 1e-12 * kmax) {
            return Err(Error::VanishingResonance(j, l));
        }
    }
    let fast: Vec<usize> = (p..n).collect();
    let a = DMatrix::from_fn(pairs.len(), fast.len(), |r, c| k.get(fast[c], pairs[r].0, pairs[r].1));
    let b = DVector::from_iterator(pairs.len(), pairs.iter().map(|&(j, l)| 0.5 * (rhs[(j, l)] + rhs[(l, j)])));
    let x = a.clone().lu().solve(&b).ok_or_else(|| Error::Singular("decomposition system".into()))?;
    let res = (&a * &x - &b).amax();
    if !(res <= 1e-8 * b.amax().max(1.0)) {
        return Err(Error::Singular(format!("decomposition residual {res:e}")));
    }
    let mut chi = vec![0.0; n];
    for (c, &i) in fast.iter().enumerate() {
        chi[i] = x[c];
    }
    Ok(chi)
}

/// One moment condition `∫ (Σ_p c_p y^p) e^{−exponent·y} û_slot(y) dy = value`;
/// `poly[p] = c_p` for `p = 0..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTarget {
    pub slot: u32,
    pub exponent: u32,
    pub poly: [f64; 5],
    pub value: f64,
}

fn unit(p: usize) -> [f64; 5] {
    let mut c = [0.0; 5];
    c[p] = 1.0;
    c
}

/// Leading amplitudes `ā_i = Θ*_i'(0)`-type and `b̄_j = ψ_j''(0)/2`-type,
/// obtained by projecting on the leading shapes.
pub fn normalizers(basis: &ModeBasis) -> Vec<(f64, f64)> {
    basis
        .modes
        .iter()
        .map(|m| {
            let k = m.k as f64;
            let (mut na, mut da, mut nb, mut db) = (0.0, 0.0, 0.0, 0.0);
            for (q, &y) in basis.y.iter().enumerate() {
                let e = exp(-k * y);
                let ts = (k * y * y + y) * e;
                let ps = y * y * e;
                let w = basis.weights[q];
                na += m.theta_star[q] * ts * w;
                da += ts * ts * w;
                nb += m.psi[q] * ps * w;
                db += ps * ps * w;
            }
            (na / da, nb / db)
        })
        .collect()
}

/// Moment conditions on `u₁` so that `M(u₁) = T` for the leading-order mode
/// shapes. Off-diagonal pairs fix `(y², y³)` moments of `û_{|k_i−k_j|}` at
/// exponent `k_i + k_j` and zero its `y⁴` moment; the sum slot's `y²`, `y³`
/// moments are zeroed. A diagonal entry is a single condition on `û_0`
/// against its own profile `y²(3k + 2k²y − 2k³y²)e^{−2ky}`.
pub fn solve_moment_targets(t: &DMatrix<f64>, ks: &[u32], norms: &[(f64, f64)]) -> Result<Vec<MomentTarget>> {
    let n = ks.len();
    if t.nrows() != n || t.ncols() != n || norms.len() != n {
        return Err(Error::InvalidParameter("T, wavenumbers and normalizers must agree in size".into()));
    }
    let mut out: Vec<MomentTarget> = vec![];
    let mut push = |slot: u32, exponent: u32, poly: [f64; 5], value: f64| -> Result<()> {
        if let Some(old) = out.iter().find(|o| o.slot == slot && o.exponent == exponent && o.poly == poly) {
            if (old.value - value).abs() > 1e-14 * value.abs().max(1.0) {
                return Err(Error::Singular(format!("conflicting moment on slot {slot}, exponent {exponent}")));
            }
            return Ok(());
        }
        out.push(MomentTarget { slot, exponent, poly, value });
        Ok(())
    };
    for i in 0..n {
        for j in 0..=i {
            let (ki, kj) = (ks[i] as f64, ks[j] as f64);
            let m = ks[i] + ks[j];
            let slot = ks[i].abs_diff(ks[j]);
            push(m, m, unit(2), 0.0)?;
            push(m, m, unit(3), 0.0)?;
            if i == j {
                let c = norms[i].0 * norms[i].1;
                push(0, m, [0.0, 0.0, 3.0 * ki, 2.0 * ki * ki, -2.0 * ki * ki * ki], t[(i, i)] / c)?;
                continue;
            }
            let tij = 2.0 * t[(i, j)] / (norms[i].0 * norms[j].1);
            let tji = 2.0 * t[(j, i)] / (norms[j].0 * norms[i].1);
            // symmetric and antisymmetric combinations
            let (a11, a12, r1) = (1.5 * (ki + kj), ki * ki + kj * kj, 0.5 * (tij + tji));
            let (a21, a22, r2) = (0.5 * (ki - kj), ki * ki - kj * kj, 0.5 * (tij - tji));
            let det = a11 * a22 - a12 * a21;
            if det.abs() < 1e-12 * (a11 * a22).abs().max(1.0) {
                return Err(Error::Singular(format!("control block for pair ({i}, {j})")));
            }
            let x = (r1 * a22 - a12 * r2) / det;
            let y = (a11 * r2 - a21 * r1) / det;
            push(slot, m, unit(2), x)?;
            push(slot, m, unit(3), y)?;
            push(slot, m, unit(4), 0.0)?;
        }
    }
    out.sort_by_key(|a| (a.slot, a.exponent));
    Ok(out)
}

/// `det` of the symmetric/antisymmetric block for a pair.
pub fn control_block_det(ki: f64, kj: f64) -> f64 {
    1.5 * (ki + kj) * (ki * ki - kj * kj) - (ki * ki + kj * kj) * 0.5 * (ki - kj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProfile {
    pub values: Vec<f64>,
    pub coeffs: Vec<f64>,
}

fn legendre(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// Bump basis `y²(h−y)²/h⁴ · P_q(2t − 1)`, with `t ∈ [0, 1]` the grid's
/// wall-stretched coordinate so the polynomial part resolves the layer.
fn bump(q: usize, y: f64, grid: &Grid) -> f64 {
    let h = grid.h;
    let s = y * (h - y) / (h * h);
    s * s * legendre(q, 2.0 * grid.stretched(y) - 1.0)
}

/// Least-norm profile with prescribed moments `(exponent, power) → value`,
/// vanishing to first order at both ends.
pub fn moment_profile(targets: &[(u32, u32, f64)], grid: &Grid) -> Result<MomentProfile> {
    if targets.iter().any(|t| t.1 > 4) {
        return Err(Error::InvalidParameter("moment powers above 4 are not supported".into()));
    }
    let general: Vec<(u32, [f64; 5], f64)> = targets.iter().map(|&(m, p, v)| (m, unit(p as usize), v)).collect();
    moment_profile_general(&general, grid)
}

/// As [`moment_profile`], with polynomial weights `Σ c_p y^p`.
pub fn moment_profile_general(targets: &[(u32, [f64; 5], f64)], grid: &Grid) -> Result<MomentProfile> {
    let npts = grid.len();
    if targets.iter().all(|t| t.2 == 0.0) {
        return Ok(MomentProfile { values: vec![0.0; npts], coeffs: vec![] });
    }
    let nc = targets.len();
    let nb = 4 * nc;
    let phi = DMatrix::from_fn(npts, nb, |q, j| bump(j, grid.y[q], grid));
    // row-equilibrated functionals
    let mut c = DMatrix::<f64>::zeros(nc, nb);
    let mut a = DVector::<f64>::zeros(nc);
    for (r, &(m, ref pc, v)) in targets.iter().enumerate() {
        let f: Vec<f64> = grid.y.iter().map(|&y| weight(pc, y) * exp(-(m as f64) * y)).collect();
        for j in 0..nb {
            c[(r, j)] = (0..npts).map(|q| f[q] * phi[(q, j)] * grid.w[q]).sum();
        }
        let s = c.row(r).norm();
        if !(s > 0.0) {
            return Err(Error::Singular("moment functional vanishes on the basis".into()));
        }
        for j in 0..nb {
            c[(r, j)] /= s;
        }
        a[r] = v / s;
    }
    // least-norm solution through the SVD of the constraint matrix itself;
    // normal equations square its (large) condition number
    let svd = c.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-15 * smax) {
        return Err(Error::Singular("moment functionals nearly dependent; enlarge the basis".into()));
    }
    let mut coeff = svd.solve(&a, 0.0).map_err(|e| Error::Singular(e.into()))?;
    for _ in 0..2 {
        let r = &a - &c * &coeff;
        coeff += svd.solve(&r, 0.0).map_err(|e| Error::Singular(e.into()))?;
    }
    let values = &phi * &coeff;
    Ok(MomentProfile { values: values.iter().copied().collect(), coeffs: coeff.iter().copied().collect() })
}

fn weight(c: &[f64; 5], y: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &x| acc * y + x)
}

pub fn moment(values: &[f64], exponent: u32, power: u32, grid: &Grid) -> f64 {
    moment_general(values, exponent, &unit(power as usize), grid)
}

pub fn moment_general(values: &[f64], exponent: u32, poly: &[f64; 5], grid: &Grid) -> f64 {
    grid.y.iter().zip(values).zip(&grid.w).map(|((&y, v), w)| weight(poly, y) * exp(-(exponent as f64) * y) * v * w).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSolution {
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    pub moments: Vec<MomentTarget>,
    pub profiles: FourierProfileSet,
    /// Largest deviation of achieved moments from their targets.
    pub moment_error: f64,
}

/// Moment targets → one least-norm profile per Fourier slot.
pub fn synthesize_u1(t: &DMatrix<f64>, basis: &ModeBasis, grid: &Grid) -> Result<ControlSolution> {
    let ks: Vec<u32> = basis.modes.iter().map(|m| m.k).collect();
    let targets = solve_moment_targets(t, &ks, &normalizers(basis))?;
    let mut by_slot: BTreeMap<u32, Vec<(u32, [f64; 5], f64)>> = BTreeMap::new();
    for mt in &targets {
        by_slot.entry(mt.slot).or_default().push((mt.exponent, mt.poly, mt.value));
    }
    let mut profiles = FourierProfileSet::new();
    let mut err: f64 = 0.0;
    for (slot, tg) in by_slot {
        let prof = moment_profile_general(&tg, grid)?;
        for (m, p, v) in &tg {
            err = err.max((moment_general(&prof.values, *m, p, grid) - v).abs());
        }
        if prof.values.iter().any(|&v| v != 0.0) {
            profiles.insert(slot, prof.values);
        }
    }
    let n = t.nrows();
    Ok(ControlSolution { t: (0..n).map(|i| (0..n).map(|j| t[(i, j)]).collect()).collect(), moments: targets, profiles, moment_error: err })
}

/// `g₁` obtained by exact inversion of `u₁ = −g₁(U − u₀)/(1 + γ g₁)`.
#[derive(Debug, Clone)]
pub struct G1Field {
    pub u1: FourierProfileSet,
    pub u: Vec<f64>,
    pub u0: f64,
    pub gamma: f64,
}

impl G1Field {
    pub fn g1(&self, x: f64, q: usize) -> Result<f64> {
        let u1 = self.u1.eval(x, q);
        let den = (self.u[q] - self.u0) + self.gamma * u1;
        if den.abs() < 1e-12 * self.u0.abs().max(1.0) {
            return Err(Error::Singular("g1 denominator vanishes; enlarge u0".into()));
        }
        Ok(-u1 / den)
    }

    /// `u₁` recomputed from `g₁`.
    pub fn u1_from_g1(&self, g: f64, q: usize) -> f64 {
        -g * (self.u[q] - self.u0) / (1.0 + self.gamma * g)
    }
}

pub fn g1_from_u1(u1: FourierProfileSet, u_samples: Vec<f64>, u0: f64, gamma: f64) -> Result<G1Field> {
    let sup = u_samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(u0 > sup) {
        return Err(Error::InvalidParameter(format!("u0 = {u0} must exceed sup|U| = {sup}")));
    }
    Ok(G1Field { u1, u: u_samples, u0, gamma })
}
