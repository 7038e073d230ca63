//! Designed temperature profile: exponential wall layer plus a small polynomial
//! perturbation whose response pins chosen eigenvalues at zero.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{exp, log, pow, powi};
use crate::spectral::{scalar_residual, ScalarOptions};
use num_complex::Complex64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub b: f64,
    pub s0: f64,
    pub s2: f64,
    pub r: f64,
    pub beta: f64,
    pub beta1: f64,
    pub mu: f64,
    pub h: f64,
    pub nu: f64,
    pub c_u: f64,
    pub cbar_u: f64,
    pub gamma: f64,
    pub kappa: f64,
}

pub fn derive_scales(b: f64, s0: f64, s2: f64) -> Result<ScaleParams> {
    derive_scales_with(b, s0, s2, None)
}

/// As [`derive_scales`], optionally overriding `ν` (must still exceed `b^10`).
pub fn derive_scales_with(b: f64, s0: f64, s2: f64, nu: Option<f64>) -> Result<ScaleParams> {
    if !(b > 1.0) || !b.is_finite() {
        return Err(Error::InvalidParameter("b must be a finite number > 1".into()));
    }
    for (name, s) in [("s0", s0), ("s2", s2)] {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidParameter(alloc::format!("{name} must lie in (0, 1), got {s}")));
        }
    }
    let nu_min = powi(b, 10);
    let nu = nu.unwrap_or(nu_min);
    if !(nu >= nu_min) {
        return Err(Error::InvalidParameter("nu must be at least b^10".into()));
    }
    let r = pow(b, -s0);
    let beta = r * b;
    let c_u = -8.0 * (1.0 - 1.0 / nu) / (3.0 * (1.0 + r));
    Ok(ScaleParams {
        b,
        s0,
        s2,
        r,
        beta,
        beta1: 0.0,
        mu: pow(b, -s2),
        h: 10.0 * log(b),
        nu,
        c_u,
        cbar_u: c_u * r * powi(b, 4) / beta,
        gamma: 1e-3,
        kappa: nu,
    })
}

/// Coefficient `a_n` relating the polynomial target to its boundary-coupled part.
pub fn tilde_coeff(n: usize) -> f64 {
    let m = (n + 4) as f64;
    3.0 / (1.5 * m + m * (m + 1.0) / 4.0)
}

fn factorial(n: usize) -> f64 {
    // exact in u128 up to 34!, well beyond the degrees used here
    (1..=n as u128).product::<u128>() as f64
}

/// Per-coefficient response weight `3(n+4)!/2 + (n+5)!/4`.
pub fn response_weight(n: usize) -> f64 {
    1.5 * factorial(n + 4) + 0.25 * factorial(n + 5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPolynomial {
    pub coeffs: Vec<f64>,
    pub offsets: Vec<f64>,
    pub target_q: Vec<f64>,
    pub tilde: Vec<f64>,
}

impl DesignPolynomial {
    pub fn zero() -> Self {
        DesignPolynomial { coeffs: vec![0.0], offsets: vec![], target_q: vec![0.0], tilde: vec![tilde_coeff(0)] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// Target polynomial `Z(p)` in `p = 1/k`.
    pub fn z(&self, p: f64) -> f64 {
        horner(&self.target_q, p)
    }

    pub fn z_tilde(&self, p: f64) -> f64 {
        let c: Vec<f64> = self.target_q.iter().zip(&self.tilde).map(|(q, a)| q * a).collect();
        horner(&c, p)
    }

    /// Build the polynomial whose target vanishes (doubly) at `1/(k_j + d_j)`.
    pub fn from_offsets(kset: &[u32], offsets: &[f64]) -> Result<Self> {
        let q = squared_root_target(kset, offsets)?;
        let mut p = design_polynomial(&q)?;
        p.offsets = offsets.to_vec();
        Ok(p)
    }
}

fn horner(c: &[f64], p: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &x| acc * p + x)
}

/// Coefficients of `-(prod_j (p - 1/(k_j + d_j)))^2`, lowest power first.
pub fn squared_root_target(kset: &[u32], offsets: &[f64]) -> Result<Vec<f64>> {
    if kset.len() != offsets.len() {
        return Err(Error::InvalidParameter("one offset per wavenumber".into()));
    }
    let mut prod = vec![1.0];
    for (&k, &d) in kset.iter().zip(offsets) {
        let root = 1.0 / (k as f64 + d);
        let mut next = vec![0.0; prod.len() + 1];
        for (i, &c) in prod.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= root * c;
        }
        prod = next;
    }
    let mut sq = vec![0.0; 2 * prod.len() - 1];
    for (i, &a) in prod.iter().enumerate() {
        for (j, &b) in prod.iter().enumerate() {
            sq[i + j] -= a * b;
        }
    }
    Ok(sq)
}

/// Solve for `r̄_n` so that `Σ r̄_n (2k)^{-n-6} w_n = k^{-6} Σ q_n k^{-n}` for all `k`.
pub fn design_polynomial(target_q: &[f64]) -> Result<DesignPolynomial> {
    if target_q.is_empty() || target_q.iter().any(|q| !q.is_finite()) {
        return Err(Error::InvalidParameter("target coefficients must be finite and non-empty".into()));
    }
    if target_q.len() > 25 {
        return Err(Error::InvalidParameter("degree above 24 is not supported".into()));
    }
    // equal powers of k on both sides: the system is diagonal
    let coeffs = target_q.iter().enumerate().map(|(n, &q)| q * powi(2.0, n as i32 + 6) / response_weight(n)).collect();
    Ok(DesignPolynomial { coeffs, offsets: vec![], target_q: target_q.to_vec(), tilde: (0..target_q.len()).map(tilde_coeff).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureProfile {
    pub params: ScaleParams,
    pub poly: DesignPolynomial,
}

impl TemperatureProfile {
    pub fn u(&self, y: f64) -> f64 {
        let p = &self.params;
        let mut poly = 0.0;
        for (n, &c) in self.poly.coeffs.iter().enumerate().rev() {
            poly = poly * y + c / (n as f64 + 2.0);
        }
        // the Horner pass above builds Σ c_n/(n+2) y^n
        p.cbar_u + p.c_u * p.r * powi(p.b, 3) * (-libm::expm1(-p.b * y)) + p.mu * y * y * poly
    }

    pub fn u_y(&self, y: f64) -> f64 {
        let p = &self.params;
        p.c_u * p.r * powi(p.b, 4) * exp(-p.b * y) + p.mu * y * horner(&self.poly.coeffs, y)
    }

    pub fn sup_abs_u(&self, samples: usize) -> f64 {
        let h = self.params.h;
        (0..=samples).map(|i| self.u(h * i as f64 / samples as f64).abs()).fold(0.0, f64::max)
    }
}

pub fn build_profile(params: ScaleParams, poly: DesignPolynomial) -> Result<TemperatureProfile> {
    if poly.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter("polynomial coefficients must be finite".into()));
    }
    let mut prof = TemperatureProfile { params, poly };
    prof.params.beta1 = compute_beta1(&prof.params, &prof.poly)?;
    Ok(prof)
}

pub fn compute_beta1(params: &ScaleParams, poly: &DesignPolynomial) -> Result<f64> {
    let prof = TemperatureProfile { params: params.clone(), poly: poly.clone() };
    let uh = prof.u(params.h);
    if uh.abs() < 1e-300 || !uh.is_finite() {
        return Err(Error::InvalidParameter("degenerate profile: U(h) vanishes".into()));
    }
    Ok(prof.u_y(params.h) / uh)
}

/// Newton history of the offset calibration; `outcome` holds the converged
/// offsets or the reason the iteration stopped.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub iterates: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub outcome: Result<Vec<f64>>,
}

pub fn calibration_residual(kset: &[u32], d: &[f64], params: &ScaleParams, opts: &ScalarOptions) -> Result<Vec<f64>> {
    let poly = DesignPolynomial::from_offsets(kset, d)?;
    let prof = build_profile(params.clone(), poly)?;
    kset.iter().map(|&k| scalar_residual(Complex64::new(1.0, 0.0), k, &prof, opts).map(|(f, _)| f.re)).collect()
}

/// Offsets `d` making `z = 1` a root of the scalar equation for every `k ∈ K`.
pub fn calibrate_offsets(kset: &[u32], params: &ScaleParams, opts: &ScalarOptions) -> Result<Vec<f64>> {
    calibrate_offsets_run(kset, params, opts, 50).outcome
}

pub fn calibrate_offsets_run(kset: &[u32], params: &ScaleParams, opts: &ScalarOptions, max_iter: usize) -> CalibrationRun {
    let n = kset.len();
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut d = vec![0.0; n];
    let mut run = CalibrationRun { iterates: vec![], residuals: vec![], outcome: Ok(vec![]) };
    let mut res = match calibration_residual(kset, &d, params, opts) {
        Ok(r) => r,
        Err(e) => {
            run.outcome = Err(e);
            return run;
        }
    };
    run.iterates.push(d.clone());
    run.residuals.push(norm(&res));
    for it in 0..max_iter {
        let rn = norm(&res);
        if rn < 1e-12 {
            run.outcome = Ok(d);
            return run;
        }
        // forward-difference Jacobian
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for l in 0..n {
            let eps = 1e-7;
            let mut dp = d.clone();
            dp[l] += eps;
            match calibration_residual(kset, &dp, params, opts) {
                Ok(rp) => {
                    for j in 0..n {
                        jac[(j, l)] = (rp[j] - res[j]) / eps;
                    }
                }
                Err(e) => {
                    run.outcome = Err(e);
                    return run;
                }
            }
        }
        let rhs = nalgebra::DVector::from_iterator(n, res.iter().map(|x| -x));
        let step = match jac.lu().solve(&rhs) {
            Some(s) if s.iter().all(|x| x.is_finite()) => s,
            _ => {
                run.outcome = Err(Error::NonConvergence { iters: it, residual: rn });
                return run;
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-6 {
            let trial: Vec<f64> = d.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if let Some((i, v)) = trial.iter().enumerate().find(|(_, v)| v.abs() >= 0.1) {
                if t <= 1.0 / 64.0 {
                    run.iterates.push(trial.clone());
                    run.outcome = Err(Error::OutsideRegime { index: i, value: v.abs() });
                    return run;
                }
                t *= 0.5;
                continue;
            }
            match calibration_residual(kset, &trial, params, opts) {
                Ok(r) if norm(&r) < rn => {
                    accepted = Some((trial, r));
                    break;
                }
                _ => t *= 0.5,
            }
        }
        match accepted {
            Some((nd, nr)) => {
                d = nd;
                res = nr;
                run.iterates.push(d.clone());
                run.residuals.push(norm(&res));
            }
            None => {
                run.outcome = Err(Error::NonConvergence { iters: it + 1, residual: rn });
                return run;
            }
        }
    }
    run.outcome = if norm(&res) < 1e-12 { Ok(d) } else { Err(Error::NonConvergence { iters: max_iter, residual: norm(&res) }) };
    run
}
