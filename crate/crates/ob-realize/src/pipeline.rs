//! The staged pipeline. Each stage reads what it needs from the output
//! directory, writes its artifacts there, and tags its errors with its name.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use ob_core::control::{extended_set, g1_from_u1, sidon_set, synthesize_u1, WavenumberSet};
use ob_core::grid::Grid;
use ob_core::profile::{build_profile, calibrate_offsets_run, derive_scales_with, DesignPolynomial};
use ob_core::realize::{
    ladder_rung, lorenz, realize_rescaled, rescale_into_ball, LadderRung, QuadField, RealizationReport, RealizeParams, RescaleOptions, TargetField,
};
use ob_core::reduction::{compute_m, sparsity, FourierProfileSet, ReducedSystem, Tensor3};
use ob_core::spectral::{assemble_report, asymptotic_basis, spectrum_records, ReportOptions, ScalarOptions, SpectrumReport};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::io::{self, write_json};
use crate::plot;

fn core<T>(r: ob_core::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!(e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CalibrationFile {
    pub kset: Vec<u32>,
    pub converged: bool,
    pub offsets: Vec<f64>,
    pub error: Option<String>,
    /// Offsets actually used downstream.
    pub offsets_used: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub gap: f64,
    pub kernel_residual: f64,
    pub kernel_tol: f64,
    pub spectrum_pass: bool,
}

pub fn spectrum(cfg: &RunConfig, out: &Path) -> Result<(SpectrumReport, CalibrationFile)> {
    let pc = &cfg.profile;
    let scales = core(derive_scales_with(pc.b, pc.s0, pc.s2, pc.nu))?;
    let kset = sidon_set(cfg.p);
    let sopts = ScalarOptions { model: cfg.spectrum.model, coupling: cfg.spectrum.coupling };
    let run = calibrate_offsets_run(&kset, &scales, &sopts, cfg.spectrum.calibration_iters);
    // an infeasible calibration is recorded, not fatal: fall back to zero offsets
    let (offsets, error) = match &run.outcome {
        Ok(d) => (d.clone(), None),
        Err(e) => (run.iterates.last().cloned().unwrap_or_else(|| vec![0.0; kset.len()]), Some(e.to_string())),
    };
    let used = if error.is_none() { offsets.clone() } else { vec![0.0; kset.len()] };
    let prof = core(build_profile(scales, core(DesignPolynomial::from_offsets(&kset, &used))?))?;
    let ropts =
        ReportOptions { scalar: sopts, pencil_n: cfg.spectrum.pencil_n, pencil_kmax: cfg.spectrum.pencil_kmax, kernel_tol: cfg.spectrum.kernel_tol };
    let per_k: Vec<_> = (1..=cfg.spectrum.kmax)
        .into_par_iter()
        .map(|k| spectrum_records(k, &kset, &prof, &ropts).with_context(|| format!("k = {k}")))
        .collect::<Result<_>>()?;
    let report = assemble_report(per_k.into_iter().flatten().collect(), ropts.kernel_tol);
    let cal = CalibrationFile {
        kset,
        converged: error.is_none(),
        offsets,
        error,
        offsets_used: used,
        iterates: run.iterates,
        residuals: run.residuals,
        gap: report.gap,
        kernel_residual: report.kernel_residual,
        kernel_tol: report.kernel_tol,
        spectrum_pass: report.pass,
    };
    io::write_spectrum_csv(&out.join(io::SPECTRUM_CSV), &report.records)?;
    std::fs::write(out.join(io::SPECTRUM_SVG), plot::spectrum_svg(&report.records))?;
    write_json(&out.join(io::CALIBRATION_JSON), &cal)?;
    Ok((report, cal))
}

fn basis_for(kset: &[u32], b: f64, grid_n: usize) -> Result<(Grid, ob_core::spectral::ModeBasis)> {
    let grid = core(Grid::boundary_layer(grid_n, 10.0 * b.ln(), b))?;
    let basis = core(asymptotic_basis(kset, b, &grid))?;
    Ok((grid, basis))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ControlFile {
    #[serde(rename = "T")]
    t: Vec<Vec<f64>>,
    /// Fourier slot `n` → samples `[y, u₁ₙ(y)]`.
    profiles: std::collections::BTreeMap<String, Vec<[f64; 2]>>,
    u0: f64,
    gamma: f64,
    moments: Vec<ob_core::control::MomentTarget>,
    moment_error: f64,
    #[serde(rename = "achievedM")]
    achieved_m: Vec<Vec<f64>>,
    relative_error: f64,
}

fn read_control_profiles(out: &Path, y: &[f64]) -> Result<FourierProfileSet> {
    let path = out.join(io::CONTROL_JSON);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reduce.use_control is set but {} is missing", path.display()))?;
    let file: ControlFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut set = FourierProfileSet::new();
    for (n, samples) in file.profiles {
        if samples.len() != y.len() || samples.iter().zip(y).any(|(s, y)| (s[0] - y).abs() > 1e-9 * y.abs().max(1.0)) {
            bail!("profiles in {} were sampled on a different grid; rerun `control` with the current reduce settings", path.display());
        }
        set.insert(n.parse().context("profile slot is not an integer")?, samples.iter().map(|s| s[1]).collect());
    }
    Ok(set)
}

pub fn reduce(cfg: &RunConfig, out: &Path) -> Result<ReducedSystem> {
    let ws = core(extended_set(cfg.p))?;
    let (_, basis) = basis_for(&ws.full, cfg.reduce.b, cfg.reduce.grid_n)?;
    let u1 = if cfg.reduce.use_control { read_control_profiles(out, &basis.y)? } else { FourierProfileSet::new() };
    let rs = ReducedSystem::build(&basis, &u1, &FourierProfileSet::new(), cfg.reduce.r0);
    let sp = sparsity(&rs.tensor(), &ws.full, cfg.reduce.sparsity_tol);
    write_json(&out.join(io::REDUCED_JSON), &rs)?;
    write_json(&out.join(io::SPARSITY_JSON), &sp)?;
    Ok(rs)
}

pub fn control(cfg: &RunConfig, out: &Path) -> Result<f64> {
    let rs = io::read_reduced(out)?;
    let n = rs.n;
    let t = match &cfg.control.t {
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                bail!("control.T must be {n}×{n} to match {}", io::REDUCED_JSON);
            }
            DMatrix::from_fn(n, n, |i, j| rows[i][j])
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            DMatrix::from_fn(n, n, |_, _| cfg.control.scale * rng.random_range(-1.0..1.0))
        }
    };
    let (grid, basis) = basis_for(&rs.kset, cfg.reduce.b, cfg.reduce.grid_n)?;
    let sol = core(synthesize_u1(&t, &basis, &grid))?;
    let achieved = compute_m(&sol.profiles, &basis);
    let tn = t.norm();
    let rel = if tn > 0.0 { (&achieved - &t).norm() / tn } else { achieved.norm() };

    let pc = &cfg.profile;
    let scales = core(derive_scales_with(cfg.reduce.b, pc.s0, pc.s2, pc.nu))?;
    let gamma = scales.gamma;
    let prof = core(build_profile(scales, DesignPolynomial::zero()))?;
    let u: Vec<f64> = grid.y.iter().map(|&y| prof.u(y)).collect();
    let sup = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let u0 = cfg.control.u0.unwrap_or(2.0 * sup + 1.0);
    let g1 = core(g1_from_u1(sol.profiles.clone(), u.clone(), u0, gamma))?;

    let xs: Vec<f64> = (0..cfg.control.x_samples).map(|a| 2.0 * std::f64::consts::PI * a as f64 / cfg.control.x_samples as f64).collect();
    io::write_grid_csv(&out.join("u1.csv"), &xs, &grid.y, |a, q| sol.profiles.eval(xs[a], q))?;
    let g1_grid: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| (0..grid.y.len()).map(|q| g1.g1(x, q)).collect::<ob_core::Result<Vec<f64>>>())
        .collect::<ob_core::Result<_>>()
        .map_err(|e| anyhow!("g1 inversion failed: {e}"))?;
    io::write_grid_csv(&out.join("g1.csv"), &xs, &grid.y, |a, q| g1_grid[a][q])?;
    let profiles = sol.profiles.entries.iter().map(|(k, v)| (k.to_string(), grid.y.iter().zip(v).map(|(&y, &w)| [y, w]).collect())).collect();
    let file = ControlFile {
        t: sol.t,
        profiles,
        u0,
        gamma,
        moments: sol.moments,
        moment_error: sol.moment_error,
        achieved_m: (0..n).map(|i| (0..n).map(|j| achieved[(i, j)]).collect()).collect(),
        relative_error: rel,
    };
    write_json(&out.join(io::CONTROL_JSON), &file)?;
    Ok(rel)
}

/// Dimension `p` with `p + p(p+1)/2 = n`.
fn slow_dim(n: usize) -> Option<usize> {
    (1..=12).find(|p| p + p * (p + 1) / 2 == n)
}

/// Raw target field and its start point from the config.
pub fn raw_target(cfg: &RunConfig, p: usize) -> Result<(QuadField, Vec<f64>)> {
    let tc = &cfg.target;
    let r = cfg.realize.ball_radius;
    let (field, x0) = match tc.preset.as_deref() {
        Some("contraction") => {
            let t = TargetField::contraction(p, r, tc.rate);
            let x0 = (0..p).map(|i| if i % 2 == 0 { -0.3 * r } else { 0.2 * r }).collect();
            (t.field, x0)
        }
        Some("lorenz") => (lorenz(10.0, 28.0, 8.0 / 3.0), vec![1.0, 1.0, 20.0]),
        Some(other) => bail!("unknown target preset `{other}`"),
        None => {
            let (d, rr, f) = (tc.d.as_ref().unwrap(), tc.r.as_ref().unwrap(), tc.f.as_ref().unwrap());
            let m = f.len();
            if d.len() != m || d.iter().any(|a| a.len() != m || a.iter().any(|b| b.len() != m)) || rr.len() != m || rr.iter().any(|a| a.len() != m) {
                bail!("target.D, target.R and target.f have inconsistent dimensions");
            }
            let q = QuadField { d: Tensor3::from_nested(d), r: DMatrix::from_fn(m, m, |i, j| rr[i][j]), f: nalgebra::DVector::from_vec(f.clone()) };
            (q, vec![0.1; m])
        }
    };
    let x0 = tc.x0.clone().unwrap_or(x0);
    if field.n() != p {
        bail!("target has dimension {} but the reduced system has p = {p}; rerun `reduce` with --set p={}", field.n(), field.n());
    }
    if x0.len() != p {
        bail!("target.x0 has length {}, expected {p}", x0.len());
    }
    Ok((field, x0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RealizationFile {
    #[serde(flatten)]
    pub report: RealizationReport,
    pub target: String,
    pub ladder: Vec<LadderRung>,
    /// Largest ladder `ξ` whose manifold residual is below a quarter of the
    /// leading fast amplitude.
    pub xi_threshold: Option<f64>,
    pub fixed_point_error: Option<f64>,
}

pub fn realize(cfg: &RunConfig, out: &Path) -> Result<RealizationFile> {
    let rs = io::read_reduced(out)?;
    let p = slow_dim(rs.n).ok_or_else(|| anyhow!("{} has N = {}, which is not p + p(p+1)/2", io::REDUCED_JSON, rs.n))?;
    let ws = core(WavenumberSet::from_base(&rs.kset[..p]))?;
    if ws.full != rs.kset {
        bail!("{} lists wavenumbers {:?}, not the extended set of {:?}", io::REDUCED_JSON, rs.kset, &rs.kset[..p]);
    }
    let k = rs.tensor();
    let (raw, x0) = raw_target(cfg, p)?;
    let rc = &cfg.realize;
    let params = RealizeParams {
        b: cfg.reduce.b,
        grid_n: cfg.reduce.grid_n,
        ball_radius: rc.ball_radius,
        xi: rc.xi,
        horizon: rc.horizon,
        dt_out: rc.dt_out,
        tol: rc.tol,
        c0: rc.c0,
        etd_h: rc.etd_h,
        lyapunov_horizon: rc.lyapunov_horizon,
        lyapunov_interval: rc.lyapunov_interval,
        seed: cfg.seed,
    };
    let rescaled = core(rescale_into_ball(&raw, &x0, rc.ball_radius, &RescaleOptions { seed: cfg.seed, ..Default::default() }))?;
    let (report, ladder) = rayon::join(
        || core(realize_rescaled(&rescaled, &ws, &k, &params)),
        || {
            rc.xi_ladder
                .par_iter()
                .map(|&xi| core(ladder_rung(&rescaled.target, &ws, &k, &rescaled.attractor_point, xi, rc.ladder_horizon, &params)))
                .collect::<Result<Vec<_>>>()
        },
    );
    let (report, tt, st) = report?;
    let ladder = ladder?;
    let lead = report.tube_width / (4.0 * report.xi);
    let xi_threshold =
        ladder.iter().filter(|r| r.residual.sup <= 0.25 * lead).map(|r| r.xi).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    let fixed_point_error = rescaled.target.fixed_point().map(|fp| {
        let y = &st.states.last().expect("non-empty")[..p];
        y.iter().zip(&fp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    });
    io::write_trajectory_csv(&out.join("trajectory_target.csv"), &tt)?;
    io::write_trajectory_csv(&out.join("trajectory_realized.csv"), &st)?;
    if cfg.plot {
        let slow: Vec<Vec<f64>> = st.states.iter().map(|x| x[..p].to_vec()).collect();
        let orbits = [("target", tt.states.as_slice()), ("realized", slow.as_slice())];
        std::fs::write(out.join("phase_12.svg"), plot::phase_svg("slow variables", (0, 1.min(p - 1)), &orbits))?;
        if p >= 3 {
            std::fs::write(out.join("phase_13.svg"), plot::phase_svg("slow variables", (0, 2), &orbits))?;
            std::fs::write(out.join("phase_23.svg"), plot::phase_svg("slow variables", (1, 2), &orbits))?;
        }
    }
    let file =
        RealizationFile { report, target: cfg.target.preset.clone().unwrap_or_else(|| "explicit".into()), ladder, xi_threshold, fixed_point_error };
    write_json(&out.join(io::REALIZATION_JSON), &file)?;
    Ok(file)
}

/// Run one stage (or all of them in order).
pub fn run(cfg: &RunConfig) -> Result<()> {
    let out = io::ensure_dir(&cfg.out)?;
    let stages: &[Stage] = match cfg.stage {
        Stage::All => &[Stage::Spectrum, Stage::Reduce, Stage::Control, Stage::Realize],
        Stage::Spectrum => &[Stage::Spectrum],
        Stage::Reduce => &[Stage::Reduce],
        Stage::Control => &[Stage::Control],
        Stage::Realize => &[Stage::Realize],
    };
    for &s in stages {
        let r = match s {
            Stage::Spectrum => spectrum(cfg, &out).map(|_| ()),
            Stage::Reduce => reduce(cfg, &out).map(|_| ()),
            Stage::Control => control(cfg, &out).map(|_| ()),
            Stage::Realize => realize(cfg, &out).map(|_| ()),
            Stage::All => unreachable!(),
        };
        r.with_context(|| format!("[{}]", s.name()))?;
    }
    Ok(())
}
