//! Run configuration: JSON file, defaults for every key, and dotted-path
//! overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ob_core::spectral::{Coupling, YModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PRESETS: &[&str] = &["contraction", "lorenz"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Spectrum,
    Reduce,
    Control,
    Realize,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Spectrum => "spectrum",
            Stage::Reduce => "reduce",
            Stage::Control => "control",
            Stage::Realize => "realize",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub b: f64,
    pub s0: f64,
    pub s2: f64,
    pub nu: Option<f64>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig { b: 30.0, s0: 0.9, s2: 0.05, nu: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub kmax: u32,
    pub pencil_n: usize,
    pub pencil_kmax: u32,
    pub kernel_tol: f64,
    pub coupling: Coupling,
    pub model: YModel,
    pub calibration_iters: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            kmax: 21,
            pencil_n: 100,
            pencil_kmax: 21,
            kernel_tol: 1e-6,
            coupling: Coupling::default(),
            model: YModel::default(),
            calibration_iters: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub b: f64,
    pub grid_n: usize,
    pub r0: f64,
    /// Pick up `u₁` from an existing control_solution.json.
    pub use_control: bool,
    pub sparsity_tol: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig { b: 50.0, grid_n: 200, r0: 1.0, use_control: false, sparsity_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Explicit target; random (from the seed) when absent.
    #[serde(rename = "T")]
    pub t: Option<Vec<Vec<f64>>>,
    pub scale: f64,
    pub u0: Option<f64>,
    pub x_samples: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { t: None, scale: 1.0, u0: None, x_samples: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub preset: Option<String>,
    /// Explicit raw field, used when `preset` is null.
    #[serde(rename = "D")]
    pub d: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "R")]
    pub r: Option<Vec<Vec<f64>>>,
    pub f: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    /// Decay rate of the contraction preset.
    pub rate: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { preset: Some("contraction".into()), d: None, r: None, f: None, x0: None, rate: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealizeConfig {
    pub ball_radius: f64,
    pub xi: f64,
    pub xi_ladder: Vec<f64>,
    pub ladder_horizon: f64,
    pub horizon: f64,
    pub dt_out: f64,
    pub tol: f64,
    pub c0: f64,
    pub etd_h: f64,
    pub lyapunov_horizon: f64,
    pub lyapunov_interval: f64,
}

impl Default for RealizeConfig {
    fn default() -> Self {
        let p = ob_core::realize::RealizeParams::default();
        RealizeConfig {
            ball_radius: p.ball_radius,
            xi: p.xi,
            xi_ladder: vec![1e-1, 1e-2, 1e-3],
            ladder_horizon: 50.0,
            horizon: p.horizon,
            dt_out: p.dt_out,
            tol: p.tol,
            c0: p.c0,
            etd_h: p.etd_h,
            lyapunov_horizon: p.lyapunov_horizon,
            lyapunov_interval: p.lyapunov_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub plot: bool,
    /// Number of base wavenumbers.
    pub p: usize,
    pub profile: ProfileConfig,
    pub spectrum: SpectrumConfig,
    pub reduce: ReduceConfig,
    pub control: ControlConfig,
    pub target: TargetConfig,
    pub realize: RealizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::All,
            out: PathBuf::from("out"),
            seed: 0,
            threads: None,
            plot: false,
            p: 2,
            profile: ProfileConfig::default(),
            spectrum: SpectrumConfig::default(),
            reduce: ReduceConfig::default(),
            control: ControlConfig::default(),
            target: TargetConfig::default(),
            realize: RealizeConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Apply `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').with_context(|| format!("override `{spec}` is not of the form key.path=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            bail!("override `{spec}` has an empty path segment");
        }
        let obj = match cur {
            Value::Object(m) => m,
            _ => bail!("override `{spec}`: `{}` is not an object", keys[..i].join(".")),
        };
        if !obj.contains_key(*key) {
            bail!("override `{spec}`: unknown key `{}`", keys[..=i].join("."));
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).expect("checked above");
    }
    unreachable!("split yields at least one segment")
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.p) {
            bail!("p must lie in 1..=12, got {}", self.p);
        }
        ob_core::profile::derive_scales_with(self.profile.b, self.profile.s0, self.profile.s2, self.profile.nu)
            .map_err(|e| anyhow::anyhow!("invalid profile parameters: {e}"))?;
        let positive = [
            ("spectrum.kernel_tol", self.spectrum.kernel_tol),
            ("reduce.b", self.reduce.b - 1.0),
            ("control.scale", self.control.scale),
            ("realize.ball_radius", self.realize.ball_radius),
            ("realize.xi", self.realize.xi),
            ("realize.horizon", self.realize.horizon),
            ("realize.dt_out", self.realize.dt_out),
            ("realize.tol", self.realize.tol),
            ("realize.c0", self.realize.c0),
            ("realize.etd_h", self.realize.etd_h),
            ("realize.lyapunov_horizon", self.realize.lyapunov_horizon),
            ("realize.lyapunov_interval", self.realize.lyapunov_interval),
            ("target.rate", self.target.rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                bail!("{name} must be positive and finite");
            }
        }
        if self.realize.xi_ladder.iter().any(|x| !(*x > 0.0)) {
            bail!("realize.xi_ladder entries must be positive");
        }
        if self.reduce.grid_n < 16 {
            bail!("reduce.grid_n must be at least 16");
        }
        match &self.target.preset {
            Some(p) if !PRESETS.contains(&p.as_str()) => bail!("unknown target preset `{p}` (known: {})", PRESETS.join(", ")),
            None if self.target.d.is_none() || self.target.r.is_none() || self.target.f.is_none() => {
                bail!("target.preset is null, so target.D, target.R and target.f are all required")
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = RunConfig::load(None, &["profile.b=40".into(), "target.preset=lorenz".into(), "p=3".into()]).unwrap();
        assert_eq!(c.profile.b, 40.0);
        assert_eq!(c.target.preset.as_deref(), Some("lorenz"));
        assert_eq!(c.p, 3);
        assert!(RunConfig::load(None, &["profile.bee=1".into()]).is_err());
        assert!(RunConfig::load(None, &["profile".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let e = RunConfig::load(None, &["profile.s0=1.5".into()]).unwrap_err();
        assert!(format!("{e:#}").contains("s0"));
        assert!(RunConfig::load(None, &["target.preset=\"rossler\"".into()]).is_err());
        assert!(RunConfig::load(None, &["realize.xi=0".into()]).is_err());
    }
}
