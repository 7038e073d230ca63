//! Artifact writers and readers. Everything is written deterministically so
//! reruns with unchanged inputs are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ob_core::realize::Trajectory;
use ob_core::reduction::ReducedSystem;
use ob_core::spectral::{Method, SpectrumRecord};
use serde::Serialize;

pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const SPECTRUM_SVG: &str = "spectrum.svg";
pub const CALIBRATION_JSON: &str = "calibration.json";
pub const REDUCED_JSON: &str = "reduced_system.json";
pub const SPARSITY_JSON: &str = "sparsity.json";
pub const CONTROL_JSON: &str = "control_solution.json";
pub const REALIZATION_JSON: &str = "realization_report.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_reduced(dir: &Path) -> Result<ReducedSystem> {
    let path = dir.join(REDUCED_JSON);
    if !path.exists() {
        anyhow::bail!("{} not found; run the `reduce` stage first (or `all`) with the same --out directory", path.display());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} does not match the reduced-system schema", path.display()))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Scalar => "scalar",
        Method::Pencil => "pencil",
        Method::Bound => "bound",
    }
}

pub fn write_spectrum_csv(path: &Path, records: &[SpectrumRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["k", "Re_lambda", "Im_lambda", "method", "in_kernel_set"])?;
    for r in records {
        let (re, im) = match r.lambda {
            Some(l) => (format!("{:e}", l.re), format!("{:e}", l.im)),
            None => (String::new(), String::new()),
        };
        w.write_record([r.k.to_string(), re, im, method_name(r.method).into(), r.in_kernel_set.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `t, X_1..X_n`.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let n = traj.states.first().map_or(0, |s| s.len());
    let mut head = vec!["t".to_string()];
    head.extend((1..=n).map(|i| format!("X_{i}")));
    w.write_record(&head)?;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![format!("{t:e}")];
        row.extend(x.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format `x, y, value` grid.
pub fn write_grid_csv(path: &Path, xs: &[f64], ys: &[f64], value: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["x", "y", "value"])?;
    for (a, x) in xs.iter().enumerate() {
        for (q, y) in ys.iter().enumerate() {
            w.write_record([format!("{x:e}"), format!("{y:e}"), format!("{:e}", value(a, q))])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir.to_path_buf())
}
