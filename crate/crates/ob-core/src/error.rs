use alloc::boxed::Box;
use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-convergence after {iters} iterations (residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("offset {index} left the admissible regime (|d| = {value})")]
    OutsideRegime { index: usize, value: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("z = {z_re}+{z_im}i outside the admissible domain")]
    OutsideDomain { z_re: f64, z_im: f64 },
    #[error("boundary residual {0:e} exceeds tolerance")]
    BoundaryResidual(f64),
    #[error("vanishing resonance coefficient for pair ({0}, {1})")]
    VanishingResonance(usize, usize),
    #[error("wavenumber set violates the separation rule: {0}")]
    BadWavenumberSet(String),
    #[error("field is not inward on the sphere of radius {radius} (worst Y·W = {worst:e})")]
    NotInward { radius: f64, worst: f64 },
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("[{0}] {1}")]
    Stage(&'static str, Box<Error>),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage(stage, Box::new(self))
    }
}
