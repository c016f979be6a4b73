use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Variants split into configuration problems (bad input shape, bad
/// parameters) and numerical failures (divergence, indefinite curvature).
/// [`Error::is_config`] is what the CLI uses to pick its exit code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),

    #[error("dense size {n} exceeds the cap of {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("function evaluation returned a non-finite value")]
    NonFiniteEval,

    #[error("unsupported stencil: {0}")]
    UnsupportedStencil(String),

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("log-log fit requires strictly positive values, got {0}")]
    NonPositiveValue(f64),

    #[error("iteration diverged after {iters} iterations")]
    Diverged { iters: usize },

    #[error("negative beta {0} requires allow_negative_beta")]
    NegativeBetaNotEnabled(f64),

    #[error("non-positive curvature {curvature:e} at CG iteration {iter}")]
    IndefiniteDetected { iter: usize, curvature: f64 },

    #[error("equilibrium phase at beta = {beta} diverged: {source}")]
    PhaseDiverged {
        beta: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),

    #[error("condition (delta + delta') < C / B_in violated: {0}")]
    ConditionViolated(String),

    #[error("need at least 10 sample pairs, got {0}")]
    RegionTooSmall(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("outer step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for errors caused by the caller's input rather than by numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::DimMismatch { .. }
            | Error::DenseCapExceeded { .. }
            | Error::UnsupportedStencil(_)
            | Error::InsufficientPoints { .. }
            | Error::NegativeBetaNotEnabled(_)
            | Error::NonPositiveBeta(_)
            | Error::ConditionViolated(_)
            | Error::RegionTooSmall(_)
            | Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::Io(_) => true,
            Error::AtStep { source, .. } | Error::PhaseDiverged { source, .. } => {
                source.is_config()
            }
            _ => false,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Error {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, got })
    }
}
