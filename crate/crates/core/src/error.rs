use thiserror::Error;

/// Errors raised anywhere in the registration toolkit.
#[derive(Debug, Error)]
pub enum LordError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty equatorial band around direction {index} ({x:.4}, {y:.4}, {z:.4})")]
    DegenerateBand { index: usize, x: f64, y: f64, z: f64 },

    #[error("GFA is undefined for an all-zero signal")]
    UndefinedGfa,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular spatial Jacobian: |J v| = {norm:e}")]
    SingularJacobian { norm: f64 },

    #[error("degenerate distribution: joint entropy {joint_entropy:e}")]
    DegenerateDistribution { joint_entropy: f64 },

    #[error("invalid density: entry {value:e} at index {index}")]
    InvalidDensity { index: usize, value: f64 },

    #[error("objective is not finite at the starting point")]
    InvalidStart,

    #[error("could not generate a diffeomorphic warp after {attempts} attempts")]
    CannotGenerate { attempts: usize },

    #[error("deformation is not diffeomorphic: min det J = {min_det:e}")]
    NotDiffeomorphic { min_det: f64 },

    #[error("analytic gradient disagrees with finite differences: max relative error {max_rel_err:e} > {tol:e}")]
    GradientMismatch { max_rel_err: f64, tol: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LordError {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> u8 {
        match self {
            LordError::Config(_) | LordError::InvalidArgument(_) => 2,
            LordError::Format(_) | LordError::Io(_) | LordError::DimensionMismatch(_) => 3,
            _ => 4,
        }
    }

    /// Short name of the error kind, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            LordError::InvalidArgument(_) => "invalid-argument",
            LordError::DegenerateBand { .. } => "degenerate-band",
            LordError::UndefinedGfa => "undefined-gfa",
            LordError::Domain(_) => "domain",
            LordError::SingularJacobian { .. } => "singular-jacobian",
            LordError::DegenerateDistribution { .. } => "degenerate-distribution",
            LordError::InvalidDensity { .. } => "invalid-density",
            LordError::InvalidStart => "invalid-start",
            LordError::CannotGenerate { .. } => "cannot-generate",
            LordError::NotDiffeomorphic { .. } => "not-diffeomorphic",
            LordError::GradientMismatch { .. } => "gradient-mismatch",
            LordError::DimensionMismatch(_) => "dimension-mismatch",
            LordError::Format(_) => "format",
            LordError::Config(_) => "config",
            LordError::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LordError::InvalidArgument(msg.into())
    }

    /// Io error that names the file involved.
    pub(crate) fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> LordError + '_ {
        move |e| LordError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        LordError::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, LordError>;
