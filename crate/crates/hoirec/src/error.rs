use thiserror::Error;

#[derive(Debug, Error)]
pub enum HoiError {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sphere initialization missed tolerance: residual {residual:.6} > {tolerance:.6}")]
    InitResidual { residual: f64, tolerance: f64 },

    #[error("empty isosurface: the field has no zero crossing inside the grid")]
    EmptyIsosurface,

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}
