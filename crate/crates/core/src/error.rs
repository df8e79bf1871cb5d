use std::path::PathBuf;

/// Errors produced by the register pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Every Delaunay triangle was rejected by the alpha criterion.
    #[error("alpha shape is empty: smallest circumradius {min_circumradius} exceeds 1/alpha = {max_radius}")]
    EmptyAlphaShape {
        min_circumradius: f64,
        max_radius: f64,
    },

    #[error("zero interpolation distance at pixel (row {row}, col {col})")]
    ZeroDistance { row: usize, col: usize },

    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("LoRA layer state: {0}")]
    LoraState(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("fingerprint mismatch: cache has {cached:#018x}, inputs hash to {computed:#018x}")]
    Fingerprint { cached: u64, computed: u64 },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
