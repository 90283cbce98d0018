use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// The normalized delay fell outside `[0, 1)`, i.e. the path delay
    /// exceeds the cyclic prefix.
    #[error("normalized delay {value} outside [0, 1): path delay exceeds the cyclic prefix")]
    DelayOutOfRange { value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("line search found no sufficient decrease after {reductions} step reductions")]
    LineSearchFailure { reductions: usize },

    #[error("degenerate signal subspace: model order {order} >= dimension {dim}")]
    DegenerateSubspace { order: usize, dim: usize },

    #[error("ill-conditioned atom Gram matrix (condition number {0:e})")]
    IllConditioned(f64),

    #[error("velocity system is rank deficient (rank {0} < 3)")]
    RankDeficient(usize),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
