use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the estimation pipeline.
///
/// Variants split into two families: input problems (bad files, invalid
/// configuration, violated preconditions) and numerical failures (singular
/// designs, divergent fits). [`Error::is_numerical`] tells them apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no rows for state {0:?}")]
    EmptyPanel(String),

    #[error("duplicate row for unit {unit} on {date} ({file}:{line})")]
    Duplicate {
        unit: String,
        date: String,
        file: String,
        line: u64,
    },

    #[error("unknown unit {0:?}")]
    UnknownUnit(String),

    #[error("cumulative count decreases for {unit} on {date} ({prev} -> {next})")]
    NonMonotone {
        unit: String,
        date: String,
        prev: u64,
        next: u64,
    },

    #[error("treatment window does not intersect the date axis")]
    WindowOutsideAxis,

    #[error("series too short: need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("design matrix is rank deficient: column {0} is degenerate")]
    RankDeficient(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("at least two clusters required, got {0}")]
    TooFewClusters(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("fitted means diverged (separation) at iteration {0}")]
    Separation(usize),

    #[error("combinatorial limit exceeded: {0}")]
    TooLarge(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical routines rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::Singular(_)
                | Error::NonFinite(_)
                | Error::Separation(_)
        )
    }
}
