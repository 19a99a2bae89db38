use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tile ({x}, {y}) lies outside the {width}x{height} grid")]
    OutOfGrid {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },
    #[error("stream {stream} has a non-positive power coefficient")]
    DegenerateStream { stream: usize },
    #[error("zero-forcing needs more antennas ({antennas}) than pilots ({pilots})")]
    PrecoderInfeasible { antennas: usize, pilots: usize },
    #[error("worst-case SINR bound has a non-positive denominator")]
    BoundInfeasible,
    #[error("group {group} has a non-positive rate")]
    Starvation { group: usize },
    #[error("{pilots} orthogonal pilots cannot separate {streams} streams")]
    PilotShortage { pilots: usize, streams: usize },
    #[error("estimated channel matrix is rank deficient")]
    SingularPrecoder,
    #[error("no feasible encoding rates for any number of predictive tiles")]
    Infeasible,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
