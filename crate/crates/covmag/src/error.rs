use thiserror::Error;

/// Crate-wide error type. Each variant names the failing stage so harness
/// errors can be traced back to the module that rejected the input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid noise source `{source_id}`: {reason}")]
    InvalidSource { source_id: String, reason: String },

    #[error("grid too coarse: dt = {dt:.3e} s exceeds 1/(20 f_max) = {limit:.3e} s for f_max = {f_max:.3e} Hz")]
    GridTooCoarse { dt: f64, limit: f64, f_max: f64 },

    #[error("duplicate seed streams would fabricate correlations: {0}")]
    DuplicateSeedStream(String),

    #[error("field grid does not cover the sequence window [{start:.3e}, {end:.3e}] s")]
    GridCoverage { start: f64, end: f64 },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid readout channel: {0}")]
    InvalidChannel(String),

    #[error("zero readout contrast: {0}")]
    ZeroContrast(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("estimator input error: {0}")]
    EstimatorInput(String),

    #[error("sensitivity unreachable at this total time: minimum T for SNR = 1 is {min_total_time:.3e} s")]
    UnreachableSensitivity { min_total_time: f64 },

    #[error("spectrum does not cover the requested frequency {0:.3e} Hz")]
    SpectrumCoverage(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("drift model requires a photon-counting channel")]
    DriftNeedsPhotonCount,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
