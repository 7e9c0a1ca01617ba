use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Every position of a masked softmax was masked out.
    EmptyReachableSet,
    /// Fewer finite scores than requested selections.
    InsufficientReachable { requested: usize, available: usize },
    InvalidBinomial { n: usize, k: usize },
    WindowExceedsRing { window: usize, ring: usize },
    InvalidConfig(String),
    DimensionMismatch(String),
    MissingFastWeightState { layer: usize },
    EmptyBatch,
    EmptyBand,
    DegenerateNorm,
    AlreadyConverted,
    /// A non-finite value showed up in a loss or gradient.
    Divergence,
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    Truncated,
    MalformedCheckpoint(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyReachableSet => f.write_str("empty reachable set"),
            Error::InsufficientReachable { requested, available } => write!(
                f,
                "insufficient reachable experts: requested {requested}, {available} available"
            ),
            Error::InvalidBinomial { n, k } => write!(f, "invalid binomial: C({n}, {k})"),
            Error::WindowExceedsRing { window, ring } => {
                write!(f, "window exceeds ring: W={window} > N_u={ring}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::MissingFastWeightState { layer } => {
                write!(f, "missing fast-weight state for layer {layer}")
            }
            Error::EmptyBatch => f.write_str("empty batch"),
            Error::EmptyBand => f.write_str("intermediate layer band is empty"),
            Error::DegenerateNorm => f.write_str("degenerate norm"),
            Error::AlreadyConverted => f.write_str("model is already a universal-expert model"),
            Error::Divergence => f.write_str("divergence"),
            Error::BadMagic => f.write_str("bad magic"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "version mismatch: found {found}, expected {expected}")
            }
            Error::Truncated => f.write_str("truncated"),
            Error::MalformedCheckpoint(msg) => write!(f, "malformed checkpoint: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
