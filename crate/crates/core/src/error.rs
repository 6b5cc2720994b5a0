use alloc::string::String;
use core::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector dimensions are incompatible with the operation.
    DimensionMismatch { context: String },
    /// A Cholesky pivot was non-positive; the input is not positive
    /// definite (usually a sign of insufficient dampening).
    NotPositiveDefinite { pivot_index: usize },
    /// A model configuration invariant was violated.
    InvalidConfig { context: String },
    /// A token id is outside the configured vocabulary.
    TokenOutOfRange { token: u32, vocab_size: u32 },
    /// Input sequence exceeds the configured maximum length.
    SequenceTooLong { len: usize, max: usize },
    /// Operation requires the other generation mode.
    WrongMode,
    /// Diffusion step count must be at least one.
    InvalidSteps,
    /// Attention matrix rows do not sum to one.
    NotRowStochastic { row: usize, sum: f64 },
    /// Trace matrices disagree in shape across layers/heads/steps.
    ShapeMismatch { context: String },
    /// Statistic requires a sequence of at least two positions.
    DegenerateSequence,
    /// The timestep set for averaging is empty.
    EmptyTimestepSet,
    /// Calibration sequences have differing lengths.
    MixedSequenceLengths,
    /// Byte tokenizer needs a vocabulary of at least 257 ids.
    VocabTooSmall { vocab_size: u32 },
    /// No corpus document admits a window of the requested length.
    CorpusTooShort { required: usize },
    /// Sink profile length differs from the calibration sequence length.
    ProfileLengthMismatch { profile_len: usize, seq_len: usize },
    /// Sink-aware pruning was requested but no profile was collected.
    MissingSinkProfile,
    /// The sparsity pattern is incompatible with the layer shape.
    InvalidPattern { context: String },
    /// Structured pruning would remove every head of a layer.
    AllHeadsPruned,
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { context } => write!(f, "dimension mismatch: {context}"),
            Error::NotPositiveDefinite { pivot_index } => {
                write!(f, "matrix not positive definite (pivot {pivot_index} <= 0)")
            }
            Error::InvalidConfig { context } => write!(f, "invalid model config: {context}"),
            Error::TokenOutOfRange { token, vocab_size } => {
                write!(f, "token id {token} out of range for vocab size {vocab_size}")
            }
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::WrongMode => write!(f, "operation not available in this generation mode"),
            Error::InvalidSteps => write!(f, "diffusion step count must be >= 1"),
            Error::NotRowStochastic { row, sum } => {
                write!(f, "attention row {row} sums to {sum}, expected 1")
            }
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::DegenerateSequence => write!(f, "sequence must have at least 2 positions"),
            Error::EmptyTimestepSet => write!(f, "timestep set is empty"),
            Error::MixedSequenceLengths => write!(f, "calibration sequences differ in length"),
            Error::VocabTooSmall { vocab_size } => {
                write!(f, "byte tokenizer needs vocab >= 257, got {vocab_size}")
            }
            Error::CorpusTooShort { required } => {
                write!(f, "no corpus document admits a window of length {required}")
            }
            Error::ProfileLengthMismatch { profile_len, seq_len } => {
                write!(
                    f,
                    "sink profile length {profile_len} does not match sequence length {seq_len}"
                )
            }
            Error::MissingSinkProfile => {
                write!(f, "sink-aware pruning requires sink-masked statistics")
            }
            Error::InvalidPattern { context } => write!(f, "invalid sparsity pattern: {context}"),
            Error::AllHeadsPruned => write!(f, "structured ratio would remove every head"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
        }
    }
}

impl core::error::Error for Error {}
