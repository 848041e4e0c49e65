//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("empty waveform")]
    EmptyWaveform,

    #[error("waveform contains non-finite samples")]
    NonFiniteWaveform,

    #[error("spectrogram contains non-finite values")]
    NonFiniteSpectrogram,

    #[error("hop {hop} exceeds window length {window}")]
    HopExceedsWindow { hop: usize, window: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },

    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("negative variance at bin ({f}, {t})")]
    NegativeVariance { f: usize, t: usize },

    #[error("clean signal has zero power; snr undefined")]
    SilentClean,

    #[error("noise signal has zero power; cannot scale to requested snr")]
    SilentNoise,

    #[error("unsupported wav file: {0}")]
    WavFormat(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("file contains non-finite values")]
    NonFiniteFile,

    #[error("visual embedding required by a conditional model but not provided")]
    MissingVisual,

    #[error("visual embedding has no frames")]
    EmptyVisual,

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("nonpositive model variance at bin ({f}, {t})")]
    NonPositiveVariance { f: usize, t: usize },

    #[error("non-finite residual power passed to nmf update")]
    NonFiniteNmfInput,

    #[error("nmf factors became non-finite")]
    NmfNaN,

    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },

    #[error("sampler diverged at step {step}: max |s| = {max_abs:.3e} exceeds {limit:.3e}")]
    Divergence { step: usize, max_abs: f64, limit: f64 },

    #[error("reference signal has zero energy")]
    ZeroEnergyReference,

    #[error("audio duration must be positive to compute rtf")]
    ZeroDuration,

    #[error("unknown kind: {0}")]
    UnknownKind(String),
}

pub type Result<T> = std::result::Result<T, Error>;
