use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate pair: microphone {0} paired with itself")]
    DegeneratePair(usize),

    #[error("tone at {freq_hz} Hz is not below the Nyquist frequency {nyquist_hz} Hz")]
    AboveNyquist { freq_hz: f64, nyquist_hz: f64 },

    #[error("undefined SNR: clip is silent")]
    UndefinedSnr,

    #[error("undefined correlation: input is silent")]
    UndefinedCorrelation,

    #[error("FFT length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no activity: output rates are all zero")]
    NoActivity,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
