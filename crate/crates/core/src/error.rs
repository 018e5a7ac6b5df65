use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid multipath profile: {0}")]
    Profile(String),

    #[error("timing offset {offset_samples:.3} samples does not fit in a {cp_len}-sample cyclic prefix")]
    TimingOffsetTooLarge { offset_samples: f64, cp_len: usize },

    #[error("input has zero power")]
    ZeroPower,

    #[error("input too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("frame part `{0}` missing")]
    MissingPart(String),

    #[error("value {value} at index {index} outside [-1, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("pilot subcarrier {0} is zero")]
    ZeroPilot(i64),

    #[error("channel estimate has no valid carriers")]
    NoValidCarriers,

    #[error("non-finite value encountered")]
    NonFinite,

    #[error("timing drift of {samples} samples between downlink estimates exceeds one sample")]
    SyncLoss { samples: i64 },

    #[error("frame detection failed: peak {peak} below threshold {threshold}")]
    DetectionFailed { peak: f64, threshold: f64 },

    #[error("protocol aborted in round {round}: {reason}")]
    ProtocolAbort { round: usize, reason: String },
}
