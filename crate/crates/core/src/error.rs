use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {label} at trial {trial} is not below n_class = {n_class}")]
    Label { trial: usize, label: u8, n_class: usize },

    #[error("invalid channel name: {0}")]
    ChannelName(String),

    #[error("invalid filter design: {0}")]
    FilterDesign(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("montage line {line}: {detail}")]
    MontageParse { line: usize, detail: String },

    #[error("duplicate cell ({row}, {col})")]
    DuplicateCell { row: usize, col: usize },

    #[error("duplicate channel {0:?}")]
    DuplicateChannel(String),

    #[error("expected {expected} entries, found {found}")]
    EntryCount { expected: usize, found: usize },

    #[error("channel {0:?} not found")]
    UnknownChannel(String),

    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate contrast: {0}")]
    DegenerateContrast(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::Dimension(_) => "dimension",
            Error::Label { .. } => "label",
            Error::ChannelName(_) => "channel_name",
            Error::FilterDesign(_) => "filter_design",
            Error::TooShort(_) => "too_short",
            Error::OutOfRange(_) => "out_of_range",
            Error::MontageParse { .. } => "montage_parse",
            Error::DuplicateCell { .. } => "duplicate_cell",
            Error::DuplicateChannel(_) => "duplicate_channel",
            Error::EntryCount { .. } => "entry_count",
            Error::UnknownChannel(_) => "unknown_channel",
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateContrast(_) => "degenerate_contrast",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
        }
    }

    /// The message without the variant label, for `<code>: <detail>` output.
    pub fn detail(&self) -> String {
        match self {
            Error::Io(e) => e.to_string(),
            Error::Truncated(s)
            | Error::Dimension(s)
            | Error::ChannelName(s)
            | Error::FilterDesign(s)
            | Error::TooShort(s)
            | Error::OutOfRange(s)
            | Error::NonFinite(s)
            | Error::DegenerateContrast(s)
            | Error::InvalidArgument(s)
            | Error::Config(s) => s.clone(),
            other => other.to_string(),
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
