use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported bitstream version {found} at byte {offset}")]
    UnsupportedVersion { found: u8, offset: usize },
    #[error("bitstream truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("corrupt payload near byte {offset}")]
    Corrupt { offset: usize },
    #[error("unsupported image size {width}x{height} (each side must be in 1..65536)")]
    UnsupportedSize { width: usize, height: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid image file: {0}")]
    InvalidImage(String),
}
