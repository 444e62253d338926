//! Multi-rate lossy base codec: replicate padding, 8x8 block DCT, rate-scaled
//! quantization and adaptive range coding, plus PPM I/O and the procedural
//! image corpus used for desk-scale experiments.

pub mod codec;
pub mod dct;
mod error;
pub mod image;
pub mod pnm;
pub mod rangecoder;
pub mod rate;
pub mod synth;

pub use codec::{decode, encode, encode_with_stats, reconstruct, Bitstream, Decoded, Encoded};
pub use error::CodecError;
pub use image::ImagePlane;
pub use rate::{rate_to_scale, sample_lambda, RateControl, ScaleCode};
