//! Block-transform base codec.
//!
//! Each RGB plane is replicate-padded to a multiple of 8, split into 8x8
//! blocks, transformed with an orthonormal DCT and quantized with a step
//! table divided by the scale `s`. Coefficients are coded in zigzag order:
//! DC as a DPCM category plus raw mantissa bits, AC as (zero run, size)
//! symbols with end-of-block and 16-zero escapes, all through adaptive
//! models on one range coder.

use crate::dct::{self, Block, N, ZIGZAG};
use crate::error::CodecError;
use crate::image::{check_size, ImagePlane, CHANNELS};
use crate::rangecoder::{AdaptiveModel, RangeDecoder, RangeEncoder};
use crate::rate::{RateControl, ScaleCode};

pub const MAGIC: [u8; 4] = *b"RSDC";
pub const VERSION: u8 = 1;
/// magic (4) + version (1) + width (2) + height (2) + scale code (2).
pub const HEADER_LEN: usize = 11;

/// Quantization step at scale 1 for the DC coefficient.
pub const BASE_STEP: f64 = 0.25;
/// Relative growth of the step per unit of `u + v`.
pub const STEP_RAMP: f64 = 0.25;

const DC_ALPHABET: usize = 17;
const AC_ALPHABET: usize = 256;
const EOB: usize = 0x00;
const ZRL: usize = 0xF0;
const AC_BANDS: usize = 3;

/// Quantization step for raster position `index` of a block at scale `s`.
pub fn quant_step(index: usize, scale: f64) -> f64 {
    let (u, v) = (index % N, index / N);
    BASE_STEP * (1.0 + STEP_RAMP * (u + v) as f64) / scale
}

fn step_table(scale: f64) -> Block {
    std::array::from_fn(|i| quant_step(i, scale))
}

/// Size after replicate padding to whole blocks.
pub fn padded_size(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(N) * N, height.div_ceil(N) * N)
}

/// Encoded image: header fields plus the entropy-coded payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub width: u16,
    pub height: u16,
    pub scale_code: ScaleCode,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.scale_code.raw().to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CodecError::Truncated { offset: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(4)?;
        if bytes[..4] != MAGIC {
            return Err(CodecError::BadMagic { offset: 0 });
        }
        need(5)?;
        if bytes[4] != VERSION {
            return Err(CodecError::UnsupportedVersion {
                found: bytes[4],
                offset: 4,
            });
        }
        need(HEADER_LEN)?;
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let (width, height) = (u16_at(5), u16_at(7));
        if width == 0 || height == 0 {
            return Err(CodecError::Corrupt { offset: 5 });
        }
        let scale_code =
            ScaleCode::from_raw(u16_at(9)).map_err(|_| CodecError::Corrupt { offset: 9 })?;
        Ok(Self {
            width,
            height,
            scale_code,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn payload_bits(&self) -> usize {
        self.payload.len() * 8
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    /// Payload bits per pixel of the original (unpadded) image.
    pub fn bits_per_pixel(&self) -> f64 {
        self.payload_bits() as f64 / (f64::from(self.width) * f64::from(self.height))
    }
}

/// Quantized DCT coefficients, `[channel][block][raster index]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coefficients {
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub values: Vec<i32>,
}

impl Coefficients {
    fn block(&self, channel: usize, block: usize) -> &[i32] {
        let start = (channel * self.blocks_x * self.blocks_y + block) * N * N;
        &self.values[start..start + N * N]
    }
}

/// Pads, transforms and quantizes `image` at the given scale.
pub fn quantize(image: &ImagePlane, code: ScaleCode) -> Result<Coefficients, CodecError> {
    check_size(image.width(), image.height())?;
    let (pw, ph) = padded_size(image.width(), image.height());
    let padded;
    let src = if (pw, ph) == (image.width(), image.height()) {
        image
    } else {
        padded = image.pad_replicate(pw, ph);
        &padded
    };
    let steps = step_table(code.scale());
    let (bx, by) = (pw / N, ph / N);
    let mut values = Vec::with_capacity(CHANNELS * pw * ph);
    for c in 0..CHANNELS {
        let plane = src.plane(c);
        for j in 0..by {
            for i in 0..bx {
                let block: Block =
                    std::array::from_fn(|k| plane[(j * N + k / N) * pw + i * N + k % N]);
                let f = dct::forward(&block);
                values.extend(f.iter().zip(&steps).map(|(v, q)| (v / q).round() as i32));
            }
        }
    }
    Ok(Coefficients {
        blocks_x: bx,
        blocks_y: by,
        values,
    })
}

/// Dequantizes, inverse-transforms, crops to `width x height` and clamps to [-1, 1].
pub fn dequantize(
    coeffs: &Coefficients,
    code: ScaleCode,
    width: usize,
    height: usize,
) -> Result<ImagePlane, CodecError> {
    let steps = step_table(code.scale());
    let (pw, ph) = (coeffs.blocks_x * N, coeffs.blocks_y * N);
    let mut data = vec![0.0; CHANNELS * width * height];
    for c in 0..CHANNELS {
        let out = &mut data[c * width * height..(c + 1) * width * height];
        for j in 0..coeffs.blocks_y {
            for i in 0..coeffs.blocks_x {
                let q = coeffs.block(c, j * coeffs.blocks_x + i);
                let f: Block = std::array::from_fn(|k| f64::from(q[k]) * steps[k]);
                let pixels = dct::inverse(&f);
                for (k, p) in pixels.iter().enumerate() {
                    let (x, y) = (i * N + k % N, j * N + k / N);
                    if x < width && y < height {
                        out[y * width + x] = p.clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
    debug_assert!(pw >= width && ph >= height);
    ImagePlane::new(width, height, data)
}

/// Base reconstruction without entropy coding; identical to `decode(encode(..))`.
pub fn reconstruct(image: &ImagePlane, code: ScaleCode) -> Result<ImagePlane, CodecError> {
    dequantize(&quantize(image, code)?, code, image.width(), image.height())
}

fn category(v: i32) -> u32 {
    32 - v.unsigned_abs().leading_zeros()
}

fn mantissa(v: i32, cat: u32) -> u32 {
    if v >= 0 {
        v as u32
    } else {
        (v + (1 << cat) - 1) as u32
    }
}

fn from_mantissa(bits: u32, cat: u32) -> i32 {
    if (bits >> (cat - 1)) & 1 == 1 {
        bits as i32
    } else {
        bits as i32 - (1 << cat) + 1
    }
}

fn ac_band(position: usize) -> usize {
    match position {
        0..=5 => 0,
        6..=19 => 1,
        _ => 2,
    }
}

struct Models {
    dc: Vec<AdaptiveModel>,
    ac: Vec<AdaptiveModel>,
}

impl Models {
    fn new() -> Self {
        Self {
            dc: (0..CHANNELS).map(|_| AdaptiveModel::new(DC_ALPHABET)).collect(),
            ac: (0..AC_BANDS).map(|_| AdaptiveModel::new(AC_ALPHABET)).collect(),
        }
    }
}

/// Entropy-codes coefficients; returns the payload and its information content in bits.
pub fn entropy_code(coeffs: &Coefficients) -> Result<(Vec<u8>, f64), CodecError> {
    let mut enc = RangeEncoder::new();
    let mut models = Models::new();
    let blocks = coeffs.blocks_x * coeffs.blocks_y;
    for c in 0..CHANNELS {
        let mut prev_dc = 0;
        for b in 0..blocks {
            let q = coeffs.block(c, b);
            let diff = q[0] - prev_dc;
            prev_dc = q[0];
            let cat = category(diff);
            if cat as usize >= DC_ALPHABET {
                return Err(CodecError::InvalidParameter(format!("DC difference {diff} too large")));
            }
            enc.encode(&mut models.dc[c], cat as usize);
            enc.encode_bits(mantissa(diff, cat), cat);

            let mut run = 0;
            for k in 1..N * N {
                let v = q[ZIGZAG[k]];
                if v == 0 {
                    run += 1;
                    continue;
                }
                while run > 15 {
                    enc.encode(&mut models.ac[ac_band(k - run)], ZRL);
                    run -= 16;
                }
                let size = category(v);
                if size > 15 {
                    return Err(CodecError::InvalidParameter(format!("AC coefficient {v} too large")));
                }
                enc.encode(&mut models.ac[ac_band(k - run)], (run << 4) | size as usize);
                enc.encode_bits(mantissa(v, size), size);
                run = 0;
            }
            if run > 0 {
                enc.encode(&mut models.ac[ac_band(N * N - run)], EOB);
            }
        }
    }
    let bits = enc.information_bits();
    Ok((enc.finish(), bits))
}

/// Inverse of [`entropy_code`]. `base_offset` locates the payload in its container.
pub fn entropy_decode(
    payload: &[u8],
    blocks_x: usize,
    blocks_y: usize,
    base_offset: usize,
) -> Result<Coefficients, CodecError> {
    let mut dec = RangeDecoder::new(payload, base_offset)?;
    let mut models = Models::new();
    let blocks = blocks_x * blocks_y;
    let mut values = vec![0i32; CHANNELS * blocks * N * N];
    for c in 0..CHANNELS {
        let mut prev_dc = 0;
        for b in 0..blocks {
            let q = &mut values[(c * blocks + b) * N * N..][..N * N];
            let cat = dec.decode(&mut models.dc[c])? as u32;
            let diff = if cat == 0 { 0 } else { from_mantissa(dec.decode_bits(cat)?, cat) };
            prev_dc += diff;
            q[0] = prev_dc;

            let mut k = 1;
            while k < N * N {
                let sym = dec.decode(&mut models.ac[ac_band(k)])?;
                if sym == EOB {
                    break;
                }
                let (run, size) = (sym >> 4, (sym & 0x0F) as u32);
                if size == 0 && sym != ZRL {
                    return Err(CodecError::Corrupt {
                        offset: base_offset + dec.position(),
                    });
                }
                k += run;
                if sym == ZRL {
                    k += 1;
                    continue;
                }
                if k >= N * N {
                    return Err(CodecError::Corrupt {
                        offset: base_offset + dec.position(),
                    });
                }
                q[ZIGZAG[k]] = from_mantissa(dec.decode_bits(size)?, size);
                k += 1;
            }
        }
    }
    Ok(Coefficients {
        blocks_x,
        blocks_y,
        values,
    })
}

/// Output of [`encode_with_stats`].
#[derive(Debug, Clone)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Information content of the payload under the adaptive models, in bits.
    pub information_bits: f64,
}

pub fn encode_with_stats(image: &ImagePlane, code: ScaleCode) -> Result<Encoded, CodecError> {
    let coeffs = quantize(image, code)?;
    let (payload, information_bits) = entropy_code(&coeffs)?;
    Ok(Encoded {
        bitstream: Bitstream {
            width: image.width() as u16,
            height: image.height() as u16,
            scale_code: code,
            payload,
        },
        information_bits,
    })
}

pub fn encode(image: &ImagePlane, code: ScaleCode) -> Result<Bitstream, CodecError> {
    Ok(encode_with_stats(image, code)?.bitstream)
}

/// Encodes at the scale the rate parameter maps to.
pub fn encode_at_rate(
    image: &ImagePlane,
    lambda: f64,
    rate: &RateControl,
) -> Result<Bitstream, CodecError> {
    encode(image, rate.scale_code_for(lambda)?)
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: ImagePlane,
    pub scale_code: ScaleCode,
    /// Rate parameter implied by the scale code, if it lies on the rate map.
    pub lambda: Option<f64>,
}

impl Decoded {
    pub fn scale(&self) -> f64 {
        self.scale_code.scale()
    }
}

pub fn decode_bitstream(bs: &Bitstream, rate: &RateControl) -> Result<Decoded, CodecError> {
    let (width, height) = (usize::from(bs.width), usize::from(bs.height));
    let (pw, ph) = padded_size(width, height);
    let coeffs = entropy_decode(&bs.payload, pw / N, ph / N, HEADER_LEN)?;
    Ok(Decoded {
        image: dequantize(&coeffs, bs.scale_code, width, height)?,
        scale_code: bs.scale_code,
        lambda: rate.lambda_for_code(bs.scale_code),
    })
}

pub fn decode(bytes: &[u8], rate: &RateControl) -> Result<Decoded, CodecError> {
    decode_bitstream(&Bitstream::from_bytes(bytes)?, rate)
}
