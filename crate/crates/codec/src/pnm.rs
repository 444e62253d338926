//! Binary PPM (P6, 8-bit) I/O.
//!
//! Samples map affinely between `[0, 255]` and `[-1, 1]`:
//! `x = v / 127.5 - 1` on read and `v = round((x + 1) * 127.5)` on write.

use std::io::{Read, Write};

use crate::error::CodecError;
use crate::image::{ImagePlane, CHANNELS};

pub fn byte_to_unit(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

pub fn unit_to_byte(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Rounds every sample to the nearest 8-bit level.
pub fn quantize_to_8bit(image: &ImagePlane) -> ImagePlane {
    let data = image.data().iter().map(|&x| byte_to_unit(unit_to_byte(x))).collect();
    ImagePlane::from_clamped(image.width(), image.height(), data).expect("same shape")
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String, CodecError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CodecError::InvalidImage("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn parse_ppm(bytes: &[u8]) -> Result<ImagePlane, CodecError> {
    let mut pos = 0;
    if read_token(bytes, &mut pos)? != "P6" {
        return Err(CodecError::InvalidImage("not a binary PPM (P6)".into()));
    }
    let mut number = |what: &str| -> Result<usize, CodecError> {
        read_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| CodecError::InvalidImage(format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(CodecError::InvalidImage(format!("maxval {maxval}, only 255 is supported")));
    }
    pos += 1;
    let n = width * height;
    let pixels = bytes
        .get(pos..pos + n * CHANNELS)
        .ok_or_else(|| CodecError::InvalidImage("pixel data truncated".into()))?;
    let mut data = vec![0.0; n * CHANNELS];
    for (i, px) in pixels.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            data[c * n + i] = byte_to_unit(px[c]);
        }
    }
    ImagePlane::new(width, height, data)
}

pub fn to_ppm(image: &ImagePlane) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n = w * h;
    for i in 0..n {
        for c in 0..CHANNELS {
            out.push(unit_to_byte(image.data()[c * n + i]));
        }
    }
    out
}

pub fn read_ppm(mut reader: impl Read) -> Result<ImagePlane, CodecError> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| CodecError::InvalidImage(e.to_string()))?;
    parse_ppm(&bytes)
}

pub fn write_ppm(mut writer: impl Write, image: &ImagePlane) -> std::io::Result<()> {
    writer.write_all(&to_ppm(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_mapping_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(unit_to_byte(-1.0), 0);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(3.0), 255);
        for v in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        }
    }

    #[test]
    fn ppm_round_trip_with_comment() {
        let data: Vec<f64> = (0..3 * 6).map(|i| byte_to_unit((i * 13) as u8)).collect();
        let img = ImagePlane::new(3, 2, data).unwrap();
        let bytes = to_ppm(&img);
        assert_eq!(parse_ppm(&bytes).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&bytes[bytes.len() - 18..]);
        assert_eq!(parse_ppm(&commented).unwrap(), img);
        assert!(parse_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(parse_ppm(&bytes[..bytes.len() - 1]).is_err());
    }
}
