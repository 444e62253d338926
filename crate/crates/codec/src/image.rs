//! Planar RGB images normalized to [-1, 1].

use crate::error::CodecError;

pub const CHANNELS: usize = 3;

/// Channel-major `3 x height x width` image with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, CodecError> {
        check_size(width, height)?;
        if data.len() != CHANNELS * width * height {
            return Err(CodecError::InvalidParameter(format!(
                "expected {} samples for {width}x{height}, got {}",
                CHANNELS * width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(CodecError::InvalidParameter(format!(
                "sample {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from arbitrary finite samples, clamping into [-1, 1].
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self, CodecError> {
        data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, CodecError> {
        Self::new(width, height, vec![value; CHANNELS * width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// Extracts a `width x height` window starting at (`x0`, `y0`).
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut data = Vec::with_capacity(CHANNELS * width * height);
        for c in 0..CHANNELS {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Replicate-pads on the right and bottom up to `width x height`.
    pub fn pad_replicate(&self, width: usize, height: usize) -> Self {
        assert!(width >= self.width && height >= self.height);
        let mut data = Vec::with_capacity(CHANNELS * width * height);
        for c in 0..CHANNELS {
            for y in 0..height {
                let sy = y.min(self.height - 1);
                let row = &self.data[(c * self.height + sy) * self.width..][..self.width];
                data.extend_from_slice(row);
                let last = row[self.width - 1];
                data.extend(std::iter::repeat_n(last, width - self.width));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }
}

pub(crate) fn check_size(width: usize, height: usize) -> Result<(), CodecError> {
    if width == 0 || height == 0 || width >= 1 << 16 || height >= 1 << 16 {
        return Err(CodecError::UnsupportedSize { width, height });
    }
    Ok(())
}
