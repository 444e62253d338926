//! Dense `channels x height x width` arrays of residual-space values.

use residiff_codec::image::CHANNELS;
use residiff_codec::ImagePlane;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

/// A residual-space field: clean residuals `r0`, noisy latents `r_t`, model
/// predictions `r0'` or noise `eps`, depending on where it is used.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl ResidualField {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(CoreError::ShapeMismatch {
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Parameter("non-finite value in field".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn standard_normal(shape: [usize; 3], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn from_image(image: &ImagePlane) -> Self {
        Self {
            shape: [CHANNELS, image.height(), image.width()],
            data: image.data().to_vec(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                expected: self.shape.to_vec(),
                found: other.shape.to_vec(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }
}
