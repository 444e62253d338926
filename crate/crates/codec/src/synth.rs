//! Procedural image generator for the bundled desk-scale corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ImagePlane, CHANNELS};
use crate::pnm::quantize_to_8bit;

pub const CORPUS_SEED: u64 = 0x5EED_C0DE;
pub const EVAL_SEED: u64 = 0xE7A1_5EED;
pub const CORPUS_SIZE: usize = 32;
pub const EVAL_SIZE: usize = 8;
pub const IMAGE_SIDE: usize = 64;

/// The 32-image training corpus.
pub fn bundled_corpus() -> Vec<ImagePlane> {
    generate(CORPUS_SEED, CORPUS_SIZE, IMAGE_SIDE)
}

/// Held-out images drawn from the same generator with a different seed.
pub fn bundled_eval_set() -> Vec<ImagePlane> {
    generate(EVAL_SEED, EVAL_SIZE, IMAGE_SIDE)
}

/// `count` square images of side `side`, cycling through four content kinds
/// (gradient with shapes, multi-octave noise texture, oriented stripes, shapes
/// over texture). Every image carries fine grain and is rounded to 8 bits.
pub fn generate(seed: u64, count: usize, side: usize) -> Vec<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut canvas = Canvas::new(side);
            match i % 4 {
                0 => {
                    canvas.gradient(&mut rng);
                    canvas.shapes(&mut rng, 3);
                }
                1 => canvas.texture(&mut rng, 0.5),
                2 => canvas.stripes(&mut rng),
                _ => {
                    canvas.texture(&mut rng, 0.35);
                    canvas.shapes(&mut rng, 2);
                }
            }
            canvas.grain(&mut rng, 0.06);
            quantize_to_8bit(&canvas.finish())
        })
        .collect()
}

struct Canvas {
    side: usize,
    data: Vec<f64>,
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(-0.8..0.8))
}

impl Canvas {
    fn new(side: usize) -> Self {
        Self {
            side,
            data: vec![0.0; CHANNELS * side * side],
        }
    }

    fn at(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.side + y) * self.side + x]
    }

    fn gradient(&mut self, rng: &mut impl Rng) {
        let (a, b) = (color(rng), color(rng));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let n = self.side as f64;
        for y in 0..self.side {
            for x in 0..self.side {
                let t = 0.5 + ((x as f64 / n - 0.5) * dx + (y as f64 / n - 0.5) * dy);
                let t = t.clamp(0.0, 1.0);
                for c in 0..CHANNELS {
                    *self.at(c, y, x) = a[c] * (1.0 - t) + b[c] * t;
                }
            }
        }
    }

    fn shapes(&mut self, rng: &mut impl Rng, count: usize) {
        let n = self.side as f64;
        for _ in 0..count {
            let col = color(rng);
            let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let r = rng.random_range(0.12 * n..0.3 * n);
            let disc = rng.random_bool(0.5);
            for y in 0..self.side {
                for x in 0..self.side {
                    let (ddx, ddy) = (x as f64 - cx, y as f64 - cy);
                    let inside = if disc {
                        ddx * ddx + ddy * ddy < r * r
                    } else {
                        ddx.abs() < r && ddy.abs() < 0.6 * r
                    };
                    if inside {
                        for c in 0..CHANNELS {
                            *self.at(c, y, x) = col[c];
                        }
                    }
                }
            }
        }
    }

    fn texture(&mut self, rng: &mut impl Rng, amplitude: f64) {
        let base = color(rng);
        let tint = color(rng);
        let mut field = vec![0.0; self.side * self.side];
        let mut amp = 1.0;
        for cells in [4usize, 8, 16, 32] {
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let scale = cells as f64 / self.side as f64;
            for y in 0..self.side {
                for x in 0..self.side {
                    let (fx, fy) = (x as f64 * scale, y as f64 * scale);
                    let (ix, iy) = (fx as usize, fy as usize);
                    let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                    let l = |i: usize, j: usize| lattice[j * (cells + 1) + i];
                    let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                    let bottom = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                    field[y * self.side + x] += amp * (top * (1.0 - ty) + bottom * ty);
                }
            }
            amp *= 0.6;
        }
        for y in 0..self.side {
            for x in 0..self.side {
                let v = field[y * self.side + x] * amplitude;
                for c in 0..CHANNELS {
                    *self.at(c, y, x) = 0.5 * base[c] + v * (0.6 + 0.4 * tint[c]);
                }
            }
        }
    }

    fn stripes(&mut self, rng: &mut impl Rng) {
        let (a, b) = (color(rng), color(rng));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let freq = rng.random_range(0.15..0.9);
        let (dx, dy) = (angle.cos(), angle.sin());
        for y in 0..self.side {
            for x in 0..self.side {
                let t = 0.5 + 0.5 * ((x as f64 * dx + y as f64 * dy) * freq).sin();
                for c in 0..CHANNELS {
                    *self.at(c, y, x) = a[c] * (1.0 - t) + b[c] * t;
                }
            }
        }
    }

    fn grain(&mut self, rng: &mut impl Rng, amplitude: f64) {
        for v in &mut self.data {
            *v += rng.random_range(-amplitude..amplitude);
        }
    }

    fn finish(self) -> ImagePlane {
        ImagePlane::from_clamped(self.side, self.side, self.data).expect("valid canvas")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = bundled_corpus();
        assert_eq!(a.len(), CORPUS_SIZE);
        assert_eq!(a, bundled_corpus());
        assert!(a.iter().all(|im| im.width() == 64 && im.height() == 64));
        assert_ne!(a[..EVAL_SIZE], bundled_eval_set()[..]);
    }

    #[test]
    fn images_are_not_flat() {
        for im in bundled_corpus() {
            let mean = im.data().iter().sum::<f64>() / im.data().len() as f64;
            let var = im.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / im.data().len() as f64;
            assert!(var > 1e-3);
        }
    }
}
