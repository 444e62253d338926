//! Central finite-difference check of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::DenoiserModel;
use super::train::{loss_and_gradients, Batch};
use crate::error::Result;
use crate::schedule::{NoiseSchedule, WeightMode};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients with `(L(p + h) - L(p - h)) / 2h` on `count`
/// trainable scalars drawn uniformly with `seed`.
pub fn finite_difference_check(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    batch: &Batch,
    weight_mode: WeightMode,
    lambda_perceptual: f64,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(model, schedule, batch, weight_mode, lambda_perceptual)?;
    let mut index = Vec::new();
    for (pid, e) in model.params().entries().iter().enumerate() {
        if e.trainable {
            index.extend((0..e.tensor.len()).map(|j| (pid, j)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, index.len(), count.min(index.len()));
    let mut probe = model.clone();
    let mut samples = Vec::with_capacity(picks.len());
    for k in picks.iter() {
        let (pid, j) = index[k];
        let original = probe.params().get(pid).data[j];
        let mut eval = |v: f64| -> Result<f64> {
            probe.params_mut().entries_mut()[pid].tensor.data[j] = v;
            Ok(loss_and_gradients(&probe, schedule, batch, weight_mode, lambda_perceptual)?.0.loss)
        };
        let numeric = (eval(original + h)? - eval(original - h)?) / (2.0 * h);
        eval(original)?;
        let analytic = grads[pid].as_ref().expect("trainable entry has a gradient")[j];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        samples.push(GradSample {
            param: model.params().entries()[pid].name.clone(),
            index: j,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport { samples })
}
