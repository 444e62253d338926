//! Batch construction, loss/gradient evaluation and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residiff_codec::codec::reconstruct;
use residiff_codec::image::CHANNELS;
use residiff_codec::{ImagePlane, RateControl};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{residual_loss, LossValue};
use super::network::{latent_scale, DenoiserModel, IN_CHANNELS};
use super::tape::{Gradients, Tape, Tensor};
use crate::diffusion::forward_sample;
use crate::error::{CoreError, Result};
use crate::field::ResidualField;
use crate::schedule::{NoiseSchedule, WeightMode};

/// DCT block size of the base codec; crops are aligned to it.
const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_perceptual: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
    /// Side of the square training crops.
    pub crop: usize,
    /// Abort when the loss stays above `divergence_factor` times the first
    /// loss for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            steps: 6000,
            lambda_perceptual: 0.001,
            weight_mode: WeightMode::Unit,
            seed: 0,
            crop: 32,
            divergence_factor: 10.0,
            divergence_patience: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be >= 1".into()));
        }
        if !(self.lambda_perceptual >= 0.0) {
            return Err(CoreError::Config("lambda_perceptual must be >= 0".into()));
        }
        if self.crop == 0 || self.crop % BLOCK != 0 {
            return Err(CoreError::Config(format!("crop {} must be a positive multiple of {BLOCK}", self.crop)));
        }
        Ok(())
    }
}

/// One training batch in `[N, 3, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub shape: [usize; 4],
    pub r0: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
    pub lambda: f64,
}

impl Batch {
    /// Builds `[N, 6, H, W]` network input `concat(r_t * latent_scale, x_tilde)`.
    pub fn network_input(&self, schedule: &NoiseSchedule) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        let item = c * h * w;
        let mut data = Vec::with_capacity(2 * n * item);
        for i in 0..n {
            let r0 = ResidualField::new([c, h, w], self.r0[i * item..(i + 1) * item].to_vec())?;
            let eps = ResidualField::new([c, h, w], self.eps[i * item..(i + 1) * item].to_vec())?;
            let rt = forward_sample(schedule, &r0, self.t[i], &eps)?;
            let scale = latent_scale(schedule, self.t[i]);
            data.extend(rt.data().iter().map(|v| v * scale));
            data.extend_from_slice(&self.x_tilde[i * item..(i + 1) * item]);
        }
        Ok(Tensor::new(vec![n, IN_CHANNELS, h, w], data))
    }
}

/// Draws a batch: one rate per batch, then per item a random image, a crop at
/// any pixel offset, an optional horizontal flip, a timestep and noise. Each
/// crop is coded on its own, so its block grid starts at the crop corner.
pub fn sample_batch(
    corpus: &[ImagePlane],
    schedule: &NoiseSchedule,
    rate: &RateControl,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(CoreError::Parameter("empty training corpus".into()));
    }
    let side = config.crop;
    let lambda = rate.sample_lambda(rng.random::<f64>())?;
    let code = rate.scale_code_for(lambda)?;
    let n = config.batch_size;
    let item = CHANNELS * side * side;
    let mut batch = Batch {
        shape: [n, CHANNELS, side, side],
        r0: Vec::with_capacity(n * item),
        x_tilde: Vec::with_capacity(n * item),
        t: Vec::with_capacity(n),
        eps: Vec::with_capacity(n * item),
        lambda,
    };
    for _ in 0..n {
        let img = &corpus[rng.random_range(0..corpus.len())];
        if img.width() < side || img.height() < side {
            return Err(CoreError::Parameter(format!(
                "image {}x{} smaller than crop {side}",
                img.width(),
                img.height()
            )));
        }
        let cx = rng.random_range(0..=img.width() - side);
        let cy = rng.random_range(0..=img.height() - side);
        let flip = rng.random::<bool>();
        let x = img.crop(cx, cy, side, side);
        let xt = reconstruct(&x, code)?;
        let (x, xt) = if flip { (x.flip_horizontal(), xt.flip_horizontal()) } else { (x, xt) };
        batch.r0.extend(x.data().iter().zip(xt.data()).map(|(a, b)| a - b));
        batch.x_tilde.extend_from_slice(xt.data());
        batch.t.push(rng.random_range(1..=schedule.steps()));
        batch
            .eps
            .extend_from_slice(ResidualField::standard_normal([CHANNELS, side, side], rng).data());
    }
    Ok(batch)
}

/// Loss of `model` on `batch` and the gradients of every trainable parameter.
pub fn loss_and_gradients(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    batch: &Batch,
    weight_mode: WeightMode,
    lambda_perceptual: f64,
) -> Result<(LossValue, Gradients)> {
    let weights = batch
        .t
        .iter()
        .map(|&t| schedule.loss_weight(t, weight_mode))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new(model.params());
    let out = model.forward(&mut tape, batch.network_input(schedule)?, &batch.t)?;
    let loss = residual_loss(tape.value(out), &batch.r0, batch.shape, &weights, lambda_perceptual);
    let grads = tape.backward(out, &loss.grad);
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
}

/// Trains `model`. Batches and updates are strictly
/// sequential, so a fixed seed gives a bitwise-reproducible loss trace.
pub fn train(
    mut model: DenoiserModel,
    corpus: &[ImagePlane],
    schedule: &NoiseSchedule,
    rate: &RateControl,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, &LossValue),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig {
        lr: config.lr,
        ..Default::default()
    };
    let mut state = AdamState::new(model.params());
    let mut losses = Vec::with_capacity(config.steps);
    let mut above = 0usize;
    for step in 0..config.steps {
        let batch = sample_batch(corpus, schedule, rate, config, &mut rng)?;
        let (loss, grads) = loss_and_gradients(&model, schedule, &batch, config.weight_mode, config.lambda_perceptual)?;
        if !loss.loss.is_finite() {
            return Err(CoreError::Training {
                step,
                reason: format!("non-finite loss {}", loss.loss),
            });
        }
        adam_step(model.params_mut(), &grads, &mut state, &adam).map_err(|e| match e {
            CoreError::Training { reason, .. } => CoreError::Training { step, reason },
            other => other,
        })?;
        losses.push(loss.loss);
        progress(step, &loss);
        if loss.loss > config.divergence_factor * losses[0] {
            above += 1;
            if above >= config.divergence_patience {
                return Err(CoreError::Training {
                    step,
                    reason: format!(
                        "diverged: loss above {}x the initial {} for {above} consecutive steps",
                        config.divergence_factor, losses[0]
                    ),
                });
            }
        } else {
            above = 0;
        }
    }
    Ok(TrainOutcome { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::network::ModelConfig;
    use crate::schedule::make_linear;
    use residiff_codec::synth::generate;

    fn setup() -> (Vec<ImagePlane>, NoiseSchedule, RateControl) {
        (generate(99, 2, 32), make_linear(1000, 1e-4, 0.02).unwrap(), RateControl::default())
    }

    #[test]
    fn batches_pair_crops_with_their_reconstructions() {
        let (corpus, sched, rate) = setup();
        let cfg = TrainConfig {
            batch_size: 3,
            crop: 16,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&corpus, &sched, &rate, &cfg, &mut rng).unwrap();
        assert_eq!(b.shape, [3, 3, 16, 16]);
        assert!(b.t.iter().all(|&t| (1..=1000).contains(&t)));
        assert!((rate.lambda_min..=rate.lambda_max).contains(&b.lambda));
        // Every x_tilde crop is the codec output for x = x_tilde + r0.
        let code = rate.scale_code_for(b.lambda).unwrap();
        let item = 3 * 16 * 16;
        for i in 0..3 {
            let x: Vec<f64> = (0..item).map(|j| b.x_tilde[i * item + j] + b.r0[i * item + j]).collect();
            let x = ImagePlane::from_clamped(16, 16, x).unwrap();
            let again = reconstruct(&x, code).unwrap();
            for (a, e) in again.data().iter().zip(&b.x_tilde[i * item..(i + 1) * item]) {
                assert!((a - e).abs() < 1e-9);
            }
        }
        let bad = TrainConfig { crop: 64, ..cfg };
        assert!(sample_batch(&corpus, &sched, &rate, &bad, &mut rng).is_err());
    }

    #[test]
    fn zero_model_gradients_vanish_below_the_head() {
        // With a zero output convolution every gradient except the head's is 0.
        let (corpus, sched, rate) = setup();
        let model = DenoiserModel::new(ModelConfig { width: 8, seed: 1 }).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            crop: 16,
            ..Default::default()
        };
        let b = sample_batch(&corpus, &sched, &rate, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (_, grads) = loss_and_gradients(&model, &sched, &b, WeightMode::Unit, 0.001).unwrap();
        for (e, g) in model.params().entries().iter().zip(&grads) {
            let Some(g) = g else { continue };
            let nonzero = g.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, e.name.starts_with("out.conv"), "{}", e.name);
        }
    }

    #[test]
    fn invalid_configs() {
        let base = TrainConfig::default();
        assert!(TrainConfig { lr: 0.0, ..base }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..base }.validate().is_err());
        assert!(TrainConfig { crop: 12, ..base }.validate().is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn short_runs_are_reproducible() {
        let (corpus, sched, rate) = setup();
        let cfg = TrainConfig {
            batch_size: 2,
            crop: 16,
            steps: 100,
            lr: 1e-3,
            seed: 4,
            ..Default::default()
        };
        let run = || {
            let model = DenoiserModel::new(ModelConfig { width: 8, seed: 3 }).unwrap();
            train(model, &corpus, &sched, &rate, &cfg, |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.model.params().all_finite());
    }

    #[test]
    fn divergence_is_detected() {
        let (corpus, sched, rate) = setup();
        // A zero factor counts every step as diverged.
        let cfg = TrainConfig {
            batch_size: 1,
            crop: 16,
            steps: 10,
            divergence_factor: 0.0,
            divergence_patience: 3,
            ..Default::default()
        };
        let model = DenoiserModel::new(ModelConfig { width: 8, seed: 3 }).unwrap();
        let err = train(model, &corpus, &sched, &rate, &cfg, |_, _| {}).unwrap_err();
        assert!(matches!(err, CoreError::Training { step: 2, .. }), "{err}");
    }
}
