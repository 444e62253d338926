//! Receiver-side enhancement: respaced DDIM sampling with late start, early
//! stopping and clipping of every intermediate prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use residiff_codec::image::CHANNELS;
use residiff_codec::ImagePlane;

use crate::denoiser::network::{DenoiserModel, SIZE_MULTIPLE};
use crate::diffusion::{ddim_step, ddim_sigma};
use crate::error::{CoreError, Result};
use crate::field::ResidualField;
use crate::residual::{apply_residual, clip_to, ThresholdTable};
use crate::schedule::{respace, NoiseSchedule, TimestepPlan};

/// Steps left to run after a default late start.
pub const DEFAULT_LATE_START_STEPS: usize = 20;
/// Length of the default respaced plan.
pub const DEFAULT_PLAN_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholding {
    /// Clip predictions to [-1, 1].
    Fixed,
    /// Clip to the rate-dependent range from a fitted table.
    Table(ThresholdTable),
    None,
}

impl Thresholding {
    /// Clipping bound for a rate, or `None` when predictions are not clipped.
    pub fn bound(&self, lambda: Option<f64>) -> Result<Option<f64>> {
        match self {
            Self::Fixed => Ok(Some(1.0)),
            Self::None => Ok(None),
            Self::Table(t) => {
                let lambda = lambda.ok_or_else(|| {
                    CoreError::Config("rate-dependent thresholds need the rate parameter of the stream".into())
                })?;
                Ok(Some(t.lookup(lambda)))
            }
        }
    }
}

/// Which part of a plan to run. Positions `start_index..stop_index` are
/// executed; `stop_index = plan.len()` runs to the end.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub plan: TimestepPlan,
    pub start_index: usize,
    pub stop_index: usize,
    pub eta_ddim: f64,
    pub thresholding: Thresholding,
    pub record_trajectory: bool,
    pub seed: u64,
}

impl SamplerConfig {
    /// Full run over an evenly respaced plan of `n_steps`.
    pub fn full(total: usize, n_steps: usize) -> Result<Self> {
        let plan = respace(total, n_steps)?;
        let len = plan.len();
        Ok(Self {
            plan,
            start_index: 0,
            stop_index: len,
            eta_ddim: 0.0,
            thresholding: Thresholding::Fixed,
            record_trajectory: false,
            seed: 0,
        })
    }

    /// Respaced plan of `n_steps` that starts late, with `remaining` steps left.
    pub fn late_start(total: usize, n_steps: usize, remaining: usize) -> Result<Self> {
        let mut cfg = Self::full(total, n_steps)?;
        if remaining == 0 || remaining > cfg.plan.len() {
            return Err(CoreError::Parameter(format!(
                "late start with {remaining} of {} steps",
                cfg.plan.len()
            )));
        }
        cfg.start_index = cfg.plan.len() - remaining;
        Ok(cfg)
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.plan.timestep(0) > schedule.steps() {
            return Err(CoreError::Config(format!(
                "plan starts at t = {} but the schedule has T = {}",
                self.plan.timestep(0),
                schedule.steps()
            )));
        }
        if !(self.start_index < self.stop_index && self.stop_index <= self.plan.len()) {
            return Err(CoreError::Config(format!(
                "need start_index < stop_index <= {}, got {}..{}",
                self.plan.len(),
                self.start_index,
                self.stop_index
            )));
        }
        if !(0.0..=1.0).contains(&self.eta_ddim) {
            return Err(CoreError::Config(format!("eta_ddim {} outside [0, 1]", self.eta_ddim)));
        }
        Ok(())
    }

    /// Number of executed plan steps.
    pub fn executed_steps(&self) -> usize {
        self.stop_index - self.start_index
    }
}

/// One executed step: the latent it started from and the (clipped) prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub plan_index: usize,
    pub t: usize,
    pub r_t: ResidualField,
    pub r0_pred: ResidualField,
}

impl TrajectoryStep {
    /// Update vector `u_t = r0'(t) - r_t`.
    pub fn update(&self) -> ResidualField {
        self.r0_pred
            .lincomb(1.0, &self.r_t, -1.0)
            .expect("trajectory fields share a shape")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub image: ImagePlane,
    pub residual: ResidualField,
    pub trajectory: Option<Trajectory>,
}

/// Scales unit Gaussian noise `z` to the forward-marginal standard deviation
/// `sqrt(1 - ab_t)` of zero-mean data.
pub fn scale_latent(schedule: &NoiseSchedule, t: usize, z: &ResidualField) -> Result<ResidualField> {
    if t == 0 || t > schedule.steps() {
        return Err(CoreError::Parameter(format!("timestep {t} outside [1, {}]", schedule.steps())));
    }
    Ok(z.scaled(schedule.one_minus_alpha_bar(t).sqrt()))
}

/// Latent for starting (possibly late) at timestep `t`.
pub fn late_start_latent(
    schedule: &NoiseSchedule,
    t: usize,
    shape: [usize; 3],
    rng: &mut impl Rng,
) -> Result<ResidualField> {
    scale_latent(schedule, t, &ResidualField::standard_normal(shape, rng))
}

fn padded_shape(x: &ImagePlane) -> (usize, usize) {
    let up = |v: usize| v.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    (up(x.width()), up(x.height()))
}

fn crop_field(f: &ResidualField, width: usize, height: usize) -> ResidualField {
    let [c, h, w] = f.shape();
    if (w, h) == (width, height) {
        return f.clone();
    }
    let mut data = Vec::with_capacity(c * width * height);
    for ch in 0..c {
        for y in 0..height {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&f.data()[row..row + width]);
        }
    }
    ResidualField::new([c, height, width], data).expect("cropped field is finite")
}

/// Enhances `x_tilde` starting from a given latent at plan position
/// `config.start_index`. Sizes that are not multiples of 4 are padded by
/// edge replication; the latent must have the padded shape.
pub fn enhance_from_latent(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    x_tilde: &ImagePlane,
    config: &SamplerConfig,
    lambda: Option<f64>,
    latent: ResidualField,
    rng: &mut ChaCha8Rng,
) -> Result<Enhanced> {
    config.validate(schedule)?;
    let bound = config.thresholding.bound(lambda)?;
    let (pw, ph) = padded_shape(x_tilde);
    let cond = ResidualField::from_image(&x_tilde.pad_replicate(pw, ph));
    latent.check_same_shape(&cond)?;
    let clip = |f: ResidualField| match bound {
        Some(tau) => clip_to(&f, tau),
        None => f,
    };
    let mut trajectory = config.record_trajectory.then(Trajectory::default);
    let mut r_t = latent;
    let mut pred = None;
    for i in config.start_index..config.stop_index {
        let t = config.plan.timestep(i);
        let r0_pred = clip(model.predict(schedule, &r_t, &cond, t)?);
        if i + 1 < config.stop_index {
            let t_prev = config.plan.predecessor(i);
            let z = (ddim_sigma(schedule, t, t_prev, config.eta_ddim) > 0.0)
                .then(|| ResidualField::standard_normal(r_t.shape(), rng));
            let next = ddim_step(schedule, &r_t, &r0_pred, t, t_prev, config.eta_ddim, z.as_ref())?;
            if let Some(tr) = trajectory.as_mut() {
                tr.steps.push(TrajectoryStep {
                    plan_index: i,
                    t,
                    r_t: std::mem::replace(&mut r_t, next),
                    r0_pred: r0_pred.clone(),
                });
            } else {
                r_t = next;
            }
        } else if let Some(tr) = trajectory.as_mut() {
            tr.steps.push(TrajectoryStep {
                plan_index: i,
                t,
                r_t: r_t.clone(),
                r0_pred: r0_pred.clone(),
            });
        }
        pred = Some(r0_pred);
    }
    let residual = crop_field(&pred.expect("at least one step"), x_tilde.width(), x_tilde.height());
    let image = apply_residual(x_tilde, &residual)?;
    if let Some(tr) = trajectory.as_mut() {
        for s in &mut tr.steps {
            s.r_t = crop_field(&s.r_t, x_tilde.width(), x_tilde.height());
            s.r0_pred = crop_field(&s.r0_pred, x_tilde.width(), x_tilde.height());
        }
    }
    Ok(Enhanced {
        image,
        residual,
        trajectory,
    })
}

/// Enhances one reconstruction with randomness drawn from `rng`: first the
/// starting latent, then any DDIM noise.
pub fn enhance_with_rng(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    x_tilde: &ImagePlane,
    config: &SamplerConfig,
    lambda: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Enhanced> {
    config.validate(schedule)?;
    let (pw, ph) = padded_shape(x_tilde);
    let t0 = config.plan.timestep(config.start_index);
    let latent = late_start_latent(schedule, t0, [CHANNELS, ph, pw], rng)?;
    enhance_from_latent(model, schedule, x_tilde, config, lambda, latent, rng)
}

/// Enhances one reconstruction using `config.seed`.
pub fn enhance(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    x_tilde: &ImagePlane,
    config: &SamplerConfig,
    lambda: Option<f64>,
) -> Result<Enhanced> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    enhance_with_rng(model, schedule, x_tilde, config, lambda, &mut rng)
}

/// Enhances several reconstructions in parallel. Item `i` uses stream `i` of
/// the generator seeded with `config.seed`, so results do not depend on
/// scheduling.
pub fn enhance_many(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    inputs: &[(ImagePlane, Option<f64>)],
    config: &SamplerConfig,
) -> Result<Vec<Enhanced>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, (x, lambda))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            enhance_with_rng(model, schedule, x, config, *lambda, &mut rng)
        })
        .collect()
}
