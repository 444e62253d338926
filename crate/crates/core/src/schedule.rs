//! Diffusion noise schedules and respaced timestep plans.
//!
//! Timesteps are 1-based: `t = 1..=T`, with the convention `alpha_bar(0) = 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{CoreError, Result};

/// Lower clamp for discretized betas.
pub const BETA_MIN_CLAMP: f64 = 1e-8;
/// Upper clamp for discretized betas.
pub const BETA_MAX_CLAMP: f64 = 0.999;
/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Per-timestep quantities of a discrete forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - alpha_bar`, accumulated as `(1 - ab[t-1]) + ab[t-1] * beta[t]`
    /// so that small values keep full precision.
    one_minus_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from betas, validating `0 < beta < 1` and strict
    /// decrease of `alpha_bar`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(CoreError::Parameter(format!(
                "need at least 2 timesteps, got {}",
                beta.len()
            )));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(CoreError::Construction(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut one_minus = Vec::with_capacity(beta.len());
        let (mut ab, mut om) = (1.0, 0.0);
        for (a, b) in alpha.iter().zip(&beta) {
            om += ab * b;
            ab *= a;
            alpha_bar.push(ab);
            one_minus.push(om);
        }
        if let Some(i) = alpha_bar.windows(2).position(|w| !(w[1] < w[0])) {
            return Err(CoreError::Construction(format!(
                "alpha_bar not strictly decreasing at t = {}",
                i + 2
            )));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar: one_minus,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(CoreError::Parameter(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// # Panics
    /// If `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `1 - alpha_bar(t)`, exactly 0 at `t = 0`.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(eta_t, xi_t)` of the forward-process posterior mean
    /// `eta_t * r0 + xi_t * r_t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let denom = self.one_minus_alpha_bar(t);
        let eta = self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom;
        let xi = self.alpha(t).sqrt() * self.one_minus_alpha_bar(t - 1) / denom;
        Ok((eta, xi))
    }

    /// Forward-posterior variance `(1 - ab[t-1]) / (1 - ab[t]) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.one_minus_alpha_bar(t - 1) / self.one_minus_alpha_bar(t) * self.beta(t))
    }

    /// Per-timestep weight of the x0-prediction objective.
    ///
    /// `Theoretical` is `eta_t^2 / (2 sigma_t^2)` with `sigma_t^2` the posterior
    /// variance; at `t = 1` that variance is zero, so the value at `t = 2` is
    /// used instead.
    pub fn loss_weight(&self, t: usize, mode: WeightMode) -> Result<f64> {
        self.check(t)?;
        match mode {
            WeightMode::Unit => Ok(1.0),
            WeightMode::Theoretical => {
                let (eta, _) = self.posterior_coefficients(t)?;
                let var = self.posterior_variance(if t == 1 { 2 } else { t })?;
                Ok(eta * eta / (2.0 * var))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Unit,
    Theoretical,
}

impl FromStr for WeightMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Self::Unit),
            "theoretical" => Ok(Self::Theoretical),
            other => Err(CoreError::Parameter(format!("unknown weight mode '{other}'"))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unit => "unit",
            Self::Theoretical => "theoretical",
        })
    }
}

/// `beta_t = (T - t)/(T - 1) * beta_1 + (t - 1)/(T - 1) * beta_T`.
pub fn make_linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(CoreError::Parameter(format!("T = {steps} < 2")));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(CoreError::Parameter(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
        )));
    }
    let denom = (steps - 1) as f64;
    let beta = (1..=steps)
        .map(|t| {
            if t == 1 {
                beta_1
            } else if t == steps {
                beta_t
            } else {
                (steps - t) as f64 / denom * beta_1 + (t - 1) as f64 / denom * beta_t
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

fn betas_from_alpha_bar(steps: usize, alpha_bar: impl Fn(f64) -> f64) -> Vec<f64> {
    (1..=steps)
        .map(|i| {
            let prev = alpha_bar((i - 1) as f64 / steps as f64);
            let cur = alpha_bar(i as f64 / steps as f64);
            (1.0 - cur / prev).clamp(BETA_MIN_CLAMP, BETA_MAX_CLAMP)
        })
        .collect()
}

/// Squared-cosine schedule with offset [`COSINE_OFFSET`], betas clamped at 0.999.
pub fn make_cosine(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(CoreError::Parameter(format!("T = {steps} < 2")));
    }
    let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    NoiseSchedule::from_betas(betas_from_alpha_bar(steps, |u| f(u) / f0))
}

/// Continuous sigmoid-family `alpha_bar` at generalized time `u` in [0, 1]:
/// the logistic `1 / (1 + exp(2 L u^p - L))`, renormalized so that it equals
/// 1 at `u = 0` and 0 at `u = 1`.
pub fn sigmoid_alpha_bar(u: f64, l: f64, p: f64) -> f64 {
    let g = |u: f64| 1.0 / (1.0 + (2.0 * l * u.powf(p) - l).exp());
    let (g0, g1) = (g(0.0), g(1.0));
    (g(u) - g1) / (g0 - g1)
}

/// Sigmoid-family schedule discretized on `u_i = i / T`, with
/// `beta_i = 1 - ab(u_i) / ab(u_{i-1})` clamped into `[1e-8, 0.999]`.
pub fn make_sigmoid_family(steps: usize, l: f64, p: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(CoreError::Parameter(format!("T = {steps} < 2")));
    }
    if !(l > 0.0 && p > 0.0) {
        return Err(CoreError::Parameter(format!("need L > 0 and p > 0, got L = {l}, p = {p}")));
    }
    NoiseSchedule::from_betas(betas_from_alpha_bar(steps, |u| sigmoid_alpha_bar(u, l, p)))
}

/// Named (L, p) variants of the sigmoid family.
pub mod variants {
    pub const EARLY_DECAY: (f64, f64) = (5.0, 0.3);
    pub const LATE_DECAY: (f64, f64) = (1.0, 3.0);
    pub const SMOOTH_LATE_DECAY: (f64, f64) = (6.0, 3.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
    SigmoidFamily,
}

impl FromStr for ScheduleKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            "sigmoid_family" => Ok(Self::SigmoidFamily),
            other => Err(CoreError::Parameter(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
            Self::SigmoidFamily => "sigmoid_family",
        })
    }
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub l: f64,
    pub p: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_1: 1e-4,
            beta_t: 0.02,
            l: variants::LATE_DECAY.0,
            p: variants::LATE_DECAY.1,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => make_linear(self.steps, self.beta_1, self.beta_t),
            ScheduleKind::Cosine => make_cosine(self.steps),
            ScheduleKind::SigmoidFamily => make_sigmoid_family(self.steps, self.l, self.p),
        }
    }
}

/// Strictly decreasing timesteps used for sampling; the predecessor of the
/// last entry is 0 (data).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(CoreError::Parameter("empty timestep plan".into()));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) || *steps.last().unwrap() < 1 {
            return Err(CoreError::Parameter(format!("plan {steps:?} not strictly decreasing in [1, T]")));
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.steps
    }

    /// Timestep at plan position `i`.
    pub fn timestep(&self, i: usize) -> usize {
        self.steps[i]
    }

    /// Timestep that plan position `i` steps to (0 after the last entry).
    pub fn predecessor(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }

    /// Plan position whose timestep is `t`, if any.
    pub fn position_of(&self, t: usize) -> Option<usize> {
        self.steps.iter().position(|&s| s == t)
    }
}

/// Evenly respaces `n_steps` of `total` timesteps: stride `total / n_steps`,
/// index `round((k + 1) * stride)` for `k = 0..n_steps`, deduplicated, clipped
/// to `[1, total]` and returned in decreasing order.
pub fn respace(total: usize, n_steps: usize) -> Result<TimestepPlan> {
    if n_steps == 0 || n_steps > total {
        return Err(CoreError::Parameter(format!(
            "cannot respace {total} timesteps into {n_steps}"
        )));
    }
    let stride = total as f64 / n_steps as f64;
    let mut steps: Vec<usize> = (0..n_steps)
        .map(|k| (((k + 1) as f64 * stride).round() as usize).clamp(1, total))
        .collect();
    steps.dedup();
    steps.reverse();
    TimestepPlan::new(steps)
}
