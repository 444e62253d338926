//! Flat `key = value` toolkit configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be one
//! of [`KEYS`]; keys not given keep their defaults.

use std::path::{Path, PathBuf};

use residiff_codec::RateControl;
use residiff_core::denoiser::{ModelConfig, TrainConfig};
use residiff_core::residual::DEFAULT_COVERAGE;
use residiff_core::sampler::{SamplerConfig, DEFAULT_PLAN_STEPS};
use residiff_core::ScheduleSpec;

use crate::UsageError;

pub const KEYS: &[&str] = &[
    "schedule.kind",
    "schedule.T",
    "schedule.beta1",
    "schedule.betaT",
    "schedule.L",
    "schedule.p",
    "codec.alpha_s",
    "codec.beta_s",
    "codec.lambda_min",
    "codec.lambda_max",
    "model.width",
    "model.seed",
    "train.lr",
    "train.batch_size",
    "train.steps",
    "train.lambda_perceptual",
    "train.weight_mode",
    "train.seed",
    "train.crop",
    "sampler.steps",
    "sampler.late_steps",
    "sampler.eta",
    "sampler.seed",
    "thresholds.coverage",
    "thresholds.points",
    "paths.corpus",
    "paths.checkpoint",
    "paths.thresholds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    /// Length of the respaced plan.
    pub steps: usize,
    /// Steps actually run when starting late; `None` runs the whole plan.
    pub late_steps: Option<usize>,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: DEFAULT_PLAN_STEPS,
            late_steps: None,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerSettings {
    pub fn build(&self, total: usize) -> residiff_core::Result<SamplerConfig> {
        let mut cfg = match self.late_steps {
            Some(k) => SamplerConfig::late_start(total, self.steps, k)?,
            None => SamplerConfig::full(total, self.steps)?,
        };
        cfg.eta_ddim = self.eta;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolkitConfig {
    pub schedule: ScheduleSpec,
    pub rate: RateControl,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub coverage: f64,
    pub threshold_points: usize,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            rate: RateControl::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerSettings::default(),
            coverage: DEFAULT_COVERAGE,
            threshold_points: 10,
            corpus: None,
            checkpoint: None,
            thresholds: None,
        }
    }
}

fn value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, UsageError> {
    v.parse()
        .map_err(|_| UsageError(format!("line {line}: invalid value '{v}' for {key}")))
}

impl ToolkitConfig {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let mut c = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {n}: expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(UsageError(format!("line {n}: unknown key '{k}'")));
            }
            if seen.contains(&k) {
                return Err(UsageError(format!("line {n}: duplicate key '{k}'")));
            }
            seen.push(k);
            match k {
                "schedule.kind" => {
                    c.schedule.kind = v.parse().map_err(|e| UsageError(format!("line {n}: {e}")))?
                }
                "schedule.T" => c.schedule.steps = value(n, k, v)?,
                "schedule.beta1" => c.schedule.beta_1 = value(n, k, v)?,
                "schedule.betaT" => c.schedule.beta_t = value(n, k, v)?,
                "schedule.L" => c.schedule.l = value(n, k, v)?,
                "schedule.p" => c.schedule.p = value(n, k, v)?,
                "codec.alpha_s" => c.rate.alpha_s = value(n, k, v)?,
                "codec.beta_s" => c.rate.beta_s = value(n, k, v)?,
                "codec.lambda_min" => c.rate.lambda_min = value(n, k, v)?,
                "codec.lambda_max" => c.rate.lambda_max = value(n, k, v)?,
                "model.width" => c.model.width = value(n, k, v)?,
                "model.seed" => c.model.seed = value(n, k, v)?,
                "train.lr" => c.train.lr = value(n, k, v)?,
                "train.batch_size" => c.train.batch_size = value(n, k, v)?,
                "train.steps" => c.train.steps = value(n, k, v)?,
                "train.lambda_perceptual" => c.train.lambda_perceptual = value(n, k, v)?,
                "train.weight_mode" => {
                    c.train.weight_mode = v.parse().map_err(|e| UsageError(format!("line {n}: {e}")))?
                }
                "train.seed" => c.train.seed = value(n, k, v)?,
                "train.crop" => c.train.crop = value(n, k, v)?,
                "sampler.steps" => c.sampler.steps = value(n, k, v)?,
                "sampler.late_steps" => {
                    let k: usize = value(n, k, v)?;
                    c.sampler.late_steps = (k > 0).then_some(k);
                }
                "sampler.eta" => c.sampler.eta = value(n, k, v)?,
                "sampler.seed" => c.sampler.seed = value(n, k, v)?,
                "thresholds.coverage" => c.coverage = value(n, k, v)?,
                "thresholds.points" => c.threshold_points = value(n, k, v)?,
                "paths.corpus" => c.corpus = Some(v.into()),
                "paths.checkpoint" => c.checkpoint = Some(v.into()),
                "paths.thresholds" => c.thresholds = Some(v.into()),
                _ => unreachable!("key list and match arms out of sync: {k}"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let wrap = |e: &dyn std::fmt::Display| UsageError(e.to_string());
        self.schedule.build().map_err(|e| wrap(&e))?;
        self.rate.validate().map_err(|e| wrap(&e))?;
        self.train.validate().map_err(|e| wrap(&e))?;
        if self.model.width == 0 || self.model.width % residiff_core::denoiser::network::GROUPS != 0 {
            return Err(UsageError(format!(
                "model.width must be a positive multiple of {}",
                residiff_core::denoiser::network::GROUPS
            )));
        }
        self.sampler.build(self.schedule.steps).map_err(|e| wrap(&e))?;
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(UsageError(format!("thresholds.coverage {} outside (0, 1)", self.coverage)));
        }
        if self.threshold_points == 0 {
            return Err(UsageError("thresholds.points must be at least 1".into()));
        }
        Ok(())
    }

    /// Renders every key, so the output parses back to the same config.
    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        let mut lines = vec![
            format!("schedule.kind = {}", s.kind),
            format!("schedule.T = {}", s.steps),
            format!("schedule.beta1 = {}", s.beta_1),
            format!("schedule.betaT = {}", s.beta_t),
            format!("schedule.L = {}", s.l),
            format!("schedule.p = {}", s.p),
            format!("codec.alpha_s = {}", self.rate.alpha_s),
            format!("codec.beta_s = {}", self.rate.beta_s),
            format!("codec.lambda_min = {}", self.rate.lambda_min),
            format!("codec.lambda_max = {}", self.rate.lambda_max),
            format!("model.width = {}", self.model.width),
            format!("model.seed = {}", self.model.seed),
            format!("train.lr = {}", self.train.lr),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.steps = {}", self.train.steps),
            format!("train.lambda_perceptual = {}", self.train.lambda_perceptual),
            format!("train.weight_mode = {}", self.train.weight_mode),
            format!("train.seed = {}", self.train.seed),
            format!("train.crop = {}", self.train.crop),
            format!("sampler.steps = {}", self.sampler.steps),
            format!("sampler.late_steps = {}", self.sampler.late_steps.unwrap_or(0)),
            format!("sampler.eta = {}", self.sampler.eta),
            format!("sampler.seed = {}", self.sampler.seed),
            format!("thresholds.coverage = {}", self.coverage),
            format!("thresholds.points = {}", self.threshold_points),
        ];
        for (k, p) in [
            ("paths.corpus", &self.corpus),
            ("paths.checkpoint", &self.checkpoint),
            ("paths.thresholds", &self.thresholds),
        ] {
            if let Some(p) = p {
                lines.push(format!("{k} = {}", p.display()));
            }
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ToolkitConfig::default();
        assert_eq!(ToolkitConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(ToolkitConfig::parse("").unwrap(), c);
    }

    #[test]
    fn values_are_applied() {
        let c = ToolkitConfig::parse(
            "# comment\ntrain.steps = 12\nsampler.late_steps = 20\ntrain.weight_mode = theoretical\n\
             schedule.kind = cosine\npaths.corpus = /tmp/x\n",
        )
        .unwrap();
        assert_eq!(c.train.steps, 12);
        assert_eq!(c.sampler.late_steps, Some(20));
        assert_eq!(c.train.weight_mode, residiff_core::WeightMode::Theoretical);
        assert_eq!(c.schedule.kind, residiff_core::ScheduleKind::Cosine);
        assert_eq!(c.corpus, Some(PathBuf::from("/tmp/x")));
        assert_eq!(ToolkitConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn strictness() {
        for bad in [
            "train.stepz = 3",
            "train.steps 3",
            "train.steps = three",
            "train.steps = 3\ntrain.steps = 4",
            "train.lr = -1",
            "model.width = 12",
            "sampler.late_steps = 500",
            "thresholds.coverage = 1.5",
            "schedule.kind = quadratic",
        ] {
            assert!(ToolkitConfig::parse(bad).is_err(), "{bad}");
        }
        let e = ToolkitConfig::parse("a = 1").unwrap_err();
        assert!(e.0.contains("unknown key 'a'"));
    }
}
