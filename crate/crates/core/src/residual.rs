//! Residual extraction, residual statistics and rate-dependent thresholds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use residiff_codec::codec::reconstruct;
use residiff_codec::image::CHANNELS;
use residiff_codec::{ImagePlane, RateControl};

use crate::error::{CoreError, Result};
use crate::field::ResidualField;

/// Default fraction of residual values a threshold must cover.
pub const DEFAULT_COVERAGE: f64 = 0.95;
/// Smallest threshold ever stored.
pub const TAU_MIN: f64 = 1e-3;
/// Minimum number of residual values per rate when fitting.
pub const MIN_SAMPLES: usize = 10_000;

/// `r0 = x - x_tilde`.
pub fn compute_residual(x: &ImagePlane, x_tilde: &ImagePlane) -> Result<ResidualField> {
    if (x.width(), x.height()) != (x_tilde.width(), x_tilde.height()) {
        return Err(CoreError::ShapeMismatch {
            expected: vec![CHANNELS, x.height(), x.width()],
            found: vec![CHANNELS, x_tilde.height(), x_tilde.width()],
        });
    }
    let data = x.data().iter().zip(x_tilde.data()).map(|(a, b)| a - b).collect();
    ResidualField::new([CHANNELS, x.height(), x.width()], data)
}

/// `x_tilde + r`, clamped into [-1, 1].
pub fn apply_residual(x_tilde: &ImagePlane, r: &ResidualField) -> Result<ImagePlane> {
    let shape = [CHANNELS, x_tilde.height(), x_tilde.width()];
    if r.shape() != shape {
        return Err(CoreError::ShapeMismatch {
            expected: shape.to_vec(),
            found: r.shape().to_vec(),
        });
    }
    let data = x_tilde.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
    Ok(ImagePlane::from_clamped(x_tilde.width(), x_tilde.height(), data)?)
}

/// Smallest `tau` (from the sample) with `fraction(|r| <= tau) >= coverage`.
/// `abs_values` is sorted in place.
pub fn coverage_quantile(abs_values: &mut [f64], coverage: f64) -> f64 {
    abs_values.sort_unstable_by(f64::total_cmp);
    let k = ((coverage * abs_values.len() as f64).ceil() as usize).clamp(1, abs_values.len());
    abs_values[k - 1]
}

/// Per-rate symmetric clipping bounds, sorted by increasing rate parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    entries: Vec<(f64, f64)>,
    coverage: f64,
    /// Thresholds as measured, before the monotone correction.
    raw_taus: Vec<f64>,
}

impl ThresholdTable {
    pub fn new(entries: Vec<(f64, f64)>, coverage: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(CoreError::ThresholdTable("empty table".into()));
        }
        if !(coverage > 0.0 && coverage < 1.0) {
            return Err(CoreError::ThresholdTable(format!("coverage {coverage} outside (0, 1)")));
        }
        if entries.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(CoreError::ThresholdTable("lambda entries not strictly increasing".into()));
        }
        if entries.iter().any(|&(l, tau)| !(l > 0.0) || !(tau > 0.0 && tau <= 1.0)) {
            return Err(CoreError::ThresholdTable("need lambda > 0 and 0 < tau <= 1".into()));
        }
        if entries.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(CoreError::ThresholdTable("tau increases with lambda".into()));
        }
        let raw_taus = entries.iter().map(|e| e.1).collect();
        Ok(Self {
            entries,
            coverage,
            raw_taus,
        })
    }

    /// Builds a table from measured thresholds, clamping each into
    /// `[TAU_MIN, 1]` and lifting any threshold that is smaller than one at a
    /// higher rate (the least non-increasing upper envelope).
    pub fn from_measured(lambdas: &[f64], taus: &[f64], coverage: f64) -> Result<Self> {
        if lambdas.len() != taus.len() {
            return Err(CoreError::ThresholdTable("lambda and tau counts differ".into()));
        }
        let raw: Vec<f64> = taus.iter().map(|t| t.clamp(TAU_MIN, 1.0)).collect();
        let mut fixed = raw.clone();
        for i in (0..fixed.len().saturating_sub(1)).rev() {
            fixed[i] = fixed[i].max(fixed[i + 1]);
        }
        let mut table = Self::new(lambdas.iter().copied().zip(fixed).collect(), coverage)?;
        table.raw_taus = raw;
        Ok(table)
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn raw_taus(&self) -> &[f64] {
        &self.raw_taus
    }

    /// Whether the monotone correction changed any measured threshold.
    pub fn was_corrected(&self) -> bool {
        self.entries.iter().zip(&self.raw_taus).any(|(e, r)| e.1 != *r)
    }

    /// Threshold of the entry nearest to `lambda`; ties go to the smaller lambda.
    pub fn lookup(&self, lambda: f64) -> f64 {
        let mut best = self.entries[0];
        for &e in &self.entries[1..] {
            if (e.0 - lambda).abs() < (best.0 - lambda).abs() {
                best = e;
            }
        }
        best.1
    }

    /// Text form: a `# coverage <c>` header and one `lambda tau` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("# coverage {}\n", self.coverage);
        for (l, t) in &self.entries {
            let _ = writeln!(out, "{l:e} {t:e}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut coverage = DEFAULT_COVERAGE;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("coverage") {
                    coverage = v.trim().parse().map_err(|_| {
                        CoreError::ThresholdTable(format!("line {}: bad coverage", n + 1))
                    })?;
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut num = || -> Result<f64> {
                parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| CoreError::ThresholdTable(format!("line {}: expected 'lambda tau'", n + 1)))
            };
            let (l, t) = (num()?, num()?);
            if parts.next().is_some() {
                return Err(CoreError::ThresholdTable(format!("line {}: trailing fields", n + 1)));
            }
            entries.push((l, t));
        }
        Self::new(entries, coverage)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Residuals of base-codec reconstructions of `corpus` at rate `lambda`.
pub fn corpus_residuals(corpus: &[ImagePlane], lambda: f64, rate: &RateControl) -> Result<Vec<ResidualField>> {
    let code = rate.scale_code_for(lambda)?;
    corpus
        .iter()
        .map(|x| compute_residual(x, &reconstruct(x, code)?))
        .collect()
}

/// Outcome of fitting, with the measured coverage of each final threshold.
#[derive(Debug, Clone)]
pub struct ThresholdFit {
    pub table: ThresholdTable,
    pub achieved_coverage: Vec<f64>,
    pub samples: usize,
}

/// Fits a pooled symmetric threshold per rate parameter in `lambda_grid`.
///
/// Rates are processed in parallel; each rate is independent so results do
/// not depend on scheduling.
pub fn fit_threshold_table(
    corpus: &[ImagePlane],
    lambda_grid: &[f64],
    coverage: f64,
    rate: &RateControl,
) -> Result<ThresholdFit> {
    if lambda_grid.is_empty() {
        return Err(CoreError::Parameter("empty lambda grid".into()));
    }
    let per_rate: Vec<Vec<f64>> = lambda_grid
        .par_iter()
        .map(|&lambda| {
            let fields = corpus_residuals(corpus, lambda, rate)?;
            let abs: Vec<f64> = fields.iter().flat_map(|f| f.data().iter().map(|v| v.abs())).collect();
            if abs.len() < MIN_SAMPLES {
                return Err(CoreError::InsufficientSamples {
                    lambda,
                    found: abs.len(),
                    required: MIN_SAMPLES,
                });
            }
            Ok(abs)
        })
        .collect::<Result<_>>()?;
    let mut taus = Vec::with_capacity(per_rate.len());
    let mut sorted = Vec::with_capacity(per_rate.len());
    for mut abs in per_rate {
        taus.push(coverage_quantile(&mut abs, coverage));
        sorted.push(abs);
    }
    let table = ThresholdTable::from_measured(lambda_grid, &taus, coverage)?;
    let achieved_coverage = sorted
        .iter()
        .zip(table.entries())
        .map(|(abs, &(_, tau))| abs.partition_point(|&v| v <= tau) as f64 / abs.len() as f64)
        .collect();
    Ok(ThresholdFit {
        table,
        achieved_coverage,
        samples: sorted[0].len(),
    })
}

/// Clamps every element into `[-tau, tau]`, with `tau` from `table` at
/// `lambda`, or 1 without a table. Values inside the range are untouched.
pub fn clip_prediction(r0_pred: &ResidualField, lambda: f64, table: Option<&ThresholdTable>) -> ResidualField {
    let tau = table.map_or(1.0, |t| t.lookup(lambda));
    clip_to(r0_pred, tau)
}

pub fn clip_to(field: &ResidualField, tau: f64) -> ResidualField {
    let mut out = field.clone();
    for v in out.data_mut() {
        *v = v.clamp(-tau, tau);
    }
    out
}

/// Per-channel histogram of residual values on [-1, 1] with running moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHistogram {
    pub edges: Vec<f64>,
    /// `counts[c][b]`; values outside [-1, 1] land in the end bins.
    pub counts: Vec<Vec<u64>>,
    moments: Vec<[f64; 5]>,
}

impl ResidualHistogram {
    pub fn new(bins: usize) -> Self {
        let bins = bins.max(1);
        Self {
            edges: (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect(),
            counts: vec![vec![0; bins]; CHANNELS],
            moments: vec![[0.0; 5]; CHANNELS],
        }
    }

    pub fn add(&mut self, field: &ResidualField) {
        let [c, h, w] = field.shape();
        let bins = self.edges.len() - 1;
        for ch in 0..c.min(CHANNELS) {
            for &v in &field.data()[ch * h * w..(ch + 1) * h * w] {
                let b = (((v + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
                self.counts[ch][b] += 1;
                let m = &mut self.moments[ch];
                m[0] += 1.0;
                m[1] += v;
                m[2] += v * v;
                m[3] += v * v * v;
                m[4] += v * v * v * v;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Excess kurtosis of one channel (0 for a Gaussian); NaN when empty or constant.
    pub fn excess_kurtosis(&self, channel: usize) -> f64 {
        let [n, s1, s2, s3, s4] = self.moments[channel];
        let mean = s1 / n;
        let var = s2 / n - mean * mean;
        let m4 = s4 / n - 4.0 * mean * s3 / n + 6.0 * mean * mean * s2 / n - 3.0 * mean.powi(4);
        m4 / (var * var) - 3.0
    }
}
