//! Rate control: log-space sampling of the rate parameter, the exponential
//! rate-to-scale map, and the 16-bit fixed-point scale code.

use crate::error::CodecError;

pub const LAMBDA_MIN: f64 = 0.0004;
pub const LAMBDA_MAX: f64 = 0.016;
/// Chosen so that the scale spans [0.25, 4] over [`LAMBDA_MIN`, `LAMBDA_MAX`].
pub const ALPHA_S: f64 = 89.506_900_876_321_14;
pub const BETA_S: f64 = 0.751_607_298_836_430_3;

/// Fixed-point denominator of [`ScaleCode`].
pub const SCALE_CODE_ONE: f64 = 1024.0;

/// Maps `lambda_prime` in [0, 1] to a rate parameter by interpolating
/// `log2(lambda)` between `log2(lambda_min)` and `log2(lambda_max)`.
pub fn sample_lambda(lambda_prime: f64, lambda_min: f64, lambda_max: f64) -> Result<f64, CodecError> {
    if !(0.0..=1.0).contains(&lambda_prime) {
        return Err(CodecError::InvalidParameter(format!(
            "lambda' = {lambda_prime} outside [0, 1]"
        )));
    }
    if !(lambda_min > 0.0 && lambda_min <= lambda_max) {
        return Err(CodecError::InvalidParameter(format!(
            "need 0 < lambda_min <= lambda_max, got {lambda_min}, {lambda_max}"
        )));
    }
    let (lo, hi) = (lambda_min.log2(), lambda_max.log2());
    let lambda = ((hi - lo) * lambda_prime + lo).exp2();
    Ok(lambda.clamp(lambda_min, lambda_max))
}

/// `s = alpha_s * exp(beta_s * ln(lambda))`.
pub fn rate_to_scale(lambda: f64, alpha_s: f64, beta_s: f64) -> Result<f64, CodecError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(CodecError::InvalidParameter(format!(
            "rate parameter must be positive, got {lambda}"
        )));
    }
    Ok(alpha_s * (beta_s * lambda.ln()).exp())
}

/// Quantization scale `s` stored as `round(s * 1024)` in 16 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScaleCode(u16);

impl ScaleCode {
    pub fn from_scale(scale: f64) -> Result<Self, CodecError> {
        let code = (scale * SCALE_CODE_ONE).round();
        if !(1.0..=f64::from(u16::MAX)).contains(&code) {
            return Err(CodecError::InvalidParameter(format!(
                "scale {scale} not representable as a 16-bit code"
            )));
        }
        Ok(Self(code as u16))
    }

    pub fn from_raw(raw: u16) -> Result<Self, CodecError> {
        if raw == 0 {
            return Err(CodecError::InvalidParameter("scale code 0".into()));
        }
        Ok(Self(raw))
    }

    /// Finest representable quantization.
    pub fn max_quality() -> Self {
        Self(u16::MAX)
    }

    pub fn raw(self) -> u16 {
        self.0
    }

    pub fn scale(self) -> f64 {
        f64::from(self.0) / SCALE_CODE_ONE
    }
}

/// Rate-control constants shared by sender and receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateControl {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub alpha_s: f64,
    pub beta_s: f64,
}

impl Default for RateControl {
    fn default() -> Self {
        Self {
            lambda_min: LAMBDA_MIN,
            lambda_max: LAMBDA_MAX,
            alpha_s: ALPHA_S,
            beta_s: BETA_S,
        }
    }
}

impl RateControl {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return Err(CodecError::InvalidParameter(format!(
                "need 0 < lambda_min <= lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.alpha_s > 0.0) || !self.beta_s.is_finite() {
            return Err(CodecError::InvalidParameter(format!(
                "invalid scale map alpha_s = {}, beta_s = {}",
                self.alpha_s, self.beta_s
            )));
        }
        Ok(())
    }

    pub fn sample_lambda(&self, lambda_prime: f64) -> Result<f64, CodecError> {
        sample_lambda(lambda_prime, self.lambda_min, self.lambda_max)
    }

    pub fn scale_for(&self, lambda: f64) -> Result<f64, CodecError> {
        if !(self.lambda_min..=self.lambda_max).contains(&lambda) {
            return Err(CodecError::InvalidParameter(format!(
                "rate parameter {lambda} outside [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        rate_to_scale(lambda, self.alpha_s, self.beta_s)
    }

    pub fn scale_code_for(&self, lambda: f64) -> Result<ScaleCode, CodecError> {
        ScaleCode::from_scale(self.scale_for(lambda)?)
    }

    /// Recovers the rate parameter a received scale code was produced from.
    ///
    /// Returns `None` when the code lies outside the codes reachable from
    /// `[lambda_min, lambda_max]`, e.g. for streams encoded at an explicit scale.
    pub fn lambda_for_code(&self, code: ScaleCode) -> Option<f64> {
        let lo = self.scale_code_for(self.lambda_min).ok()?;
        let hi = self.scale_code_for(self.lambda_max).ok()?;
        if code < lo || code > hi || self.beta_s == 0.0 {
            return None;
        }
        let lambda = ((code.scale() / self.alpha_s).ln() / self.beta_s).exp();
        Some(lambda.clamp(self.lambda_min, self.lambda_max))
    }

    /// Evenly spaced grid in `lambda'`, mapped to rate parameters.
    pub fn lambda_grid(&self, points: usize) -> Vec<f64> {
        (0..points)
            .map(|i| {
                let lp = if points == 1 { 0.5 } else { i as f64 / (points - 1) as f64 };
                self.sample_lambda(lp).expect("grid point inside [0, 1]")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_endpoints_and_midpoint() {
        assert!((sample_lambda(0.0, LAMBDA_MIN, LAMBDA_MAX).unwrap() - 0.0004).abs() < 1e-15);
        assert!((sample_lambda(1.0, LAMBDA_MIN, LAMBDA_MAX).unwrap() - 0.016).abs() < 1e-15);
        let mid = sample_lambda(0.5, LAMBDA_MIN, LAMBDA_MAX).unwrap();
        assert!((mid - (LAMBDA_MIN * LAMBDA_MAX).sqrt()).abs() < 1e-15);
        assert!((mid - 0.002_529_822_128_134_703_5).abs() < 1e-15);
        assert!(sample_lambda(1.01, LAMBDA_MIN, LAMBDA_MAX).is_err());
        assert!(sample_lambda(-0.1, LAMBDA_MIN, LAMBDA_MAX).is_err());
    }

    #[test]
    fn scale_map_special_cases() {
        for &l in &[1e-4, 0.3, 7.0] {
            assert_eq!(rate_to_scale(l, 1.0, 0.0).unwrap(), 1.0);
            assert!((rate_to_scale(l, 1.0, 1.0).unwrap() - l).abs() < 1e-15 * l.max(1.0));
        }
        assert!(rate_to_scale(0.0, 1.0, 1.0).is_err());
        assert!(rate_to_scale(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn default_scale_map_golden_values() {
        let rc = RateControl::default();
        assert!((rc.scale_for(LAMBDA_MAX).unwrap() - 4.0).abs() < 1e-12);
        assert!((rc.scale_for(LAMBDA_MIN).unwrap() - 0.25).abs() < 1e-12);
        assert!((rc.scale_for(rc.sample_lambda(0.5).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rc.scale_code_for(LAMBDA_MIN).unwrap().raw(), 256);
        assert_eq!(rc.scale_code_for(LAMBDA_MAX).unwrap().raw(), 4096);
    }

    #[test]
    fn lambda_recovered_from_scale_code() {
        let rc = RateControl::default();
        for lambda in rc.lambda_grid(20) {
            let code = rc.scale_code_for(lambda).unwrap();
            let back = rc.lambda_for_code(code).unwrap();
            assert!((back - lambda).abs() / lambda < 0.01, "{lambda} -> {back}");
        }
        assert_eq!(rc.lambda_for_code(ScaleCode::max_quality()), None);
        assert_eq!(rc.lambda_for_code(ScaleCode::from_raw(10).unwrap()), None);
    }
}
