//! Forward marginals, posterior means and the DDIM update over residual fields.

use crate::error::{CoreError, Result};
use crate::field::ResidualField;
use crate::schedule::NoiseSchedule;

fn check_t(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(CoreError::Parameter(format!(
            "timestep {t} outside [1, {}]",
            schedule.steps()
        )));
    }
    Ok(())
}

/// `r_t = sqrt(ab_t) r0 + sqrt(1 - ab_t) eps`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    r0: &ResidualField,
    t: usize,
    eps: &ResidualField,
) -> Result<ResidualField> {
    check_t(schedule, t)?;
    r0.lincomb(
        schedule.alpha_bar(t).sqrt(),
        eps,
        schedule.one_minus_alpha_bar(t).sqrt(),
    )
}

/// Mean of `q(r_{t-1} | r_t, r0)`.
pub fn posterior_mean(
    schedule: &NoiseSchedule,
    r_t: &ResidualField,
    r0: &ResidualField,
    t: usize,
) -> Result<ResidualField> {
    let (eta, xi) = schedule.posterior_coefficients(t)?;
    r0.lincomb(eta, r_t, xi)
}

/// Noise implied by a latent and an x0-style prediction:
/// `(r_t - sqrt(ab_t) r0') / sqrt(1 - ab_t)`.
pub fn implied_noise(
    schedule: &NoiseSchedule,
    r_t: &ResidualField,
    r0_pred: &ResidualField,
    t: usize,
) -> Result<ResidualField> {
    check_t(schedule, t)?;
    let inv = 1.0 / schedule.one_minus_alpha_bar(t).sqrt();
    r_t.lincomb(inv, r0_pred, -schedule.alpha_bar(t).sqrt() * inv)
}

/// Standard deviation of the injected noise in a DDIM step from `t` to `t_prev`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta_ddim: f64) -> f64 {
    if eta_ddim == 0.0 {
        return 0.0;
    }
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    eta_ddim
        * (schedule.one_minus_alpha_bar(t_prev) / schedule.one_minus_alpha_bar(t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt()
}

/// One DDIM update from `t` to `t_prev < t`.
///
/// `z` is required when `eta_ddim > 0` and ignored otherwise. With
/// `t_prev = 0` the result is `r0'` exactly.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    r_t: &ResidualField,
    r0_pred: &ResidualField,
    t: usize,
    t_prev: usize,
    eta_ddim: f64,
    z: Option<&ResidualField>,
) -> Result<ResidualField> {
    check_t(schedule, t)?;
    if t_prev >= t {
        return Err(CoreError::Parameter(format!("t_prev = {t_prev} not below t = {t}")));
    }
    if !(0.0..=1.0).contains(&eta_ddim) {
        return Err(CoreError::Parameter(format!("eta_ddim = {eta_ddim} outside [0, 1]")));
    }
    r_t.check_same_shape(r0_pred)?;
    if t_prev == 0 {
        return Ok(r0_pred.clone());
    }
    let eps = implied_noise(schedule, r_t, r0_pred, t)?;
    let sigma = ddim_sigma(schedule, t, t_prev, eta_ddim);
    let dir = (schedule.one_minus_alpha_bar(t_prev) - sigma * sigma).max(0.0).sqrt();
    let mut out = r0_pred.lincomb(schedule.alpha_bar(t_prev).sqrt(), &eps, dir)?;
    if sigma > 0.0 {
        let z = z.ok_or_else(|| CoreError::Parameter("eta_ddim > 0 requires noise z".into()))?;
        out.check_same_shape(z)?;
        for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(v: &[f64]) -> ResidualField {
        ResidualField::new([1, 1, v.len()], v.to_vec()).unwrap()
    }

    fn default_schedule() -> NoiseSchedule {
        make_linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn forward_sample_degenerate_inputs() {
        let s = default_schedule();
        let r0 = field(&[0.5, -0.25, 1.0]);
        let out = forward_sample(&s, &r0, 300, &ResidualField::zeros(r0.shape())).unwrap();
        let k = s.alpha_bar(300).sqrt();
        assert_eq!(out.data(), &[0.5 * k, -0.25 * k, k]);
        let e = ResidualField::filled([1, 1, 3], 1.0);
        let out = forward_sample(&s, &ResidualField::zeros(e.shape()), 300, &e).unwrap();
        assert!(out.data().iter().all(|&v| v == s.one_minus_alpha_bar(300).sqrt()));
        assert!(forward_sample(&s, &r0, 0, &e).is_err());
        assert!(forward_sample(&s, &field(&[1.0]), 5, &e).is_err());
    }

    #[test]
    fn forward_sample_monte_carlo_moments() {
        let s = default_schedule();
        let t = 400;
        let r0 = field(&[0.7, -0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = ResidualField::standard_normal(r0.shape(), &mut rng);
            let x = forward_sample(&s, &r0, t, &eps).unwrap();
            for i in 0..2 {
                sums[i] += x.data()[i];
                sq[i] += x.data()[i] * x.data()[i];
            }
        }
        let var = s.one_minus_alpha_bar(t);
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let emp_var = sq[i] / n as f64 - mean * mean;
            let target = s.alpha_bar(t).sqrt() * r0.data()[i];
            assert!((mean - target).abs() < 3.0 * (var / n as f64).sqrt());
            // Standard error of a Gaussian sample variance: var * sqrt(2 / n).
            assert!((emp_var - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn posterior_mean_cases() {
        let s = default_schedule();
        let r0 = field(&[0.1, 0.2]);
        let rt = field(&[3.0, -4.0]);
        assert_eq!(posterior_mean(&s, &rt, &r0, 1).unwrap(), r0);
        let v = field(&[0.4, -0.9]);
        let (eta, xi) = s.posterior_coefficients(250).unwrap();
        let m = posterior_mean(&s, &v, &v, 250).unwrap();
        for (a, b) in m.data().iter().zip(v.data()) {
            assert!((a - (eta + xi) * b).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_mean_matches_scalar_loop() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r0 = ResidualField::standard_normal([3, 4, 4], &mut rng);
        let rt = ResidualField::standard_normal([3, 4, 4], &mut rng);
        let t = 500;
        let beta = |k: usize| (1000 - k) as f64 / 999.0 * 1e-4 + (k - 1) as f64 / 999.0 * 0.02;
        let mut ab = vec![1.0];
        for k in 1..=1000 {
            ab.push(ab[k - 1] * (1.0 - beta(k)));
        }
        let m = posterior_mean(&s, &rt, &r0, t).unwrap();
        for i in 0..r0.len() {
            let eta = ab[t - 1].sqrt() * beta(t) / (1.0 - ab[t]);
            let xi = (1.0 - beta(t)).sqrt() * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
            let expected = eta * r0.data()[i] + xi * rt.data()[i];
            assert!((m.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn implied_noise_cases() {
        let s = default_schedule();
        let r0 = field(&[0.3, -0.6, 0.9]);
        let eps = field(&[1.5, 0.2, -2.0]);
        let rt = forward_sample(&s, &r0, 700, &eps).unwrap();
        let back = implied_noise(&s, &rt, &r0, 700).unwrap();
        for (a, b) in back.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let pred = rt.scaled(1.0 / s.alpha_bar(700).sqrt());
        assert!(implied_noise(&s, &rt, &pred, 700).unwrap().norm() < 1e-12);
        assert!(implied_noise(&s, &rt, &r0, 0).is_err());
    }

    #[test]
    fn implied_noise_golden() {
        // ab_500 = 0.07858724288177821; (0.3 - sqrt(ab) * -0.2) / sqrt(1 - ab).
        let s = default_schedule();
        let e = implied_noise(&s, &field(&[0.3]), &field(&[-0.2]), 500).unwrap();
        assert!((e.data()[0] - 0.370_940_634_803_829_55).abs() < 1e-12);
    }

    #[test]
    fn ddim_endpoint_cases() {
        let s = default_schedule();
        let rt = field(&[2.0, -1.0]);
        let pred = field(&[0.25, 0.5]);
        assert_eq!(ddim_step(&s, &rt, &pred, 40, 0, 0.0, None).unwrap(), pred);
        // eps' = 0 when r_t = sqrt(ab_t) r0'.
        let rt0 = pred.scaled(s.alpha_bar(40).sqrt());
        let out = ddim_step(&s, &rt0, &pred, 40, 30, 0.0, None).unwrap();
        for (a, b) in out.data().iter().zip(pred.data()) {
            assert!((a - s.alpha_bar(30).sqrt() * b).abs() < 1e-15);
        }
        assert!(ddim_step(&s, &rt, &pred, 40, 40, 0.0, None).is_err());
        assert!(ddim_step(&s, &rt, &pred, 40, 20, 1.5, None).is_err());
        assert!(ddim_step(&s, &rt, &pred, 40, 20, 0.5, None).is_err());
    }

    #[test]
    fn ddim_chain_golden() {
        // T = 10 chain with predictor r0' = r_t / 2, from a scalar reference loop.
        let s = make_linear(10, 0.05, 0.3).unwrap();
        let mut r = field(&[1.0, -0.5, 0.25]);
        let golden: [[f64; 3]; 10] = [
            [1.007_713_420_958_134_9, -0.503_856_710_479_067_4, 0.251_928_355_239_533_7],
            [1.009_146_439_792_317, -0.504_573_219_896_158_6, 0.252_286_609_948_079_3],
            [1.001_986_989_633_555, -0.500_993_494_816_777_5, 0.250_496_747_408_388_73],
            [0.983_816_633_811_460_7, -0.491_908_316_905_730_34, 0.245_954_158_452_865_17],
            [0.952_129_636_727_944_4, -0.476_064_818_363_972_2, 0.238_032_409_181_986_1],
            [0.904_227_274_892_534_8, -0.452_113_637_446_267_4, 0.226_056_818_723_133_7],
            [0.836_800_810_176_697_7, -0.418_400_405_088_348_86, 0.209_200_202_544_174_43],
            [0.744_563_512_160_568_9, -0.372_281_756_080_284_46, 0.186_140_878_040_142_23],
            [0.614_494_927_447_392_3, -0.307_247_463_723_696_16, 0.153_623_731_861_848_08],
            [0.307_247_463_723_696_16, -0.153_623_731_861_848_08, 0.076_811_865_930_924_04],
        ];
        for (k, t) in (1..=10).rev().enumerate() {
            let pred = r.scaled(0.5);
            r = ddim_step(&s, &r, &pred, t, t - 1, 0.0, None).unwrap();
            for (a, b) in r.data().iter().zip(&golden[k]) {
                assert!((a - b).abs() < 1e-12, "step {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ddim_composition_with_perfect_predictor() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r0 = ResidualField::standard_normal([3, 2, 2], &mut rng);
        let eps = ResidualField::standard_normal([3, 2, 2], &mut rng);
        let rt = forward_sample(&s, &r0, 800, &eps).unwrap();
        let mid = ddim_step(&s, &rt, &r0, 800, 450, 0.0, None).unwrap();
        let two = ddim_step(&s, &mid, &r0, 450, 90, 0.0, None).unwrap();
        let one = ddim_step(&s, &rt, &r0, 800, 90, 0.0, None).unwrap();
        for (a, b) in two.data().iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_full_noise_mean_is_posterior_mean() {
        // With eta_ddim = 1 and t_prev = t - 1 the step variance is beta_tilde_t and
        // the deterministic part (z = 0) is the forward-posterior mean.
        let s = default_schedule();
        let r0 = field(&[0.4, -0.8, 0.1]);
        let rt = field(&[1.2, 0.3, -0.7]);
        for t in [2, 10, 333, 1000] {
            let zero = ResidualField::zeros(r0.shape());
            let step = ddim_step(&s, &rt, &r0, t, t - 1, 1.0, Some(&zero)).unwrap();
            let mean = posterior_mean(&s, &rt, &r0, t).unwrap();
            for (a, b) in step.data().iter().zip(mean.data()) {
                assert!((a - b).abs() < 1e-12, "t = {t}: {a} vs {b}");
            }
            let sigma = ddim_sigma(&s, t, t - 1, 1.0);
            let var = s.posterior_variance(t).unwrap();
            assert!((sigma * sigma - var).abs() < 1e-12 * var.max(1e-12));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn implied_noise_round_trip(t in 1usize..=1000, seed in any::<u64>()) {
                let s = default_schedule();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r0 = ResidualField::standard_normal([3, 2, 3], &mut rng);
                let eps = ResidualField::standard_normal([3, 2, 3], &mut rng);
                let rt = forward_sample(&s, &r0, t, &eps).unwrap();
                let back = implied_noise(&s, &rt, &r0, t).unwrap();
                for (a, b) in back.data().iter().zip(eps.data()) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }

            #[test]
            fn ddim_deterministic_and_composes(
                t in 3usize..=1000,
                a in 0.0f64..1.0,
                b in 0.0f64..1.0,
                seed in any::<u64>(),
            ) {
                let s = default_schedule();
                let mid = 1 + ((t - 2) as f64 * a) as usize;
                let low = ((mid - 1) as f64 * b) as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r0 = ResidualField::standard_normal([1, 2, 2], &mut rng);
                let rt = ResidualField::standard_normal([1, 2, 2], &mut rng);
                let x1 = ddim_step(&s, &rt, &r0, t, mid, 0.0, None).unwrap();
                let x2 = ddim_step(&s, &rt, &r0, t, mid, 0.0, None).unwrap();
                prop_assert_eq!(x1.data(), x2.data());
                let two = ddim_step(&s, &x1, &r0, mid, low, 0.0, None).unwrap();
                let one = ddim_step(&s, &rt, &r0, t, low, 0.0, None).unwrap();
                for (p, q) in two.data().iter().zip(one.data()) {
                    prop_assert!((p - q).abs() < 1e-10);
                }
            }

            #[test]
            fn posterior_identity_with_schedule_coefficients(t in 1usize..=1000, seed in any::<u64>()) {
                let s = default_schedule();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r0 = ResidualField::standard_normal([1, 3, 3], &mut rng);
                let rt = ResidualField::standard_normal([1, 3, 3], &mut rng);
                let (eta, xi) = s.posterior_coefficients(t).unwrap();
                let m = posterior_mean(&s, &rt, &r0, t).unwrap();
                for i in 0..m.len() {
                    prop_assert!((m.data()[i] - (eta * r0.data()[i] + xi * rt.data()[i])).abs() <= 1e-12);
                }
            }
        }
    }
}
