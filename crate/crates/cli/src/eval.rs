//! Evaluation sets: originals paired with base reconstructions at spread rates.

use residiff_codec::{reconstruct, ImagePlane, RateControl};
use residiff_core::analysis::EvalItem;

/// Rate position of image `i` out of `n`: `lambda' = (i + 0.5) / n`, so a set
/// covers the rate range evenly.
pub fn lambda_prime(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

pub fn eval_items(images: &[ImagePlane], rate: &RateControl) -> residiff_core::Result<Vec<EvalItem>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let lambda = rate.sample_lambda(lambda_prime(i, images.len()))?;
            Ok(EvalItem {
                original: x.clone(),
                reconstruction: reconstruct(x, rate.scale_code_for(lambda)?)?,
                lambda: Some(lambda),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_are_spread_and_recoverable() {
        let rate = RateControl::default();
        let imgs = residiff_codec::synth::generate(3, 4, 16);
        let items = eval_items(&imgs, &rate).unwrap();
        let lambdas: Vec<f64> = items.iter().map(|i| i.lambda.unwrap()).collect();
        assert!(lambdas.windows(2).all(|w| w[0] < w[1]));
        assert!(lambdas[0] > rate.lambda_min && lambdas[3] < rate.lambda_max);
        assert_eq!(lambda_prime(0, 4), 0.125);
    }
}
