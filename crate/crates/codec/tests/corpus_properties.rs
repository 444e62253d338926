use proptest::prelude::*;
use residiff_codec::codec::{encode_with_stats, padded_size, quantize};
use residiff_codec::synth::bundled_corpus;
use residiff_codec::{decode, encode, Bitstream, ImagePlane, RateControl, ScaleCode};

fn psnr(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (4.0 / mse).log10()).min(100.0)
    }
}

#[test]
fn rate_and_quality_monotone_in_lambda() {
    let rc = RateControl::default();
    let corpus = bundled_corpus();
    let mut prev: Option<(f64, f64)> = None;
    for lambda in rc.lambda_grid(10) {
        let code = rc.scale_code_for(lambda).unwrap();
        let (mut bpp, mut q) = (0.0, 0.0);
        for img in &corpus {
            let bs = encode(img, code).unwrap();
            bpp += bs.bits_per_pixel();
            q += psnr(img, &decode(&bs.to_bytes(), &rc).unwrap().image);
        }
        let (bpp, q) = (bpp / corpus.len() as f64, q / corpus.len() as f64);
        eprintln!("lambda {lambda:.6}  s {:.4}  bpp {bpp:.4}  psnr {q:.3}", code.scale());
        if let Some((pb, pq)) = prev {
            assert!(bpp >= pb, "bpp not monotone at {lambda}");
            assert!(q >= pq, "psnr not monotone at {lambda}");
        }
        prev = Some((bpp, q));
    }
}

#[test]
fn coder_overhead_is_small() {
    let rc = RateControl::default();
    for lambda in rc.lambda_grid(5) {
        let code = rc.scale_code_for(lambda).unwrap();
        for img in bundled_corpus().iter().take(8) {
            let enc = encode_with_stats(img, code).unwrap();
            let actual = enc.bitstream.payload.len() as f64;
            let ideal = enc.information_bits / 8.0;
            assert!(actual <= ideal * 1.005 + 16.0, "{actual} bytes vs ideal {ideal}");
        }
    }
}

fn arb_image() -> impl Strategy<Value = ImagePlane> {
    (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
        prop::collection::vec(-1.0f64..=1.0, 3 * w * h)
            .prop_map(move |data| ImagePlane::new(w, h, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bitstream_round_trip_is_bit_exact(img in arb_image(), raw in 1u16..=u16::MAX) {
        let code = ScaleCode::from_raw(raw).unwrap();
        let bs = encode(&img, code).unwrap();
        let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        prop_assert_eq!(&parsed, &bs);
        prop_assert_eq!(parsed.width as usize, img.width());
        prop_assert_eq!(parsed.height as usize, img.height());
        prop_assert_eq!(parsed.scale_code, code);
        let (pw, ph) = padded_size(img.width(), img.height());
        let coeffs = residiff_codec::codec::entropy_decode(&bs.payload, pw / 8, ph / 8, 0).unwrap();
        prop_assert_eq!(coeffs, quantize(&img, code).unwrap());
        let dec = decode(&bs.to_bytes(), &RateControl::default()).unwrap();
        prop_assert!(dec.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
