//! Acceptance run: one pass/fail line per criterion, nonzero exit on any failure.
//!
//! Criteria 6 to 9 share a model trained with `configs/desk.cfg`. The
//! checkpoint is cached in cargo's integration-test scratch directory, keyed
//! by the config text, so only the first run pays for training. Set
//! `RESIDIFF_RETRAIN=1` to ignore the cache.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use residiff_cli::config::ToolkitConfig;
use residiff_cli::eval::eval_items;
use residiff_codec::codec::encode_with_stats;
use residiff_codec::{decode, synth, Bitstream, RateControl};
use residiff_core::analysis::{patch_frechet, psnr, traversal_report, traversal_run, EvalItem, TraversalRun};
use residiff_core::denoiser::gradcheck::finite_difference_check;
use residiff_core::denoiser::{sample_batch, train, Checkpoint, DenoiserModel, ModelConfig, TrainConfig};
use residiff_core::diffusion::{ddim_step, forward_sample, implied_noise, posterior_mean};
use residiff_core::residual::{clip_prediction, fit_threshold_table};
use residiff_core::sampler::SamplerConfig;
use residiff_core::schedule::{make_linear, WeightMode};
use residiff_core::ResidualField;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.cfg");

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn max_abs_diff(a: &ResidualField, b: &ResidualField) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn diffusion_math() -> Verdict {
    let start = Instant::now();
    let s = make_linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let r0 = ResidualField::standard_normal([3, 8, 8], &mut rng).scaled(0.1);
        let eps = ResidualField::standard_normal([3, 8, 8], &mut rng);
        let t = rng.random_range(2..=1000);
        let r_t = forward_sample(&s, &r0, t, &eps).unwrap();
        worst = worst.max(max_abs_diff(&implied_noise(&s, &r_t, &r0, t).unwrap(), &eps));
        let end = ddim_step(&s, &r_t, &r0, t, 0, 0.0, None).unwrap();
        worst = worst.max(max_abs_diff(&end, &r0));
        let mid = rng.random_range(1..t);
        let low = rng.random_range(0..mid);
        let two = ddim_step(&s, &ddim_step(&s, &r_t, &r0, t, mid, 0.0, None).unwrap(), &r0, mid, low, 0.0, None).unwrap();
        let one = ddim_step(&s, &r_t, &r0, t, low, 0.0, None).unwrap();
        worst = worst.max(max_abs_diff(&two, &one));
        let r_1 = forward_sample(&s, &r0, 1, &eps).unwrap();
        worst = worst.max(max_abs_diff(&posterior_mean(&s, &r_1, &r0, 1).unwrap(), &r0));
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-10 && within(elapsed, Duration::from_secs(10)),
        format!("max identity error {worst:.2e} (<= 1e-10), {:.2}s (< 10s)", elapsed.as_secs_f64()),
    )
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let schedule = make_linear(1000, 1e-4, 0.02).unwrap();
    let corpus = synth::generate(7, 2, 16);
    let cfg = TrainConfig {
        batch_size: 2,
        crop: 8,
        ..Default::default()
    };
    let batch = sample_batch(&corpus, &schedule, &RateControl::default(), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut model = DenoiserModel::new(ModelConfig { width: 32, seed: 4 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for e in model.params_mut().entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in &mut e.tensor.data {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let report = finite_difference_check(&model, &schedule, &batch, WeightMode::Unit, 0.001, 60, 1e-4, 6).unwrap();
    let worst = report.max_rel_error();
    let elapsed = start.elapsed();
    verdict(
        report.samples.len() >= 50 && worst < 1e-3 && within(elapsed, Duration::from_secs(60)),
        format!(
            "{} parameters, max relative error {worst:.2e} (< 1e-3), {:.1}s (< 60s)",
            report.samples.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// `w_1 / w_1000` for the linear schedule, from an independent double
/// precision evaluation of the posterior formulas.
const WEIGHT_RATIO_GOLDEN: f64 = 22_262_676_951.082_954;

fn loss_weights() -> Verdict {
    let s = make_linear(1000, 1e-4, 0.02).unwrap();
    let ratio = s.loss_weight(1, WeightMode::Theoretical).unwrap() / s.loss_weight(1000, WeightMode::Theoretical).unwrap();
    let rel = (ratio / WEIGHT_RATIO_GOLDEN - 1.0).abs();
    verdict(
        ratio > 1e3 && rel < 1e-9,
        format!("w_1/w_1000 = {ratio:.6e} (> 1e3), golden relative error {rel:.1e}"),
    )
}

fn codec_suite() -> Verdict {
    let start = Instant::now();
    let rate = RateControl::default();
    let corpus = synth::bundled_corpus();
    let (mut exact, mut overhead_ok) = (true, true);
    let mut worst_overhead = f64::NEG_INFINITY;
    let mut curve = Vec::new();
    for lambda in rate.lambda_grid(10) {
        let code = rate.scale_code_for(lambda).unwrap();
        let (mut bpp, mut q) = (0.0, 0.0);
        for img in &corpus {
            let enc = encode_with_stats(img, code).unwrap();
            let bytes = enc.bitstream.to_bytes();
            exact &= Bitstream::from_bytes(&bytes).unwrap() == enc.bitstream;
            let dec = decode(&bytes, &rate).unwrap();
            exact &= dec.image == residiff_codec::reconstruct(img, code).unwrap();
            let actual = enc.bitstream.payload.len() as f64;
            let ideal = enc.information_bits / 8.0;
            overhead_ok &= actual <= ideal * 1.005 + 16.0;
            worst_overhead = worst_overhead.max(actual - ideal * 1.005);
            bpp += enc.bitstream.bits_per_pixel();
            q += psnr(img, &dec.image).unwrap();
        }
        curve.push((bpp / corpus.len() as f64, q / corpus.len() as f64));
    }
    let monotone = curve.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
    let elapsed = start.elapsed();
    verdict(
        exact && monotone && overhead_ok && within(elapsed, Duration::from_secs(120)),
        format!(
            "round trip {}, bpp {:.3}..{:.3} and PSNR {:.2}..{:.2} dB monotone: {monotone}, \
             worst payload excess over 0.5% overhead {:.2} bytes (<= 16), {:.1}s (< 120s)",
            if exact { "exact" } else { "MISMATCH" },
            curve[0].0,
            curve[9].0,
            curve[0].1,
            curve[9].1,
            worst_overhead,
            elapsed.as_secs_f64()
        ),
    )
}

fn threshold_suite() -> Verdict {
    let start = Instant::now();
    let rate = RateControl::default();
    let corpus = synth::bundled_corpus();
    let fit = fit_threshold_table(&corpus, &rate.lambda_grid(10), 0.95, &rate).unwrap();
    let upper = 0.95 + 2.0 / (fit.samples as f64).sqrt();
    let coverage_ok = fit.achieved_coverage.iter().all(|&c| (0.95..=upper).contains(&c));
    let taus: Vec<f64> = fit.table.entries().iter().map(|e| e.1).collect();
    let monotone = taus.windows(2).all(|w| w[1] <= w[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut idempotent = true;
    for &(lambda, _) in fit.table.entries() {
        let f = ResidualField::standard_normal([3, 8, 8], &mut rng).scaled(0.2);
        let once = clip_prediction(&f, lambda, Some(&fit.table));
        idempotent &= clip_prediction(&once, lambda, Some(&fit.table)) == once;
    }
    let elapsed = start.elapsed();
    let (lo, hi) = fit
        .achieved_coverage
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &c| (a.min(c), b.max(c)));
    verdict(
        coverage_ok && monotone && idempotent && within(elapsed, Duration::from_secs(120)),
        format!(
            "coverage {lo:.4}..{hi:.4} in [0.95, {upper:.4}] over N = {}, tau non-increasing: {monotone}, \
             clip idempotent: {idempotent}{}, {:.1}s (< 120s)",
            fit.samples,
            if fit.table.was_corrected() { " (envelope applied)" } else { "" },
            elapsed.as_secs_f64()
        ),
    )
}

fn trained_checkpoint(cfg: &ToolkitConfig) -> Checkpoint {
    let mut h = DefaultHasher::new();
    cfg.to_text().hash(&mut h);
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-{:016x}.ckpt", h.finish()));
    if std::env::var_os("RESIDIFF_RETRAIN").is_none() {
        if let Ok(ck) = Checkpoint::load(&path) {
            println!("using cached checkpoint {}", path.display());
            return ck;
        }
    }
    println!("training desk model ({} steps); cached at {}", cfg.train.steps, path.display());
    let schedule = cfg.schedule.build().unwrap();
    let start = Instant::now();
    let every = (cfg.train.steps / 10).max(1);
    let out = train(
        DenoiserModel::new(cfg.model).unwrap(),
        &synth::bundled_corpus(),
        &schedule,
        &cfg.rate,
        &cfg.train,
        |step, l| {
            if (step + 1) % every == 0 {
                println!("  step {:>5}  loss {:.4e}  {:.0}s", step + 1, l.loss, start.elapsed().as_secs_f64());
            }
        },
    )
    .unwrap();
    let ck = Checkpoint {
        model: out.model,
        schedule: cfg.schedule,
        train: cfg.train.clone(),
        losses: out.losses,
    };
    ck.save(&path).unwrap();
    ck
}

struct TrainedRuns {
    items: Vec<EvalItem>,
    off: TraversalRun,
    on: TraversalRun,
    late: TraversalRun,
    base_proxy: f64,
}

fn trained_runs(cfg: &ToolkitConfig) -> TrainedRuns {
    let ck = trained_checkpoint(cfg);
    let schedule = cfg.schedule.build().unwrap();
    let items = eval_items(&synth::bundled_eval_set(), &cfg.rate).unwrap();
    let table = fit_threshold_table(
        &synth::bundled_corpus(),
        &cfg.rate.lambda_grid(cfg.threshold_points),
        cfg.coverage,
        &cfg.rate,
    )
    .unwrap()
    .table;
    let full = cfg.sampler.build(schedule.steps()).unwrap();
    let report = traversal_report(&ck.model, &schedule, &items, &full, Some(&table)).unwrap();
    let mut late_cfg = SamplerConfig::late_start(schedule.steps(), cfg.sampler.steps, 20).unwrap();
    late_cfg.seed = cfg.sampler.seed;
    let late = traversal_run(&ck.model, &schedule, &items, &late_cfg).unwrap();
    let originals: Vec<_> = items.iter().map(|i| i.original.clone()).collect();
    let recs: Vec<_> = items.iter().map(|i| i.reconstruction.clone()).collect();
    let base_proxy = patch_frechet(&originals, &recs).unwrap().distance;
    TrainedRuns {
        items,
        off: report.off,
        on: report.on.expect("table given"),
        late,
        base_proxy,
    }
}

fn traversal(r: &TrainedRuns) -> Verdict {
    let (first, last) = (r.off.records[0], *r.off.records.last().unwrap());
    let base_psnr = r.items.iter().map(|i| psnr(&i.original, &i.reconstruction).unwrap()).sum::<f64>()
        / r.items.len() as f64;
    verdict(
        first.psnr >= last.psnr && last.proxy <= first.proxy,
        format!(
            "PSNR step 1 {:.3} dB >= step {} {:.3} dB; proxy step {} {:.4e} <= step 1 {:.4e} \
             (base codec {base_psnr:.3} dB, proxy {:.4e})",
            first.psnr, last.step, last.psnr, last.step, last.proxy, first.proxy, r.base_proxy
        ),
    )
}

fn late_start(r: &TrainedRuns) -> Verdict {
    let full = r.off.records.last().unwrap().psnr;
    let late = r.late.records.last().unwrap().psnr;
    verdict(
        (full - late).abs() <= 0.5,
        format!("100-step {full:.3} dB vs 20-step late start {late:.3} dB, |diff| {:.3} (<= 0.5)", (full - late).abs()),
    )
}

fn thresholding(r: &TrainedRuns) -> Verdict {
    let mut psnr_ok = true;
    let mut worst_psnr = f64::MAX;
    let mut worst_proxy: f64 = 0.0;
    for (a, b) in r.on.records.iter().zip(&r.off.records) {
        psnr_ok &= a.psnr >= b.psnr;
        worst_psnr = worst_psnr.min(a.psnr - b.psnr);
        worst_proxy = worst_proxy.max((a.proxy - b.proxy).abs() / b.proxy);
    }
    let last = (r.on.records.last().unwrap(), r.off.records.last().unwrap());
    verdict(
        psnr_ok && worst_proxy <= 0.05,
        format!(
            "on - off PSNR >= 0 at all {} steps: {psnr_ok} (min {worst_psnr:+.4} dB, final {:.3} vs {:.3}); \
             max proxy deviation {:.2}% (<= 5%)",
            r.on.records.len(),
            last.0.psnr,
            last.1.psnr,
            100.0 * worst_proxy
        ),
    )
}

fn curvature(r: &TrainedRuns) -> Verdict {
    let angles = &r.off.mean_angles;
    // Angle k sits between executed steps k + 1 and k + 2.
    let n = r.off.records.len();
    let split = (n * 4) / 5 - 1;
    let early = angles[..split].iter().sum::<f64>() / split as f64;
    let late = angles[split..].iter().sum::<f64>() / (angles.len() - split) as f64;
    verdict(
        early < late,
        format!(
            "mean angle first 80% {early:.4} rad < last 20% {late:.4} rad ({} degenerate angles)",
            r.off.degenerate_angles
        ),
    )
}

fn residiff(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_residiff"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Runs a pipeline touching every command and returns the produced files.
fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    std::fs::write(
        p("tiny.cfg"),
        "model.width = 8\ntrain.steps = 4\ntrain.batch_size = 2\ntrain.crop = 16\ntrain.seed = 3\n\
         sampler.steps = 6\nsampler.eta = 1\nsampler.seed = 11\nthresholds.points = 4\n",
    )
    .unwrap();
    let cfg = p("tiny.cfg");
    let c = ["--config", cfg.as_str(), "--jobs", "1"];
    let run = |args: &[&str]| residiff(&[&c[..], args].concat());
    run(&["gen-corpus", "--out", &p("corpus")])?;
    run(&["gen-corpus", "--out", &p("eval"), "--set", "eval"])?;
    run(&["train", "--corpus", &p("corpus"), "--out", &p("model.ckpt")])?;
    run(&["fit-thresholds", "--corpus", &p("corpus"), "--out", &p("tau.txt")])?;
    let img = format!("{}/img_002.ppm", p("eval"));
    run(&["encode", "--input", &img, "--lambda-prime", "0.5", "--out", &p("a.rdb")])?;
    run(&["decode", "--input", &p("a.rdb"), "--out", &p("a.ppm")])?;
    run(&[
        "enhance", "--bitstream", &p("a.rdb"), "--checkpoint", &p("model.ckpt"), "--thresholds", &p("tau.txt"),
        "--out", &p("enh.ppm"), "--dump-trajectory", &p("traj.csv"),
    ])?;
    run(&["analyze", "curvature", "--checkpoint", &p("model.ckpt"), "--bitstream", &p("a.rdb"), "--out", &p("curv.csv")])?;
    run(&[
        "analyze", "traversal", "--checkpoint", &p("model.ckpt"), "--corpus", &p("eval"), "--thresholds",
        &p("tau.txt"), "--out", &p("trav.csv"),
    ])?;
    run(&["analyze", "histogram", "--corpus", &p("corpus"), "--out", &p("hist.csv")])?;
    let mut files = Vec::new();
    for name in [
        "model.ckpt", "model.ckpt.loss.csv", "tau.txt", "a.rdb", "a.ppm", "enh.ppm", "traj.csv", "curv.csv",
        "trav.csv", "hist.csv",
    ] {
        files.push((name.to_string(), std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?));
    }
    Ok(files)
}

fn determinism() -> Verdict {
    let a = tempfile::TempDir::new().unwrap();
    let b = tempfile::TempDir::new().unwrap();
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p.1 != q.1).map(|(p, _)| p.0.as_str()).collect();
            verdict(
                differing.is_empty(),
                format!("{} outputs of repeated runs compared, differing: {differing:?}", x.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    let cfg = ToolkitConfig::parse(DESK_CONFIG).expect("bundled config parses");
    let mut results: Vec<(&str, Verdict)> = vec![
        ("1 diffusion math", diffusion_math()),
        ("2 gradient check", gradient_check()),
        ("3 loss weights", loss_weights()),
        ("4 codec", codec_suite()),
        ("5 thresholds", threshold_suite()),
    ];
    let runs = trained_runs(&cfg);
    results.push(("6 traversal", traversal(&runs)));
    results.push(("7 late start", late_start(&runs)));
    results.push(("8 rate thresholding", thresholding(&runs)));
    results.push(("9 curvature", curvature(&runs)));
    results.push(("10 determinism", determinism()));
    println!();
    for (name, v) in &results {
        println!("[{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|(_, v)| !v.passed).count();
    println!("\n{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
