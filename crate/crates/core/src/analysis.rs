//! Metrics and diagnostics: PSNR, trajectory curvature, the patch-Fréchet
//! proxy and the distortion-perception traversal report.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use residiff_codec::image::CHANNELS;
use residiff_codec::ImagePlane;

use crate::denoiser::DenoiserModel;
use crate::error::{CoreError, Result};
use crate::residual::apply_residual;
use crate::sampler::{enhance_many, SamplerConfig, Thresholding, Trajectory};
use crate::schedule::NoiseSchedule;

/// Peak-to-peak range of [-1, 1] data.
pub const PSNR_MAX: f64 = 2.0;
/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const CROP_SIDE: usize = 32;
pub const CROP_STRIDE: usize = CROP_SIDE / 2;
pub const FEATURE_DIM: usize = 4 * CHANNELS;
pub const MIN_CROPS: usize = 30;
pub const FRECHET_RIDGE: f64 = 1e-6;

/// PSNR in dB with `MAX = 2`, capped at 100 dB.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::ShapeMismatch {
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PSNR_MAX * PSNR_MAX / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(CoreError::ShapeMismatch {
            expected: vec![CHANNELS, a.height(), a.width()],
            found: vec![CHANNELS, b.height(), b.width()],
        });
    }
    psnr_values(a.data(), b.data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    /// Angle in radians between update vectors of steps `i` and `i + 1`.
    pub angles: Vec<f64>,
    /// Set where either update vector had zero norm; the angle is then 0.
    pub degenerate: Vec<bool>,
}

/// Angle between two vectors, 0 when either is zero.
pub fn angle_between(u: &[f64], v: &[f64]) -> (f64, bool) {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return (0.0, true);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    ((dot / (nu * nv)).clamp(-1.0, 1.0).acos(), false)
}

/// Angles between consecutive update vectors `u_t = r0'(t) - r_t`.
pub fn curvature(trajectory: &Trajectory) -> Result<Curvature> {
    if trajectory.steps.len() < 2 {
        return Err(CoreError::Parameter("curvature needs at least 2 recorded steps".into()));
    }
    let updates: Vec<_> = trajectory.steps.iter().map(|s| s.update()).collect();
    let (angles, degenerate) = updates
        .windows(2)
        .map(|w| angle_between(w[0].data(), w[1].data()))
        .unzip();
    Ok(Curvature { angles, degenerate })
}

fn plane_features(p: &[f64], side: usize, out: &mut Vec<f64>) {
    let n = (side * side) as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (mut grad, mut gcount) = (0.0, 0usize);
    let (mut lap, mut lcount) = (0.0, 0usize);
    for y in 0..side {
        for x in 0..side {
            let v = p[y * side + x];
            if x + 1 < side {
                let d = p[y * side + x + 1] - v;
                grad += d * d;
                gcount += 1;
            }
            if y + 1 < side {
                let d = p[(y + 1) * side + x] - v;
                grad += d * d;
                gcount += 1;
            }
            if x > 0 && y > 0 && x + 1 < side && y + 1 < side {
                let l = p[y * side + x - 1] + p[y * side + x + 1] + p[(y - 1) * side + x] + p[(y + 1) * side + x]
                    - 4.0 * v;
                lap += l * l;
                lcount += 1;
            }
        }
    }
    out.extend([
        mean,
        var,
        grad / gcount.max(1) as f64,
        lap / lcount.max(1) as f64,
    ]);
}

/// 12 features of a square crop: per channel mean, variance, gradient energy
/// and 4-neighbour Laplacian energy.
pub fn crop_features(crop: &ImagePlane) -> Vec<f64> {
    let side = crop.width();
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for c in 0..CHANNELS {
        plane_features(crop.plane(c), side, &mut out);
    }
    out
}

/// Features of all half-overlapping `32 x 32` crops of `image`.
pub fn image_features(image: &ImagePlane) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    if image.width() < CROP_SIDE || image.height() < CROP_SIDE {
        return out;
    }
    for y in (0..=image.height() - CROP_SIDE).step_by(CROP_STRIDE) {
        for x in (0..=image.width() - CROP_SIDE).step_by(CROP_STRIDE) {
            out.push(crop_features(&image.crop(x, y, CROP_SIDE, CROP_SIDE)));
        }
    }
    out
}

pub fn set_features(images: &[ImagePlane]) -> Vec<Vec<f64>> {
    images.iter().flat_map(image_features).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetDistance {
    pub distance: f64,
    /// Set when a covariance was singular and both were regularized.
    pub regularized: bool,
}

fn gaussian_fit(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    max == 0.0 || min <= max * 1e-12
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetDistance> {
    if a.len() < MIN_CROPS || b.len() < MIN_CROPS {
        return Err(CoreError::Parameter(format!(
            "need at least {MIN_CROPS} crops per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mu_a, mut sa) = gaussian_fit(a);
    let (mu_b, mut sb) = gaussian_fit(b);
    let regularized = is_singular(&sa) || is_singular(&sb);
    if regularized {
        let ridge = DMatrix::identity(sa.nrows(), sa.ncols()) * FRECHET_RIDGE;
        sa += &ridge;
        sb += &ridge;
    }
    // tr((S_a S_b)^(1/2)) = tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)) for PSD inputs.
    let ra = sym_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sym_sqrt(&inner).trace();
    let diff = mu_a - mu_b;
    let distance = (diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross).max(0.0);
    Ok(FrechetDistance { distance, regularized })
}

/// Patch-Fréchet proxy between two image sets.
pub fn patch_frechet(a: &[ImagePlane], b: &[ImagePlane]) -> Result<FrechetDistance> {
    frechet_distance(&set_features(a), &set_features(b))
}

/// One image of an evaluation set: original, base reconstruction and rate.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub original: ImagePlane,
    pub reconstruction: ImagePlane,
    pub lambda: Option<f64>,
}

/// Corpus averages after one executed sampler step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based count of executed steps.
    pub step: usize,
    pub t: usize,
    pub psnr: f64,
    pub proxy: f64,
    pub mean_abs_r0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalRun {
    pub records: Vec<StepRecord>,
    /// Mean curvature angles across images, one per consecutive step pair.
    pub mean_angles: Vec<f64>,
    pub degenerate_angles: usize,
}

/// Traversal with thresholding on (rate table) and off (fixed [-1, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct TraversalReport {
    pub on: Option<TraversalRun>,
    pub off: TraversalRun,
}

/// Runs the sampler over `items` in parallel, recording per-step corpus
/// averages. Item `i` uses stream `i` of the generator seeded with
/// `config.seed`.
pub fn traversal_run(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    items: &[EvalItem],
    config: &SamplerConfig,
) -> Result<TraversalRun> {
    let mut cfg = config.clone();
    cfg.record_trajectory = true;
    let inputs: Vec<_> = items.iter().map(|i| (i.reconstruction.clone(), i.lambda)).collect();
    let runs: Vec<Trajectory> = enhance_many(model, schedule, &inputs, &cfg)?
        .into_iter()
        .map(|e| e.trajectory.expect("trajectory requested"))
        .collect();
    let originals: Vec<ImagePlane> = items.iter().map(|i| i.original.clone()).collect();
    let reference = set_features(&originals);
    let n_steps = cfg.executed_steps();
    let mut records = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let mut psnr_sum = 0.0;
        let mut abs_sum = 0.0;
        let mut enhanced = Vec::with_capacity(items.len());
        for (item, tr) in items.iter().zip(&runs) {
            let st = &tr.steps[k];
            let x_hat = apply_residual(&item.reconstruction, &st.r0_pred)?;
            psnr_sum += psnr(&item.original, &x_hat)?;
            abs_sum += st.r0_pred.mean_abs();
            enhanced.push(x_hat);
        }
        let proxy = frechet_distance(&reference, &set_features(&enhanced))?.distance;
        records.push(StepRecord {
            step: k + 1,
            t: runs[0].steps[k].t,
            psnr: psnr_sum / items.len() as f64,
            proxy,
            mean_abs_r0: abs_sum / items.len() as f64,
        });
    }
    let mut mean_angles = vec![0.0; n_steps.saturating_sub(1)];
    let mut degenerate_angles = 0;
    if n_steps >= 2 {
        for tr in &runs {
            let c = curvature(tr)?;
            for (m, a) in mean_angles.iter_mut().zip(&c.angles) {
                *m += a / runs.len() as f64;
            }
            degenerate_angles += c.degenerate.iter().filter(|&&d| d).count();
        }
    }
    Ok(TraversalRun {
        records,
        mean_angles,
        degenerate_angles,
    })
}

/// Traversal report over `items`. `config.thresholding` is replaced by fixed
/// clipping for the "off" run; the "on" run is made only when `table` is given.
pub fn traversal_report(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    items: &[EvalItem],
    config: &SamplerConfig,
    table: Option<&crate::residual::ThresholdTable>,
) -> Result<TraversalReport> {
    let mut off_cfg = config.clone();
    off_cfg.thresholding = Thresholding::Fixed;
    let off = traversal_run(model, schedule, items, &off_cfg)?;
    let on = match table {
        Some(t) => {
            let mut on_cfg = config.clone();
            on_cfg.thresholding = Thresholding::Table(t.clone());
            Some(traversal_run(model, schedule, items, &on_cfg)?)
        }
        None => None,
    };
    Ok(TraversalReport { on, off })
}

pub const TRAVERSAL_HEADER: &str = "step,t,psnr_off,proxy_off,mean_abs_r0_off,psnr_on,proxy_on,mean_abs_r0_on";

impl TraversalReport {
    /// CSV with [`TRAVERSAL_HEADER`]; the `_on` columns are empty without a table.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAVERSAL_HEADER}\n");
        for (k, r) in self.off.records.iter().enumerate() {
            let _ = write!(out, "{},{},{:.6},{:.6e},{:.6e}", r.step, r.t, r.psnr, r.proxy, r.mean_abs_r0);
            match self.on.as_ref().map(|on| on.records[k]) {
                Some(o) => {
                    let _ = writeln!(out, ",{:.6},{:.6e},{:.6e}", o.psnr, o.proxy, o.mean_abs_r0);
                }
                None => out.push_str(",,,\n"),
            }
        }
        out
    }
}

pub const CURVATURE_HEADER: &str = "pair,t_from,t_to,angle_rad,degenerate";

/// CSV of curvature angles: one row per consecutive pair of recorded steps.
pub fn curvature_csv(trajectory: &Trajectory) -> Result<String> {
    let c = curvature(trajectory)?;
    let mut out = format!("{CURVATURE_HEADER}\n");
    for (i, (a, d)) in c.angles.iter().zip(&c.degenerate).enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{:.9},{}",
            i + 1,
            trajectory.steps[i].t,
            trajectory.steps[i + 1].t,
            a,
            *d as u8
        );
    }
    Ok(out)
}
