use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use residiff_codec::pnm::{parse_ppm, to_ppm};
use residiff_codec::{decode, encode, synth, ImagePlane};
use residiff_core::analysis::{curvature_csv, psnr, traversal_report};
use residiff_core::denoiser::{train, Checkpoint, DenoiserModel};
use residiff_core::residual::{corpus_residuals, fit_threshold_table, ResidualHistogram, ThresholdTable};
use residiff_core::sampler::{enhance, Thresholding};

use crate::config::ToolkitConfig;
use crate::eval::eval_items;
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "residiff", version, about = "Residual diffusion enhancement for a block-transform codec")]
pub struct Cli {
    /// Flat `key = value` config; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled synthetic images as PPM files.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = CorpusSet::Train)]
        set: CorpusSet,
    },
    /// Train a denoiser on a directory of PPM images.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV; defaults to the checkpoint path with `.loss.csv` appended.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Encode a PPM image at rate position `lambda'` in [0, 1].
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lambda_prime: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream to a PPM image.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Enhance(EnhanceArgs),
    /// Fit the per-rate residual threshold table.
    FitThresholds {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an analysis CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusSet {
    Train,
    Eval,
}

/// Run the sampler on a decoded bitstream.
#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub bitstream: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Length of the respaced plan.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Start late and run only this many of the plan's final steps.
    #[arg(long, num_args = 0..=1, default_missing_value = "20")]
    pub late: Option<usize>,
    /// Rate-dependent threshold table; requires a rate in the bitstream header.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Disable all clipping of predictions.
    #[arg(long, conflicts_with = "thresholds")]
    pub no_clip: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ground truth PPM; prints PSNR of the output against it.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step trajectory CSV.
    #[arg(long)]
    pub dump_trajectory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub report: Report,
    /// Images to evaluate (traversal) or residual source (histogram).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bitstream for the curvature report.
    #[arg(long)]
    pub bitstream: Option<PathBuf>,
    /// Adds the thresholding-on columns to the traversal report.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Report {
    Traversal,
    Curvature,
    Histogram,
}

pub const LOSS_HEADER: &str = "step,loss,mse,proxy";
pub const TRAJECTORY_HEADER: &str = "step,t,mean_abs_r_t,mean_abs_r0_pred,norm_update";
pub const HISTOGRAM_HEADER: &str = "lambda,channel,bin_low,bin_high,count";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| usage(format!("missing --{name} (or paths.{name} in the config)")))
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(usage(format!("input not found: {}", path.display())));
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_image(path: &Path) -> Result<ImagePlane> {
    parse_ppm(&read_input(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Loads every `*.ppm` in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<ImagePlane>> {
    if !dir.is_dir() {
        return Err(usage(format!("corpus directory not found: {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no .ppm images in corpus directory {}", dir.display())));
    }
    paths.iter().map(|p| read_image(p)).collect()
}

fn load_checkpoint(path: &Path, cfg: &ToolkitConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::from_bytes(&read_input(path)?).with_context(|| format!("loading {}", path.display()))?;
    if ck.schedule != cfg.schedule {
        bail!(
            "schedule mismatch: checkpoint {} was trained with {:?}, config has {:?}",
            path.display(),
            ck.schedule,
            cfg.schedule
        );
    }
    Ok(ck)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ToolkitConfig::load(p)?,
        None => ToolkitConfig::default(),
    };
    if cli.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .context("starting worker pool")?;
    pool.install(|| dispatch(cli.command, &cfg))
}

fn dispatch(command: Command, cfg: &ToolkitConfig) -> Result<()> {
    match command {
        Command::GenCorpus { out, set } => gen_corpus(&out, set),
        Command::Train { corpus, out, loss_csv } => {
            let corpus = required(corpus, &cfg.corpus, "corpus")?;
            let loss_csv = loss_csv.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".loss.csv");
                s.into()
            });
            train_command(cfg, &corpus, &out, &loss_csv)
        }
        Command::Encode { input, lambda_prime, out } => encode_command(cfg, &input, lambda_prime, &out),
        Command::Decode { input, out } => decode_command(cfg, &input, &out),
        Command::Enhance(args) => enhance_command(cfg, args),
        Command::FitThresholds { corpus, out } => {
            let corpus = required(corpus, &cfg.corpus, "corpus")?;
            fit_command(cfg, &corpus, &out)
        }
        Command::Analyze(args) => analyze_command(cfg, args),
    }
}

fn gen_corpus(out: &Path, set: CorpusSet) -> Result<()> {
    let images = match set {
        CorpusSet::Train => synth::bundled_corpus(),
        CorpusSet::Eval => synth::bundled_eval_set(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, img) in images.iter().enumerate() {
        write_output(&out.join(format!("img_{i:03}.ppm")), &to_ppm(img))?;
    }
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

fn train_command(cfg: &ToolkitConfig, corpus_dir: &Path, out: &Path, loss_csv: &Path) -> Result<()> {
    let corpus = load_corpus(corpus_dir)?;
    let schedule = cfg.schedule.build()?;
    let model = DenoiserModel::new(cfg.model)?;
    eprintln!(
        "training {} parameters on {} images for {} steps",
        model.parameter_count(),
        corpus.len(),
        cfg.train.steps
    );
    let mut csv = format!("{LOSS_HEADER}\n");
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train(model, &corpus, &schedule, &cfg.rate, &cfg.train, |step, l| {
        csv.push_str(&format!("{},{:e},{:e},{:e}\n", step + 1, l.loss, l.mse, l.proxy));
        if (step + 1) % every == 0 {
            eprintln!("step {:>6}  loss {:.6e}", step + 1, l.loss);
        }
    })?;
    let ck = Checkpoint {
        model: outcome.model,
        schedule: cfg.schedule,
        train: cfg.train.clone(),
        losses: outcome.losses,
    };
    write_output(out, &ck.to_bytes())?;
    write_output(loss_csv, csv.as_bytes())?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn encode_command(cfg: &ToolkitConfig, input: &Path, lambda_prime: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_prime) {
        return Err(usage(format!("--lambda-prime {lambda_prime} outside [0, 1]")));
    }
    let image = read_image(input)?;
    let lambda = cfg.rate.sample_lambda(lambda_prime)?;
    let bs = encode(&image, cfg.rate.scale_code_for(lambda)?)?;
    write_output(out, &bs.to_bytes())?;
    println!("lambda {lambda:e}");
    println!("bpp {:.4}", bs.bits_per_pixel());
    Ok(())
}

fn decode_command(cfg: &ToolkitConfig, input: &Path, out: &Path) -> Result<()> {
    let bytes = read_input(input)?;
    let bs = residiff_codec::Bitstream::from_bytes(&bytes)?;
    let decoded = decode(&bytes, &cfg.rate)?;
    write_output(out, &to_ppm(&decoded.image))?;
    println!("{}x{}", bs.width, bs.height);
    println!("bpp {:.4}", bs.bits_per_pixel());
    Ok(())
}

fn enhance_command(cfg: &ToolkitConfig, args: EnhanceArgs) -> Result<()> {
    let ck = load_checkpoint(&required(args.checkpoint, &cfg.checkpoint, "checkpoint")?, cfg)?;
    let schedule = cfg.schedule.build()?;
    let decoded = decode(&read_input(&args.bitstream)?, &cfg.rate)?;
    let mut settings = cfg.sampler.clone();
    if let Some(n) = args.steps {
        settings.steps = n;
    }
    if let Some(k) = args.late {
        settings.late_steps = (k > 0).then_some(k);
    }
    if let Some(s) = args.seed {
        settings.seed = s;
    }
    let mut sampler = settings.build(schedule.steps()).map_err(|e| usage(e.to_string()))?;
    sampler.record_trajectory = args.dump_trajectory.is_some();
    let table_path = args.thresholds.or_else(|| cfg.thresholds.clone());
    sampler.thresholding = if args.no_clip {
        Thresholding::None
    } else if let Some(p) = table_path {
        if decoded.lambda.is_none() {
            return Err(usage(format!(
                "--thresholds needs a rate in the bitstream header, but scale code {} is not on the rate map",
                decoded.scale_code.raw()
            )));
        }
        Thresholding::Table(ThresholdTable::parse(&String::from_utf8_lossy(&read_input(&p)?))?)
    } else {
        Thresholding::Fixed
    };
    let result = enhance(&ck.model, &schedule, &decoded.image, &sampler, decoded.lambda)?;
    write_output(&args.out, &to_ppm(&result.image))?;
    if let (Some(path), Some(tr)) = (&args.dump_trajectory, &result.trajectory) {
        let mut csv = format!("{TRAJECTORY_HEADER}\n");
        for (i, st) in tr.steps.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e}\n",
                i + 1,
                st.t,
                st.r_t.mean_abs(),
                st.r0_pred.mean_abs(),
                st.update().norm()
            ));
        }
        write_output(path, csv.as_bytes())?;
    }
    println!("steps {}", sampler.executed_steps());
    if let Some(r) = args.reference {
        let reference = read_image(&r)?;
        let quantized = parse_ppm(&to_ppm(&result.image))?;
        println!("psnr {:.4}", psnr(&reference, &quantized)?);
    }
    Ok(())
}

fn fit_command(cfg: &ToolkitConfig, corpus_dir: &Path, out: &Path) -> Result<()> {
    let corpus = load_corpus(corpus_dir)?;
    let grid = cfg.rate.lambda_grid(cfg.threshold_points);
    let fit = fit_threshold_table(&corpus, &grid, cfg.coverage, &cfg.rate)?;
    write_output(out, fit.table.to_text().as_bytes())?;
    for ((lambda, tau), cov) in fit.table.entries().iter().zip(&fit.achieved_coverage) {
        println!("lambda {lambda:e}  tau {tau:.6}  coverage {cov:.4}");
    }
    if fit.table.was_corrected() {
        eprintln!("note: measured thresholds were not monotone; raised to the upper envelope");
    }
    Ok(())
}

fn analyze_command(cfg: &ToolkitConfig, args: AnalyzeArgs) -> Result<()> {
    let csv = match args.report {
        Report::Traversal => {
            let ck = load_checkpoint(&required(args.checkpoint, &cfg.checkpoint, "checkpoint")?, cfg)?;
            let images = load_corpus(&required(args.corpus, &cfg.corpus, "corpus")?)?;
            let schedule = cfg.schedule.build()?;
            let items = eval_items(&images, &cfg.rate)?;
            let sampler = cfg.sampler.build(schedule.steps()).map_err(|e| usage(e.to_string()))?;
            let table = match args.thresholds.or_else(|| cfg.thresholds.clone()) {
                Some(p) => Some(ThresholdTable::parse(&String::from_utf8_lossy(&read_input(&p)?))?),
                None => None,
            };
            traversal_report(&ck.model, &schedule, &items, &sampler, table.as_ref())?.to_csv()
        }
        Report::Curvature => {
            let ck = load_checkpoint(&required(args.checkpoint, &cfg.checkpoint, "checkpoint")?, cfg)?;
            let bitstream = args.bitstream.ok_or_else(|| usage("curvature needs --bitstream"))?;
            let decoded = decode(&read_input(&bitstream)?, &cfg.rate)?;
            let schedule = cfg.schedule.build()?;
            let mut sampler = cfg.sampler.build(schedule.steps()).map_err(|e| usage(e.to_string()))?;
            sampler.record_trajectory = true;
            let result = enhance(&ck.model, &schedule, &decoded.image, &sampler, decoded.lambda)?;
            curvature_csv(result.trajectory.as_ref().expect("trajectory requested"))?
        }
        Report::Histogram => {
            let images = load_corpus(&required(args.corpus, &cfg.corpus, "corpus")?)?;
            if args.bins == 0 {
                return Err(usage("--bins must be at least 1"));
            }
            let mut csv = format!("{HISTOGRAM_HEADER}\n");
            for lambda in cfg.rate.lambda_grid(cfg.threshold_points) {
                let mut hist = ResidualHistogram::new(args.bins);
                for r in corpus_residuals(&images, lambda, &cfg.rate)? {
                    hist.add(&r);
                }
                for (c, counts) in hist.counts.iter().enumerate() {
                    for (b, n) in counts.iter().enumerate() {
                        csv.push_str(&format!("{lambda:e},{c},{},{},{n}\n", hist.edges[b], hist.edges[b + 1]));
                    }
                }
                let k: Vec<String> = (0..hist.counts.len())
                    .map(|c| format!("{:.3}", hist.excess_kurtosis(c)))
                    .collect();
                println!("lambda {lambda:e}  excess kurtosis {}", k.join(" "));
            }
            csv
        }
    };
    write_output(&args.out, csv.as_bytes())?;
    std::io::stdout().flush().ok();
    Ok(())
}
