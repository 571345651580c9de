//! `liteie` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use liteie::bench::{bench_csv, time_pipeline};
use liteie::metrics::{eval_csv, mean_report};
use liteie::train::{gradcheck_random, load_dataset, train_on_images, GRADCHECK_EPSILON};
use liteie::{
    deserialize_weights, enhance_image, init_weights, load_image, save_image, serialize_weights, EnhanceConfig,
    NetTopology, TrainConfig, Weights,
};

pub mod workflows;

use workflows::{evaluate_dirs, sweep, sweep_csv, Grid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "liteie", version, about = "Ultra-light low-light image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one image.
    Enhance(EnhanceArgs),
    /// Train weights on a directory of low-light images.
    Train(TrainArgs),
    /// Score enhanced low-light images against references with the same filenames.
    Eval(EvalArgs),
    /// Time the full pipeline, single-threaded and parallel.
    Bench(BenchArgs),
    /// Sweep a loss hyperparameter: train per value and report PSNR/SSIM.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on a random case.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Enhancement iterations.
    #[arg(long, default_value_t = 8)]
    pub iters: usize,
    /// Disable the restoration step.
    #[arg(long)]
    pub no_irm: bool,
}

impl PipelineArgs {
    fn config(&self) -> EnhanceConfig {
        EnhanceConfig { iterations: self.iters, irm_enabled: !self.no_irm, ..Default::default() }
    }
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct TrainOptions {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value = "3-1-3")]
    pub topology: NetTopology,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Exposure target scale.
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    /// Edge-aware smoothness sharpness.
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub patch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

impl TrainOptions {
    fn config(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            patch: self.patch,
            learning_rate: self.lr,
            seed: self.seed,
            enhance_cfg: self.pipeline.config(),
            ..Default::default()
        };
        cfg.loss_cfg.exp_alpha = self.alpha;
        cfg.loss_cfg.tv_beta = self.beta;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write `<out stem>.step<N>.<ext>` every N steps (0 disables).
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub opts: TrainOptions,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub low: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Weights to time; defaults to seeded initial weights of `--topology`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "3-1-3")]
    pub topology: NetTopology,
    /// Resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "1920x1080", value_parser = parse_resolution)]
    pub res: (usize, usize),
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Also write the CSV here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Reference images for evaluation.
    #[arg(long)]
    pub gt: PathBuf,
    /// Low-light evaluation images; defaults to `--data`.
    #[arg(long)]
    pub eval_low: Option<PathBuf>,
    /// Sweep as NAME=START:STOP:STEP (inclusive), NAME in {alpha, beta}.
    #[arg(long)]
    pub grid: Grid,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub opts: AblateTrainOptions,
}

#[derive(Debug, Args)]
pub struct AblateTrainOptions {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value = "3-1-3")]
    pub topology: NetTopology,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub patch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Enhancement iterations.
    #[arg(long = "t", default_value_t = 2)]
    pub iterations: usize,
    #[arg(long)]
    pub no_irm: bool,
    #[arg(long, default_value_t = GRADCHECK_EPSILON)]
    pub eps: f64,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be non-zero".into());
    }
    Ok((w, h))
}

/// Parses `argv` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Enhance(a) => cmd_enhance(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let weights = deserialize_weights(&a.weights)?;
    let input = load_image(&a.input)?;
    let out = enhance_image(&weights, &input, &a.pipeline.config())?;
    save_image(&out, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.opts.config();
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.checkpoint_path = Some(a.out.clone());
    let images = load_dataset(&a.data)?;
    println!("# step, total, L_exp, L_tv, L_mscol");
    let (weights, log) = train_on_images(&images, &a.opts.topology, &cfg, |r| println!("{}", r.to_line()))?;
    serialize_weights(&weights, &a.out)?;
    for c in &log.checkpoints {
        println!("# checkpoint {}", c.display());
    }
    println!("# wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let weights = deserialize_weights(&a.weights)?;
    let (rows, pairing) = evaluate_dirs(&weights, &a.low, &a.gt, &a.pipeline.config())?;
    for name in &pairing.unmatched_low {
        eprintln!("unmatched: {name} has no reference in {}", a.gt.display());
    }
    for name in &pairing.unmatched_gt {
        eprintln!("unmatched: {name} has no low-light input in {}", a.low.display());
    }
    if rows.is_empty() {
        bail!("no image pairs with matching filenames");
    }
    fs::write(&a.report, eval_csv(&rows)).with_context(|| format!("writing {}", a.report.display()))?;
    let m = mean_report(&rows).expect("non-empty");
    println!("{} pairs: psnr {:.4} dB, ssim {:.4}, mae {:.4}, mse {:.4}", rows.len(), m.psnr, m.ssim, m.mae, m.mse);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let weights: Weights = match &a.weights {
        Some(p) => deserialize_weights(p)?,
        None => init_weights(&a.topology, 0),
    };
    let (w, h) = a.res;
    let cfg = a.pipeline.config();
    let mut reports = Vec::new();
    for threads in [1, 0] {
        reports.push(time_pipeline(&weights, h, w, &cfg, a.runs, a.warmup, threads)?);
    }
    let csv = bench_csv(&reports);
    print!("{csv}");
    if let Some(path) = &a.report {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let o = &a.opts;
    let base = TrainConfig {
        steps: o.steps,
        batch_size: o.batch,
        patch: o.patch,
        learning_rate: o.lr,
        seed: o.seed,
        enhance_cfg: o.pipeline.config(),
        ..Default::default()
    };
    let eval_low = a.eval_low.clone().unwrap_or_else(|| a.data.clone());
    let name = a.grid.param.name();
    let points = sweep(&a.data, &eval_low, &a.gt, &o.topology, &base, &a.grid, |p| {
        println!("{name}={} psnr {:.4} dB, ssim {:.4}", p.value, p.mean.psnr, p.mean.ssim);
    })?;
    if let Some(best) = points.iter().max_by(|x, y| x.mean.psnr.total_cmp(&y.mean.psnr)) {
        println!("best {name}={} ({:.4} dB)", best.value, best.mean.psnr);
    }
    if let Some(path) = &a.report {
        fs::write(path, sweep_csv(a.grid.param, &points)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let c = gradcheck_random(a.seed, a.iterations, !a.no_irm, a.eps)?;
    println!(
        "seed {} T={} irm={}: max rel err {:.3e}, cosine {:.12}",
        a.seed, a.iterations, !a.no_irm, c.max_rel_err, c.cosine
    );
    if c.max_rel_err >= 1e-4 {
        bail!("gradient check failed: max relative error {:.3e} >= 1e-4", c.max_rel_err);
    }
    Ok(())
}
