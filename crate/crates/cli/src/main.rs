//! `vsepp`: generate synthetic feature sets, train joint embeddings, evaluate
//! retrieval, sweep negative-set sizes and tabulate hard-negative odds.
//!
//! Exit codes: 0 on success, 1 for runtime or configuration errors, 2 for
//! usage errors.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use commands::{
    manifest_beside, run_analyze, run_eval, run_gen, run_sweep, run_train, AnalyzeRun, EvalRun,
    GenSettings, SweepRun, TrainRun, TrainSettings, UsageError,
};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "vsepp",
    version,
    about = "Joint image-caption embedding training and retrieval evaluation"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic VSEF feature file.
    Gen(GenArgs),
    /// Train a model and write the best snapshot, a trace CSV and a manifest.
    Train(TrainArgs),
    /// Evaluate a snapshot on a test feature file.
    Eval(EvalArgs),
    /// Train one model per negative-set size and tabulate test recall.
    SweepNegsize(SweepArgs),
    /// Tabulate the probability that a batch holds no hard negative.
    Analyze(AnalyzeArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    n_images: usize,
    /// Captions per image.
    #[arg(long, default_value_t = 5)]
    cpi: usize,
    /// Latent dimension shared by images and captions.
    #[arg(long, default_value_t = 16)]
    latent: usize,
    #[arg(long, default_value_t = 64)]
    d_img: usize,
    #[arg(long, default_value_t = 48)]
    d_cap: usize,
    /// Feature noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Images per confuser cluster.
    #[arg(long, default_value_t = 4)]
    cluster_size: usize,
    /// Fraction of images placed in confuser clusters.
    #[arg(long, default_value_t = 0.0)]
    confuser_fraction: f64,
    /// Maximum angle (degrees) between a cluster member and its center.
    #[arg(long, default_value_t = 10.0)]
    confuser_angle: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the latent-to-feature projections; share it across splits.
    #[arg(long)]
    basis_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: `<out>.manifest.txt`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct TrainFlags {
    /// Loss: sh, mh or weighted.
    #[arg(long, default_value = "mh")]
    loss: String,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    /// Softmax temperature of the weighted loss.
    #[arg(long, default_value_t = 0.05)]
    temperature: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Negative-set size (default: the batch size).
    #[arg(long)]
    neg_size: Option<usize>,
    /// Similarity: ip or order.
    #[arg(long, default_value = "ip")]
    similarity: String,
    /// Take absolute values of embeddings after normalization.
    #[arg(long)]
    abs: bool,
    #[arg(long, overrides_with = "no_normalize_image")]
    normalize_image: bool,
    #[arg(long)]
    no_normalize_image: bool,
    #[arg(long, overrides_with = "no_normalize_caption")]
    normalize_caption: bool,
    #[arg(long)]
    no_normalize_caption: bool,
    /// Embedding dimension.
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0002)]
    lr: f64,
    #[arg(long, default_value_t = 15)]
    lr_drop_epoch: usize,
    #[arg(long, default_value_t = 10.0)]
    lr_drop_factor: f64,
    /// Train with SH before this epoch, then with --loss.
    #[arg(long)]
    curriculum_switch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainFlags {
    fn settings(&self) -> TrainSettings {
        TrainSettings {
            loss: self.loss.clone(),
            margin: self.margin,
            temperature: self.temperature,
            batch_size: self.batch_size,
            neg_size: self.neg_size.unwrap_or(self.batch_size),
            similarity: self.similarity.clone(),
            abs: self.abs,
            normalize_image: !self.no_normalize_image,
            normalize_caption: !self.no_normalize_caption,
            dim: self.dim,
            epochs: self.epochs,
            lr: self.lr,
            lr_drop_epoch: self.lr_drop_epoch,
            lr_drop_factor: self.lr_drop_factor,
            curriculum_switch: self.curriculum_switch,
            eval_every: self.eval_every,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Directory for snapshot.vsem, trace.csv and manifest.txt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Fill the trace's `seconds` column with wall-clock time (otherwise 0,
    /// which keeps traces byte-reproducible).
    #[arg(long)]
    record_time: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 1)]
    folds: usize,
    #[arg(long)]
    fold_size: Option<usize>,
    /// Write the report as a CSV row here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Negative-set sizes.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "2,4,8,16,32,64,128,256,512"
    )]
    sizes: Vec<usize>,
    /// Training seeds; every size is trained once per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Probability that one draw misses the top percentile.
    #[arg(long, default_value_t = 0.9)]
    q: f64,
    /// Target miss probability.
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Batch sizes to tabulate.
    #[arg(long, value_delimiter = ',', default_value = "2,8,16,32,44,45,64,128")]
    m: Vec<u64>,
    /// Monte-Carlo trials per row (0 disables simulation).
    #[arg(long, default_value_t = 0)]
    monte_carlo: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Redirect the primary output (file, or directory for `train`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_manifest(explicit: Option<PathBuf>, output: Option<&Path>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| match output {
        Some(out) => manifest_beside(out),
        None => PathBuf::from(format!("vsepp-{command}.manifest.txt")),
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::Gen(a) => {
            let manifest = default_manifest(a.manifest, Some(&a.out), "gen");
            let s = GenSettings {
                n_images: a.n_images,
                cpi: a.cpi,
                latent: a.latent,
                d_img: a.d_img,
                d_cap: a.d_cap,
                sigma: a.sigma,
                cluster_size: a.cluster_size,
                confuser_fraction: a.confuser_fraction,
                confuser_angle: a.confuser_angle,
                seed: a.seed,
                basis_seed: a.basis_seed,
                out: a.out,
            };
            run_gen(&s, &manifest)
        }
        Command::Train(a) => {
            let run = TrainRun {
                train: a.train,
                val: a.val,
                out_dir: a.out_dir,
                record_time: a.record_time,
                settings: a.flags.settings(),
            };
            run_train(&run, &run.out_dir.join("manifest.txt"))
        }
        Command::Eval(a) => {
            let manifest = default_manifest(a.manifest, a.out.as_deref(), "eval");
            let run = EvalRun {
                snapshot: a.snapshot,
                test: a.test,
                folds: a.folds,
                fold_size: a.fold_size,
                out: a.out,
            };
            run_eval(&run, &manifest).map(|_| ())
        }
        Command::SweepNegsize(a) => {
            let manifest = default_manifest(a.manifest, Some(&a.out), "sweep-negsize");
            let settings = a.flags.settings();
            let run = SweepRun {
                train: a.train,
                val: a.val,
                test: a.test,
                sizes: a.sizes,
                seeds: a.seeds.unwrap_or_else(|| vec![settings.seed]),
                out: a.out,
                settings,
            };
            run_sweep(&run, &manifest)
        }
        Command::Analyze(a) => {
            let manifest = default_manifest(a.manifest, a.out.as_deref(), "analyze");
            let run = AnalyzeRun {
                q: a.q,
                eps: a.eps,
                m: a.m,
                monte_carlo: a.monte_carlo,
                seed: a.seed,
                out: a.out,
            };
            run_analyze(&run, &manifest)
        }
        Command::Replay(a) => replay(&a),
    }
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let out = a.out.clone();
    match m.command.as_str() {
        "gen" => {
            let mut s: GenSettings = m.settings()?;
            if let Some(o) = out {
                s.out = o;
            }
            run_gen(&s, &manifest_beside(&s.out))
        }
        "train" => {
            let mut r: TrainRun = m.settings()?;
            if let Some(o) = out {
                r.out_dir = o;
            }
            run_train(&r, &r.out_dir.join("manifest.txt"))
        }
        "eval" => {
            let mut r: EvalRun = m.settings()?;
            if out.is_some() {
                r.out = out;
            }
            let manifest = default_manifest(None, r.out.as_deref(), "eval");
            run_eval(&r, &manifest).map(|_| ())
        }
        "sweep-negsize" => {
            let mut r: SweepRun = m.settings()?;
            if let Some(o) = out {
                r.out = o;
            }
            run_sweep(&r, &manifest_beside(&r.out))
        }
        "analyze" => {
            let mut r: AnalyzeRun = m.settings()?;
            if out.is_some() {
                r.out = out;
            }
            let manifest = default_manifest(None, r.out.as_deref(), "analyze");
            run_analyze(&r, &manifest)
        }
        other => bail!("manifest records unknown command `{other}`"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
