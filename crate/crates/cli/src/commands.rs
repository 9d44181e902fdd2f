//! Resolved command settings and the code that runs each command.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vsepp::analysis::{min_batch_for, miss_probability, monte_carlo_miss};
use vsepp::datagen::{generate, read_features, write_features, PairedFeatureSet, SyntheticSpec};
use vsepp::evaluator::{evaluate_fold_reports, EvalProtocol, RetrievalReport};
use vsepp::loss::{LossConfig, LossKind};
use vsepp::model::SimilarityKind;
use vsepp::optimizer::{AdamConfig, LrSchedule};
use vsepp::sampler::SamplerConfig;
use vsepp::snapshot::{read_snapshot, write_snapshot, StoredModel};
use vsepp::trainer::{train, ModelConfig, TrainConfig, TrainingTrace};
use vsepp::Error;

use crate::manifest::RunManifest;

/// A command-line mistake; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub const TRACE_HEADER: &str = "epoch,train_loss,r1_cap,r5_cap,r10_cap,r1_img,r5_img,r10_img,medr_cap,medr_img,meanr_cap,meanr_img,rsum,lr,seconds";

/// `<path>.manifest.txt`
pub fn manifest_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub n_images: usize,
    pub cpi: usize,
    pub latent: usize,
    pub d_img: usize,
    pub d_cap: usize,
    pub sigma: f64,
    pub cluster_size: usize,
    pub confuser_fraction: f64,
    pub confuser_angle: f64,
    pub seed: u64,
    pub basis_seed: Option<u64>,
    pub out: PathBuf,
}

impl GenSettings {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_images: self.n_images,
            cpi: self.cpi,
            latent_dim: self.latent,
            d_img: self.d_img,
            d_cap: self.d_cap,
            noise_sigma: self.sigma,
            confuser_cluster_size: self.cluster_size,
            confuser_fraction: self.confuser_fraction,
            confuser_angle_deg: self.confuser_angle,
            seed: self.seed,
            basis_seed: self.basis_seed,
        }
    }
}

pub fn run_gen(s: &GenSettings, manifest: &Path) -> Result<()> {
    RunManifest::new("gen", s)?.write(manifest)?;
    let set = generate(&s.spec())?;
    write_features(&set, &s.out).with_context(|| format!("writing {}", s.out.display()))?;
    let back = read_features(&s.out)?;
    anyhow::ensure!(
        back == set,
        "read-back of {} differs from the generated set",
        s.out.display()
    );
    eprintln!(
        "wrote {} images x {} captions ({}+{} dims) to {}",
        set.n_images(),
        set.cpi(),
        set.d_img(),
        set.d_cap(),
        s.out.display()
    );
    Ok(())
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub loss: String,
    pub margin: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub neg_size: usize,
    pub similarity: String,
    pub abs: bool,
    pub normalize_image: bool,
    pub normalize_caption: bool,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub curriculum_switch: Option<usize>,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn config(&self) -> Result<TrainConfig> {
        let kind: LossKind = self.loss.parse()?;
        let similarity: SimilarityKind = self.similarity.parse()?;
        let config = TrainConfig {
            model: ModelConfig {
                dim: self.dim,
                similarity,
                normalize_image: self.normalize_image,
                normalize_caption: self.normalize_caption,
                abs_embeddings: self.abs,
            },
            loss: LossConfig {
                margin: self.margin,
                kind,
                temperature: self.temperature,
            },
            sampler: SamplerConfig {
                batch_size: self.batch_size,
                neg_pool_size: self.neg_size,
                seed: self.seed,
                shuffle_each_epoch: true,
            },
            schedule: LrSchedule {
                base_lr: self.lr,
                drop_epoch: self.lr_drop_epoch,
                drop_factor: self.lr_drop_factor,
                total_epochs: self.epochs,
            },
            adam: AdamConfig::default(),
            curriculum_switch_epoch: self.curriculum_switch,
            eval_every: self.eval_every,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub train: PathBuf,
    pub val: PathBuf,
    pub out_dir: PathBuf,
    pub record_time: bool,
    #[serde(flatten)]
    pub settings: TrainSettings,
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        write!(out, "{v}").expect("write to string");
    }
}

pub fn trace_csv(trace: &TrainingTrace, record_time: bool) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.records {
        write!(out, "{},{}", r.epoch, r.train_loss).expect("write to string");
        let fields = r.report.map(|rep| rep.csv_fields());
        for i in 0..11 {
            out.push(',');
            fmt_opt(&mut out, fields.map(|f| f[i]));
        }
        let seconds = if record_time { r.seconds } else { 0.0 };
        writeln!(out, ",{},{}", r.lr, seconds).expect("write to string");
    }
    out
}

pub fn run_train(run: &TrainRun, manifest: &Path) -> Result<()> {
    fs::create_dir_all(&run.out_dir)
        .with_context(|| format!("creating {}", run.out_dir.display()))?;
    RunManifest::new("train", run)?.write(manifest)?;
    let config = run.settings.config()?;
    let train_set =
        read_features(&run.train).with_context(|| format!("reading {}", run.train.display()))?;
    let val_set =
        read_features(&run.val).with_context(|| format!("reading {}", run.val.display()))?;
    let trace_path = run.out_dir.join("trace.csv");
    match train(&train_set, &val_set, &config) {
        Ok(outcome) => {
            fs::write(&trace_path, trace_csv(&outcome.trace, run.record_time))?;
            let stored = StoredModel {
                model: outcome.best.model,
                similarity: config.model.similarity,
                epoch: outcome.best.epoch,
                rsum: outcome.best.rsum,
            };
            write_snapshot(&stored, run.out_dir.join("snapshot.vsem"))?;
            eprintln!(
                "best epoch {} with validation rsum {:.2}; wrote {}",
                stored.epoch,
                stored.rsum,
                run.out_dir.display()
            );
            Ok(())
        }
        Err(failure) => {
            fs::write(&trace_path, trace_csv(&failure.trace, run.record_time))?;
            Err(failure.into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub snapshot: PathBuf,
    pub test: PathBuf,
    pub folds: usize,
    pub fold_size: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn report_csv(report: &RetrievalReport) -> String {
    let row: Vec<String> = report.csv_fields().iter().map(f64::to_string).collect();
    format!("{}\n{}\n", RetrievalReport::CSV_HEADER, row.join(","))
}

pub fn run_eval(run: &EvalRun, manifest: &Path) -> Result<RetrievalReport> {
    RunManifest::new("eval", run)?.write(manifest)?;
    let stored = read_snapshot(&run.snapshot)
        .with_context(|| format!("reading {}", run.snapshot.display()))?;
    let test =
        read_features(&run.test).with_context(|| format!("reading {}", run.test.display()))?;
    if (stored.model.d_img(), stored.model.d_cap()) != (test.d_img(), test.d_cap()) {
        return Err(Error::Contract(format!(
            "snapshot expects features of ({}, {}) dims, test file has ({}, {})",
            stored.model.d_img(),
            stored.model.d_cap(),
            test.d_img(),
            test.d_cap()
        ))
        .into());
    }
    let protocol = if run.folds > 1 {
        let size = run
            .fold_size
            .ok_or_else(|| UsageError("--fold-size is required with --folds > 1".into()))?;
        EvalProtocol::folded(test.cpi(), run.folds, size)
    } else {
        EvalProtocol::single(test.cpi())
    };
    let (report, _) = evaluate_fold_reports(&stored.model, stored.similarity, &test, &protocol)?;
    print!("{}", report.to_key_values());
    if let Some(out) = &run.out {
        fs::write(out, report_csv(&report))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    #[serde(flatten)]
    pub settings: TrainSettings,
}

pub const SWEEP_HEADER: &str = "neg_size,seed,r1_cap,r5_cap,r10_cap,r1_img,r5_img,r10_img,medr_cap,medr_img,meanr_cap,meanr_img,rsum,best_epoch,status";

fn sweep_one(
    train_set: &PairedFeatureSet,
    val_set: &PairedFeatureSet,
    test_set: &PairedFeatureSet,
    settings: &TrainSettings,
) -> Result<(RetrievalReport, usize)> {
    let config = settings.config()?;
    let outcome = train(train_set, val_set, &config)?;
    let (report, _) = evaluate_fold_reports(
        &outcome.best.model,
        config.model.similarity,
        test_set,
        &EvalProtocol::single(test_set.cpi()),
    )?;
    Ok((report, outcome.best.epoch))
}

pub fn run_sweep(run: &SweepRun, manifest: &Path) -> Result<()> {
    if run.sizes.is_empty() {
        return Err(UsageError("--sizes needs at least one negative-set size".into()).into());
    }
    if run.seeds.is_empty() {
        return Err(UsageError("--seeds needs at least one seed".into()).into());
    }
    RunManifest::new("sweep-negsize", run)?.write(manifest)?;
    let train_set =
        read_features(&run.train).with_context(|| format!("reading {}", run.train.display()))?;
    let val_set =
        read_features(&run.val).with_context(|| format!("reading {}", run.val.display()))?;
    let test_set =
        read_features(&run.test).with_context(|| format!("reading {}", run.test.display()))?;

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for &size in &run.sizes {
        for &seed in &run.seeds {
            let settings = TrainSettings {
                neg_size: size,
                seed,
                ..run.settings.clone()
            };
            match sweep_one(&train_set, &val_set, &test_set, &settings) {
                Ok((report, epoch)) => {
                    let fields: Vec<String> =
                        report.csv_fields().iter().map(f64::to_string).collect();
                    writeln!(csv, "{size},{seed},{},{epoch},ok", fields.join(","))
                        .expect("write to string");
                    eprintln!(
                        "neg_size {size} seed {seed}: R@1 {:.2}",
                        report.caption_retrieval.recall[0]
                    );
                }
                Err(e) => {
                    let msg = e.to_string().replace([',', '\n'], ";");
                    writeln!(csv, "{size},{seed},,,,,,,,,,,,,error: {msg}")
                        .expect("write to string");
                    eprintln!("neg_size {size} seed {seed} failed: {e}");
                }
            }
        }
    }
    fs::write(&run.out, csv).with_context(|| format!("writing {}", run.out.display()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRun {
    pub q: f64,
    pub eps: f64,
    pub m: Vec<u64>,
    pub monte_carlo: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub const ANALYZE_HEADER: &str = "q,m,closed_form,simulated,stderr,min_batch";

pub fn analyze_csv(run: &AnalyzeRun) -> Result<String> {
    if run.monte_carlo != 0 && run.monte_carlo < 1000 {
        return Err(
            UsageError("--monte-carlo needs at least 1000 trials (or 0 to skip)".into()).into(),
        );
    }
    let q_ok = run.q > 0.0 && run.q < 1.0;
    let eps_ok = run.eps > 0.0 && run.eps < 1.0;
    if !q_ok || !eps_ok {
        return Err(UsageError(format!(
            "--q and --eps must lie in (0, 1), got {} and {}",
            run.q, run.eps
        ))
        .into());
    }
    if run.m.contains(&0) {
        return Err(UsageError("batch sizes in --m must be at least 1".into()).into());
    }
    let threshold = min_batch_for(run.q, run.eps)?;
    let mut sizes = run.m.clone();
    if !sizes.contains(&threshold) {
        sizes.push(threshold);
    }
    let mut csv = String::from(ANALYZE_HEADER);
    csv.push('\n');
    for m in sizes {
        let closed = miss_probability(run.q, m)?;
        write!(csv, "{},{m},{closed}", run.q).expect("write to string");
        if run.monte_carlo > 0 {
            let est = monte_carlo_miss(run.q, m, run.monte_carlo, run.seed ^ m)?;
            write!(csv, ",{},{}", est.probability, est.stderr).expect("write to string");
        } else {
            csv.push_str(",,");
        }
        writeln!(csv, ",{}", u8::from(m == threshold)).expect("write to string");
    }
    Ok(csv)
}

pub fn run_analyze(run: &AnalyzeRun, manifest: &Path) -> Result<()> {
    let csv = analyze_csv(run)?;
    RunManifest::new("analyze", run)?.write(manifest)?;
    match &run.out {
        Some(out) => fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?,
        None => print!("{csv}"),
    }
    eprintln!(
        "smallest batch with miss probability below {}: {}",
        run.eps,
        min_batch_for(run.q, run.eps)?
    );
    Ok(())
}
