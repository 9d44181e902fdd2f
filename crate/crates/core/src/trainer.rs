//! The training loop: sampled steps, loss gradients, Adam updates, periodic
//! validation and best-snapshot selection by recall sum.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::PairedFeatureSet;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalProtocol, RetrievalReport};
use crate::loss::{loss_gradients, LossConfig, LossKind};
use crate::model::{ProjectionModel, SimilarityKind};
use crate::optimizer::{AdamConfig, AdamState, LrSchedule};
use crate::sampler::{epoch_plan, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub similarity: SimilarityKind,
    pub normalize_image: bool,
    pub normalize_caption: bool,
    pub abs_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            similarity: SimilarityKind::InnerProduct,
            normalize_image: true,
            normalize_caption: true,
            abs_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Train with SH before this epoch and with `loss.kind` from it on.
    pub curriculum_switch_epoch: Option<usize>,
    /// Validate after every `eval_every` epochs (and after the last one).
    pub eval_every: usize,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            curriculum_switch_epoch: None,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sampler.validate()?;
        self.schedule.validate()?;
        if self.model.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(s) = self.curriculum_switch_epoch {
            if s == 0 || s >= self.schedule.total_epochs {
                return Err(Error::Config(format!(
                    "curriculum switch epoch {s} must lie in [1, {})",
                    self.schedule.total_epochs
                )));
            }
        }
        Ok(())
    }
}

/// Loss kind in effect at `epoch`.
pub fn apply_curriculum(config: &TrainConfig, epoch: usize) -> LossKind {
    match config.curriculum_switch_epoch {
        Some(switch) if epoch < switch => LossKind::SumOfHinges,
        _ => config.loss.kind,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub model: ProjectionModel,
    pub report: RetrievalReport,
    pub rsum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss per anchor pair over the epoch.
    pub train_loss: f64,
    /// Validation report, when the epoch was evaluated.
    pub report: Option<RetrievalReport>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Snapshot,
    pub trace: TrainingTrace,
    /// Parameters after the final epoch.
    pub final_model: ProjectionModel,
}

/// A failed run and the epochs it completed.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub trace: TrainingTrace,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} completed epochs)",
            self.error,
            self.trace.records.len()
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            trace: TrainingTrace::default(),
        }
    }
}

/// Model initialized from `config.seed`, sized for `data`.
pub fn initial_model(data: &PairedFeatureSet, config: &TrainConfig) -> Result<ProjectionModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.model;
    Ok(
        ProjectionModel::random(data.d_img(), data.d_cap(), m.dim, &mut rng)?.with_flags(
            m.normalize_image,
            m.normalize_caption,
            m.abs_embeddings,
        ),
    )
}

pub fn train(
    train_set: &PairedFeatureSet,
    val_set: &PairedFeatureSet,
    config: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    let model = initial_model(train_set, config)?;
    train_from(model, train_set, val_set, config)
}

/// Trains starting from `model` instead of a fresh initialization.
pub fn train_from(
    mut model: ProjectionModel,
    train_set: &PairedFeatureSet,
    val_set: &PairedFeatureSet,
    config: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    if train_set.n_pairs() < config.sampler.batch_size {
        return Err(Error::DatasetTooSmall(format!(
            "{} training pairs for batch size {}",
            train_set.n_pairs(),
            config.sampler.batch_size
        ))
        .into());
    }
    if val_set.n_images() < 2 {
        return Err(Error::DatasetTooSmall("validation needs at least 2 images".into()).into());
    }
    if (model.d_img(), model.d_cap()) != (train_set.d_img(), train_set.d_cap())
        || (val_set.d_img(), val_set.d_cap()) != (train_set.d_img(), train_set.d_cap())
    {
        return Err(Error::Config(
            "model, training and validation feature dimensions disagree".into(),
        )
        .into());
    }

    let kind = config.model.similarity;
    let protocol = EvalProtocol::single(val_set.cpi());
    let total = config.schedule.total_epochs;
    let mut adam = {
        let [a, b] = model.params_mut();
        AdamState::new(config.adam, &[&*a, &*b])
    };
    let mut trace = TrainingTrace::default();
    let mut best: Option<Snapshot> = None;

    for epoch in 0..total {
        let started = Instant::now();
        let result = (|| -> Result<EpochRecord> {
            let lr = config.schedule.lr_at(epoch)?;
            let loss_cfg = LossConfig {
                kind: apply_curriculum(config, epoch),
                ..config.loss
            };
            let plan = epoch_plan(train_set.n_pairs(), &config.sampler, epoch as u64)?;
            let mut loss_sum = 0.0;
            let mut anchors_seen = 0usize;
            for step in &plan {
                let (members, anchor_pos, pool_pos) = step.union();
                let (images, captions) = train_set.gather_pairs(&members);
                let g = loss_gradients(
                    &model,
                    kind,
                    images.view(),
                    captions.view(),
                    &anchor_pos,
                    &pool_pos,
                    &loss_cfg,
                )?;
                if !g.loss.total_loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
                }
                loss_sum += g.loss.per_pair_losses.iter().sum::<f64>();
                anchors_seen += anchor_pos.len();
                adam.step(&mut model.params_mut(), &[&g.grad_img, &g.grad_cap], lr)?;
            }
            let evaluate_now = (epoch + 1) % config.eval_every == 0 || epoch + 1 == total;
            let report = if evaluate_now {
                Some(evaluate(&model, kind, val_set, &protocol)?)
            } else {
                None
            };
            Ok(EpochRecord {
                epoch,
                train_loss: loss_sum / anchors_seen as f64,
                report,
                lr,
                seconds: 0.0,
            })
        })();
        let mut record = match result {
            Ok(r) => r,
            Err(error) => return Err(TrainFailure { error, trace }),
        };
        record.seconds = started.elapsed().as_secs_f64();
        if let Some(report) = record.report {
            if best.as_ref().is_none_or(|b| report.rsum > b.rsum) {
                best = Some(Snapshot {
                    epoch,
                    model: model.clone(),
                    report,
                    rsum: report.rsum,
                });
            }
        }
        trace.records.push(record);
    }

    Ok(TrainOutcome {
        best: best.expect("the last epoch is always evaluated"),
        trace,
        final_model: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use ndarray::Array2;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                dim: 8,
                ..Default::default()
            },
            sampler: SamplerConfig {
                batch_size: 16,
                neg_pool_size: 16,
                ..Default::default()
            },
            schedule: LrSchedule {
                base_lr: 0.01,
                drop_epoch: 3,
                drop_factor: 10.0,
                total_epochs: 4,
            },
            ..Default::default()
        }
    }

    fn tiny_data(seed: u64, n_images: usize) -> PairedFeatureSet {
        generate(&SyntheticSpec {
            n_images,
            cpi: 2,
            latent_dim: 4,
            d_img: 8,
            d_cap: 6,
            noise_sigma: 0.05,
            seed,
            basis_seed: Some(1),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn curriculum_switch() {
        let mut c = tiny_config();
        c.schedule.total_epochs = 10;
        c.curriculum_switch_epoch = Some(5);
        assert_eq!(apply_curriculum(&c, 3), LossKind::SumOfHinges);
        assert_eq!(apply_curriculum(&c, 5), LossKind::MaxOfHinges);
        c.curriculum_switch_epoch = None;
        assert!((0..10).all(|e| apply_curriculum(&c, e) == LossKind::MaxOfHinges));
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny_config();
        c.schedule.total_epochs = 0;
        c.schedule.drop_epoch = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.curriculum_switch_epoch = Some(4);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.curriculum_switch_epoch = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let mut c = tiny_config();
        c.schedule.total_epochs = 0;
        c.schedule.drop_epoch = 0;
        let err = train(&tiny_data(1, 40), &tiny_data(2, 10), &c).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
    }

    #[test]
    fn trace_has_one_record_per_epoch_and_best_has_max_rsum() {
        let c = TrainConfig {
            eval_every: 1,
            ..tiny_config()
        };
        let out = train(&tiny_data(1, 40), &tiny_data(2, 10), &c).unwrap();
        assert_eq!(out.trace.records.len(), 4);
        let rsums: Vec<f64> = out
            .trace
            .records
            .iter()
            .map(|r| r.report.unwrap().rsum)
            .collect();
        assert!(rsums.iter().all(|&r| r <= out.best.rsum));
        let first_best = rsums.iter().position(|&r| r == out.best.rsum).unwrap();
        assert_eq!(out.best.epoch, first_best);
        let recalls: f64 = out
            .best
            .report
            .caption_retrieval
            .recall
            .iter()
            .chain(&out.best.report.image_retrieval.recall)
            .sum();
        assert!((out.best.rsum - recalls).abs() < 1e-9);
        assert!(out.trace.records.iter().all(|r| r.train_loss.is_finite()));
        assert_eq!(out.trace.records[3].lr, 0.001);
    }

    #[test]
    fn eval_every_skips_epochs_but_always_evaluates_last() {
        let c = TrainConfig {
            eval_every: 3,
            ..tiny_config()
        };
        let out = train(&tiny_data(1, 40), &tiny_data(2, 10), &c).unwrap();
        let evaluated: Vec<bool> = out
            .trace
            .records
            .iter()
            .map(|r| r.report.is_some())
            .collect();
        assert_eq!(evaluated, vec![false, false, true, true]);
    }

    #[test]
    fn training_is_deterministic() {
        let c = tiny_config();
        let (tr, va) = (tiny_data(1, 40), tiny_data(2, 10));
        let a = train(&tr, &va, &c).unwrap();
        let b = train(&tr, &va, &c).unwrap();
        let strip = |t: &TrainingTrace| {
            t.records
                .iter()
                .map(|r| (r.train_loss.to_bits(), r.report))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.trace), strip(&b.trace));
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn separated_data_leaves_parameters_unchanged() {
        // Orthonormal one-hot features: positives score 1, negatives 0.
        let n = 8;
        let eye: Vec<f32> = Array2::<f32>::eye(n).iter().copied().collect();
        let data = PairedFeatureSet::new(n, n, n, 1, eye.clone(), eye).unwrap();
        let model = ProjectionModel::new(Array2::eye(n), Array2::eye(n)).unwrap();
        let c = TrainConfig {
            model: ModelConfig {
                dim: n,
                ..Default::default()
            },
            sampler: SamplerConfig {
                batch_size: 4,
                neg_pool_size: 4,
                ..Default::default()
            },
            schedule: LrSchedule {
                total_epochs: 3,
                drop_epoch: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train_from(model.clone(), &data, &data, &c).unwrap();
        assert!(out.trace.records.iter().all(|r| r.train_loss == 0.0));
        assert_eq!(out.final_model, model);
        assert_eq!(out.best.epoch, 0);
    }

    #[test]
    fn mh_with_two_element_pools_matches_sh() {
        let (tr, va) = (tiny_data(1, 40), tiny_data(2, 10));
        let base = TrainConfig {
            sampler: SamplerConfig {
                batch_size: 2,
                neg_pool_size: 2,
                ..Default::default()
            },
            schedule: LrSchedule {
                total_epochs: 2,
                drop_epoch: 1,
                base_lr: 0.01,
                drop_factor: 10.0,
            },
            ..tiny_config()
        };
        let sh = TrainConfig {
            loss: LossConfig::new(LossKind::SumOfHinges, 0.2),
            ..base.clone()
        };
        let mh = TrainConfig {
            loss: LossConfig::new(LossKind::MaxOfHinges, 0.2),
            ..base
        };
        let a = train(&tr, &va, &sh).unwrap();
        let b = train(&tr, &va, &mh).unwrap();
        assert_eq!(a.final_model, b.final_model);
        let losses = |o: &TrainOutcome| {
            o.trace
                .records
                .iter()
                .map(|r| r.train_loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn too_small_training_set_is_rejected() {
        let c = TrainConfig {
            sampler: SamplerConfig {
                batch_size: 128,
                neg_pool_size: 128,
                ..Default::default()
            },
            ..tiny_config()
        };
        let err = train(&tiny_data(1, 20), &tiny_data(2, 10), &c).unwrap_err();
        assert!(matches!(err.error, Error::DatasetTooSmall(_)));
    }
}
