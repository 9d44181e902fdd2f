//! Mini-batch and negative-pool sampling.
//!
//! Every training step has a set of *anchors* (pairs that receive loss terms)
//! and a *pool* (pairs whose embeddings serve as negative candidates). When the
//! pool is no larger than the batch it is a random subset of the anchors;
//! when it is larger, the anchors are topped up with extra pairs drawn from
//! the rest of the dataset.
//!
//! Randomness comes from `ChaCha8Rng` seeded with the configured seed, using
//! the epoch number as the stream id, so plans are reproducible across
//! platforms and releases of this crate.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub neg_pool_size: usize,
    pub seed: u64,
    /// Draw a fresh permutation every epoch; otherwise epoch 0's order repeats.
    pub shuffle_each_epoch: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            neg_pool_size: 128,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.neg_pool_size < 2 {
            return Err(Error::Config(format!(
                "negative pool size must be at least 2, got {}",
                self.neg_pool_size
            )));
        }
        Ok(())
    }
}

/// The pairs touched by one optimization step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSample {
    pub anchor_indices: Vec<usize>,
    pub pool_indices: Vec<usize>,
}

impl StepSample {
    /// All pairs whose embeddings the step needs: anchors first, then any pool
    /// members that are not anchors. Returns the union together with the
    /// positions of anchors and pool members inside it.
    pub fn union(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut members = self.anchor_indices.clone();
        let mut pool_pos = Vec::with_capacity(self.pool_indices.len());
        for &p in &self.pool_indices {
            match self.anchor_indices.iter().position(|&a| a == p) {
                Some(pos) => pool_pos.push(pos),
                None => {
                    pool_pos.push(members.len());
                    members.push(p);
                }
            }
        }
        let anchor_pos = (0..self.anchor_indices.len()).collect();
        (members, anchor_pos, pool_pos)
    }
}

/// Splits a seeded permutation of `0..n` into the steps of one epoch.
///
/// A trailing batch of a single pair is merged into the previous step, since a
/// lone pair has no negatives.
pub fn epoch_plan(n: usize, config: &SamplerConfig, epoch: u64) -> Result<Vec<StepSample>> {
    if n < 2 {
        return Err(Error::DatasetTooSmall(format!(
            "{n} pairs; at least 2 are needed"
        )));
    }
    config.validate()?;
    if n < config.batch_size {
        return Err(Error::Contract(format!(
            "dataset of {n} pairs is smaller than the batch size {}",
            config.batch_size
        )));
    }
    if n < config.neg_pool_size {
        return Err(Error::DatasetTooSmall(format!(
            "{n} pairs cannot fill a negative pool of {}",
            config.neg_pool_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(if config.shuffle_each_epoch { epoch } else { 0 });
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = order
        .chunks(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }

    // Pool draws use their own stream so the batch order does not depend on
    // the pool size.
    let mut pool_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    pool_rng.set_stream(epoch);

    let pool_size = config.neg_pool_size;
    let mut steps = Vec::with_capacity(batches.len());
    for anchors in batches {
        let pool = if pool_size <= anchors.len() {
            let mut picked = index::sample(&mut pool_rng, anchors.len(), pool_size).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| anchors[i]).collect()
        } else {
            let mut in_batch = vec![false; n];
            for &a in &anchors {
                in_batch[a] = true;
            }
            let outside: Vec<usize> = (0..n).filter(|&i| !in_batch[i]).collect();
            let extra = index::sample(&mut pool_rng, outside.len(), pool_size - anchors.len());
            let mut pool = anchors.clone();
            pool.extend(extra.into_iter().map(|i| outside[i]));
            pool
        };
        steps.push(StepSample {
            anchor_indices: anchors,
            pool_indices: pool,
        });
    }
    Ok(steps)
}

/// Index of the highest-scoring entry other than `positive_index`; ties go to
/// the lowest index.
pub fn hardest_in_pool(scores: &[f64], positive_index: usize) -> Result<usize> {
    if scores.len() < 2 {
        return Err(Error::EmptyNegativeSet(format!(
            "pool of {} has no negative besides the positive",
            scores.len()
        )));
    }
    if positive_index >= scores.len() {
        return Err(Error::Contract(format!(
            "positive index {positive_index} out of range for pool of {}",
            scores.len()
        )));
    }
    let mut best: Option<usize> = None;
    for (j, &s) in scores.iter().enumerate() {
        if j == positive_index {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(j);
        }
    }
    Ok(best.expect("at least one negative"))
}
