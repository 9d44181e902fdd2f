//! Hinge-based triplet ranking losses over a similarity matrix.
//!
//! The matrix `S` is square: row `m` is image `m`, column `n` is caption `n`,
//! and `S[k][k]` scores the positive pair `k`. For an anchor `k` and a negative
//! `j` the two clipped violations are
//!
//! ```text
//! caption direction:  [α - S[k][k] + S[k][j]]₊   (image k queries captions)
//! image direction:    [α - S[k][k] + S[j][k]]₊   (caption k queries images)
//! ```
//!
//! * **SH** sums the violations over all negatives in each direction.
//! * **MH** keeps only the largest violation in each direction, so all the
//!   gradient goes to the hardest negative.
//! * **WEIGHTED** takes a softmax-weighted average of the positive violations
//!   with temperature `τ`; it tends to MH as `τ → 0` and to the plain mean of
//!   the positive violations as `τ → ∞`.
//!
//! Losses are averaged over anchors. The hinge is treated as inactive at
//! exactly zero violation, and MH ties go to the lowest negative index.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{similarity_backward, similarity_matrix, ProjectionModel, Side, SimilarityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    SumOfHinges,
    MaxOfHinges,
    Weighted,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::SumOfHinges => "sh",
            LossKind::MaxOfHinges => "mh",
            LossKind::Weighted => "weighted",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sh" => Ok(LossKind::SumOfHinges),
            "mh" => Ok(LossKind::MaxOfHinges),
            "weighted" => Ok(LossKind::Weighted),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub kind: LossKind,
    /// Softmax temperature, only used by [`LossKind::Weighted`].
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            kind: LossKind::MaxOfHinges,
            temperature: 0.05,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind, margin: f64) -> Self {
        Self {
            kind,
            margin,
            ..Self::default()
        }
    }

    pub fn weighted(margin: f64, temperature: f64) -> Self {
        Self {
            kind: LossKind::Weighted,
            margin,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be finite and >= 0, got {}",
                self.margin
            )));
        }
        if self.kind == LossKind::Weighted
            && !(self.temperature > 0.0 && self.temperature.is_finite())
        {
            return Err(Error::Config(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossResult {
    /// Mean of `per_pair_losses`.
    pub total_loss: f64,
    pub per_pair_losses: Vec<f64>,
    /// Per anchor, the row index of the hardest caption negative (MH only).
    pub hardest_caption_index: Option<Vec<usize>>,
    /// Per anchor, the column index of the hardest image negative (MH only).
    pub hardest_image_index: Option<Vec<usize>>,
    /// `∂ total_loss / ∂ S`.
    pub grad_similarity: Array2<f64>,
}

pub fn sh_loss(s: ArrayView2<'_, f64>, margin: f64) -> Result<BatchLossResult> {
    batch_loss(s, &LossConfig::new(LossKind::SumOfHinges, margin))
}

pub fn mh_loss(s: ArrayView2<'_, f64>, margin: f64) -> Result<BatchLossResult> {
    batch_loss(s, &LossConfig::new(LossKind::MaxOfHinges, margin))
}

pub fn weighted_loss(
    s: ArrayView2<'_, f64>,
    margin: f64,
    temperature: f64,
) -> Result<BatchLossResult> {
    batch_loss(s, &LossConfig::weighted(margin, temperature))
}

/// Loss where every pair is an anchor and every other pair is a negative.
pub fn batch_loss(s: ArrayView2<'_, f64>, config: &LossConfig) -> Result<BatchLossResult> {
    let all: Vec<usize> = (0..s.nrows()).collect();
    pool_loss(s, config, &all, &all)
}

/// Loss for the given `anchors`, each compared against every index in
/// `negatives` except itself. Indices refer to rows/columns of `s`.
pub fn pool_loss(
    s: ArrayView2<'_, f64>,
    config: &LossConfig,
    anchors: &[usize],
    negatives: &[usize],
) -> Result<BatchLossResult> {
    config.validate()?;
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::Contract(format!(
            "similarity matrix must be square, got {}x{}",
            n,
            s.ncols()
        )));
    }
    if n < 2 {
        return Err(Error::EmptyNegativeSet(format!(
            "{n}x{n} similarity matrix has no negatives"
        )));
    }
    if anchors.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&bad) = anchors.iter().chain(negatives).find(|&&i| i >= n) {
        return Err(Error::Contract(format!(
            "index {bad} out of range for {n}x{n} similarity matrix"
        )));
    }

    let scale = 1.0 / anchors.len() as f64;
    let mut grad = Array2::<f64>::zeros((n, n));
    let mut per_pair = Vec::with_capacity(anchors.len());
    let track_hardest = config.kind == LossKind::MaxOfHinges;
    let mut hardest_cap = Vec::new();
    let mut hardest_img = Vec::new();

    let mut candidates = Vec::with_capacity(negatives.len());
    let mut violations = Vec::with_capacity(negatives.len());
    let mut dv = Vec::with_capacity(negatives.len());

    for &k in anchors {
        candidates.clear();
        candidates.extend(negatives.iter().copied().filter(|&j| j != k));
        if candidates.is_empty() {
            return Err(Error::EmptyNegativeSet(format!(
                "anchor {k} has no negatives in its pool"
            )));
        }
        let positive = s[[k, k]];
        let mut pair_loss = 0.0;

        for side in [Side::Caption, Side::Image] {
            // Caption direction: row k. Image direction: column k.
            let at = |j: usize| match side {
                Side::Caption => (k, j),
                Side::Image => (j, k),
            };
            violations.clear();
            violations.extend(
                candidates
                    .iter()
                    .map(|&j| config.margin - positive + s[at(j)]),
            );

            let term = direction_term(config, &violations, &mut dv);
            pair_loss += term;
            for (&j, &d) in candidates.iter().zip(&dv) {
                if d != 0.0 {
                    grad[at(j)] += d * scale;
                    grad[[k, k]] -= d * scale;
                }
            }
            if track_hardest {
                let best = argmax_first(&violations);
                match side {
                    Side::Caption => hardest_cap.push(candidates[best]),
                    Side::Image => hardest_img.push(candidates[best]),
                }
            }
        }
        per_pair.push(pair_loss);
    }

    let total_loss = per_pair.iter().sum::<f64>() * scale;
    Ok(BatchLossResult {
        total_loss,
        per_pair_losses: per_pair,
        hardest_caption_index: track_hardest.then_some(hardest_cap),
        hardest_image_index: track_hardest.then_some(hardest_img),
        grad_similarity: grad,
    })
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// One direction's loss from its unclipped violations; writes the derivative
/// with respect to each violation into `dv`.
fn direction_term(config: &LossConfig, violations: &[f64], dv: &mut Vec<f64>) -> f64 {
    dv.clear();
    dv.resize(violations.len(), 0.0);
    match config.kind {
        LossKind::SumOfHinges => {
            let mut sum = 0.0;
            for (v, d) in violations.iter().zip(dv.iter_mut()) {
                if *v > 0.0 {
                    sum += v;
                    *d = 1.0;
                }
            }
            sum
        }
        LossKind::MaxOfHinges => {
            let best = argmax_first(violations);
            let v = violations[best];
            if v > 0.0 {
                dv[best] = 1.0;
                v
            } else {
                0.0
            }
        }
        LossKind::Weighted => {
            let tau = config.temperature;
            let peak = violations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if peak <= 0.0 {
                return 0.0;
            }
            let mut z = 0.0;
            for (v, d) in violations.iter().zip(dv.iter_mut()) {
                if *v > 0.0 {
                    *d = ((v - peak) / tau).exp();
                    z += *d;
                }
            }
            let mut loss = 0.0;
            for (v, d) in violations.iter().zip(dv.iter_mut()) {
                *d /= z;
                loss += *d * v;
            }
            // ∂/∂v_j Σ w v = w_j (1 + (v_j - L) / τ)
            for (v, d) in violations.iter().zip(dv.iter_mut()) {
                if *d != 0.0 {
                    *d *= 1.0 + (v - loss) / tau;
                }
            }
            loss
        }
    }
}

/// Loss value plus gradients with respect to both projection matrices.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: BatchLossResult,
    pub grad_img: Array2<f64>,
    pub grad_cap: Array2<f64>,
}

/// Embeds the pairs in `images`/`captions` (row `k` of each belongs to pair
/// `k`), scores them, evaluates the loss for `anchors` against `negatives` and
/// backpropagates to the projection matrices. Every embedded pair, including
/// pool members that are not anchors, contributes to the gradient.
pub fn loss_gradients(
    model: &ProjectionModel,
    kind: SimilarityKind,
    images: ArrayView2<'_, f64>,
    captions: ArrayView2<'_, f64>,
    anchors: &[usize],
    negatives: &[usize],
    config: &LossConfig,
) -> Result<LossGradients> {
    if images.nrows() != captions.nrows() {
        return Err(Error::Contract(format!(
            "{} image rows but {} caption rows",
            images.nrows(),
            captions.nrows()
        )));
    }
    let img = model.forward(Side::Image, images)?;
    let cap = model.forward(Side::Caption, captions)?;
    let s = similarity_matrix(kind, img.output.view(), cap.output.view())?;
    let loss = pool_loss(s.view(), config, anchors, negatives)?;
    let (grad_f, grad_g) = similarity_backward(
        kind,
        img.output.view(),
        cap.output.view(),
        loss.grad_similarity.view(),
    );
    let grad_img = model.backward(&img, images, grad_f.view());
    let grad_cap = model.backward(&cap, captions, grad_g.view());
    Ok(LossGradients {
        loss,
        grad_img,
        grad_cap,
    })
}
