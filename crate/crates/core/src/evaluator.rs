//! Bidirectional retrieval metrics: R@K, median rank and mean rank.
//!
//! Ranks are 1-based and optimistic under ties: an item's rank is one plus the
//! number of items scored *strictly* higher. With several ground-truth items
//! (an image's captions) the best-ranked one counts.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::datagen::PairedFeatureSet;
use crate::error::{Error, Result};
use crate::model::{similarity_matrix, ProjectionModel, SimilarityKind};

/// Cutoffs reported as R@K.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Metrics for one retrieval direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionMetrics {
    /// Percentages for each cutoff in [`RECALL_KS`].
    pub recall: [f64; 3],
    pub median_rank: f64,
    pub mean_rank: f64,
}

impl DirectionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = ranks.len() as f64;
        let recall =
            RECALL_KS.map(|k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let mid = sorted.len() / 2;
        let median_rank = if sorted.len() % 2 == 1 {
            sorted[mid] as f64
        } else {
            (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
        };
        let mean_rank = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
        Ok(Self {
            recall,
            median_rank,
            mean_rank,
        })
    }

    fn mean_of(items: &[Self]) -> Self {
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&Self) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            recall: [0, 1, 2].map(|i| avg(&|m: &Self| m.recall[i])),
            median_rank: avg(&|m| m.median_rank),
            mean_rank: avg(&|m| m.mean_rank),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    /// Images as queries, captions as the corpus.
    pub caption_retrieval: DirectionMetrics,
    /// Captions as queries, images as the corpus.
    pub image_retrieval: DirectionMetrics,
    /// Sum of the six recall percentages.
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn new(caption_retrieval: DirectionMetrics, image_retrieval: DirectionMetrics) -> Self {
        let rsum = caption_retrieval
            .recall
            .iter()
            .chain(&image_retrieval.recall)
            .sum();
        Self {
            caption_retrieval,
            image_retrieval,
            rsum,
        }
    }

    /// Field-wise arithmetic mean.
    pub fn mean(reports: &[Self]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cap: Vec<_> = reports.iter().map(|r| r.caption_retrieval).collect();
        let img: Vec<_> = reports.iter().map(|r| r.image_retrieval).collect();
        let mut out = Self::new(
            DirectionMetrics::mean_of(&cap),
            DirectionMetrics::mean_of(&img),
        );
        out.rsum = reports.iter().map(|r| r.rsum).sum::<f64>() / reports.len() as f64;
        Ok(out)
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (prefix, m) in [
            ("cap", &self.caption_retrieval),
            ("img", &self.image_retrieval),
        ] {
            for (k, r) in RECALL_KS.iter().zip(m.recall) {
                out.push_str(&format!("r{k}_{prefix}={r}\n"));
            }
            out.push_str(&format!("medr_{prefix}={}\n", m.median_rank));
            out.push_str(&format!("meanr_{prefix}={}\n", m.mean_rank));
        }
        out.push_str(&format!("rsum={}\n", self.rsum));
        out
    }

    pub const CSV_HEADER: &'static str =
        "r1_cap,r5_cap,r10_cap,r1_img,r5_img,r10_img,medr_cap,medr_img,meanr_cap,meanr_img,rsum";

    /// Values in the order of [`RetrievalReport::CSV_HEADER`].
    pub fn csv_fields(&self) -> [f64; 11] {
        let (c, i) = (&self.caption_retrieval, &self.image_retrieval);
        [
            c.recall[0],
            c.recall[1],
            c.recall[2],
            i.recall[0],
            i.recall[1],
            i.recall[2],
            c.median_rank,
            i.median_rank,
            c.mean_rank,
            i.mean_rank,
            self.rsum,
        ]
    }
}

/// How a test set is laid out and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub cpi: usize,
    pub folds: usize,
    /// Images per fold; ignored when `folds == 1`.
    pub fold_size: usize,
}

impl EvalProtocol {
    pub fn single(cpi: usize) -> Self {
        Self {
            cpi,
            folds: 1,
            fold_size: 0,
        }
    }

    pub fn folded(cpi: usize, folds: usize, fold_size: usize) -> Self {
        Self {
            cpi,
            folds,
            fold_size,
        }
    }
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self::single(5)
    }
}

/// Best 1-based rank among `positives`, counting only strictly greater scores.
pub fn rank_of_positive(scores: ArrayView1<'_, f64>, positives: &[usize]) -> Result<usize> {
    if positives.is_empty() {
        return Err(Error::Contract("no ground-truth items for query".into()));
    }
    let mut best = usize::MAX;
    for &p in positives {
        let Some(&target) = scores.get(p) else {
            return Err(Error::Contract(format!(
                "positive index {p} out of range for {} scores",
                scores.len()
            )));
        };
        let above = scores.iter().filter(|&&s| s > target).count();
        best = best.min(above + 1);
    }
    Ok(best)
}

/// Report from an `n_images × (n_images·cpi)` score matrix whose rows are image
/// queries and whose column block `[j·cpi, (j+1)·cpi)` holds image `j`'s
/// captions.
pub fn report_from_scores(scores: ArrayView2<'_, f64>, cpi: usize) -> Result<RetrievalReport> {
    let n_img = scores.nrows();
    if n_img == 0 || cpi == 0 {
        return Err(Error::EmptyBatch);
    }
    if scores.ncols() != n_img * cpi {
        return Err(Error::Contract(format!(
            "{} captions for {n_img} images at {cpi} captions per image",
            scores.ncols()
        )));
    }
    let cap_ranks: Vec<usize> = (0..n_img)
        .into_par_iter()
        .map(|i| {
            let positives: Vec<usize> = (i * cpi..(i + 1) * cpi).collect();
            rank_of_positive(scores.row(i), &positives)
        })
        .collect::<Result<_>>()?;
    let img_ranks: Vec<usize> = (0..n_img * cpi)
        .into_par_iter()
        .map(|k| rank_of_positive(scores.column(k), &[k / cpi]))
        .collect::<Result<_>>()?;
    Ok(RetrievalReport::new(
        DirectionMetrics::from_ranks(&cap_ranks)?,
        DirectionMetrics::from_ranks(&img_ranks)?,
    ))
}

/// Embeds a whole set and returns its image-by-caption score matrix.
pub fn score_set(
    model: &ProjectionModel,
    kind: SimilarityKind,
    set: &PairedFeatureSet,
) -> Result<Array2<f64>> {
    let f = model.embed_images(set.image_matrix().view())?;
    let g = model.embed_captions(set.caption_matrix().view())?;
    similarity_matrix(kind, f.view(), g.view())
}

/// Single-pass evaluation over the whole set.
pub fn evaluate(
    model: &ProjectionModel,
    kind: SimilarityKind,
    set: &PairedFeatureSet,
    protocol: &EvalProtocol,
) -> Result<RetrievalReport> {
    if protocol.cpi != set.cpi() {
        return Err(Error::Contract(format!(
            "protocol expects {} captions per image, data has {}",
            protocol.cpi,
            set.cpi()
        )));
    }
    report_from_scores(score_set(model, kind, set)?.view(), set.cpi())
}

/// Evaluates `protocol.folds` contiguous folds of `protocol.fold_size` images
/// independently and averages the reports. One fold means the whole set.
pub fn evaluate_folds(
    model: &ProjectionModel,
    kind: SimilarityKind,
    set: &PairedFeatureSet,
    protocol: &EvalProtocol,
) -> Result<RetrievalReport> {
    Ok(evaluate_fold_reports(model, kind, set, protocol)?.0)
}

/// Like [`evaluate_folds`] but also returns each fold's report.
pub fn evaluate_fold_reports(
    model: &ProjectionModel,
    kind: SimilarityKind,
    set: &PairedFeatureSet,
    protocol: &EvalProtocol,
) -> Result<(RetrievalReport, Vec<RetrievalReport>)> {
    if protocol.folds == 0 {
        return Err(Error::Contract("at least one fold is required".into()));
    }
    if protocol.folds == 1 {
        let r = evaluate(model, kind, set, protocol)?;
        return Ok((r, vec![r]));
    }
    if protocol.fold_size == 0 {
        return Err(Error::Contract("fold size must be positive".into()));
    }
    let needed = protocol.folds.saturating_mul(protocol.fold_size);
    if needed > set.n_images() {
        return Err(Error::Contract(format!(
            "{} folds of {} images need {needed} images, set has {}",
            protocol.folds,
            protocol.fold_size,
            set.n_images()
        )));
    }
    let reports = (0..protocol.folds)
        .map(|f| {
            let fold = set.slice_images(f * protocol.fold_size..(f + 1) * protocol.fold_size)?;
            evaluate(model, kind, &fold, protocol)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((RetrievalReport::mean(&reports)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_examples() {
        assert_eq!(
            rank_of_positive(array![0.9, 0.95, 0.1].view(), &[0]).unwrap(),
            2
        );
        assert_eq!(
            rank_of_positive(array![0.5, 0.5, 0.5].view(), &[2]).unwrap(),
            1
        );
        assert_eq!(
            rank_of_positive(array![0.1, 0.2, 0.9, 0.8].view(), &[0, 3]).unwrap(),
            2
        );
        assert!(matches!(
            rank_of_positive(array![0.1].view(), &[]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            rank_of_positive(array![0.1].view(), &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn three_by_three_report() {
        let s = array![[0.9, 0.95, 0.1], [0.3, 0.8, 0.5], [0.7, 0.4, 0.6]];
        let r = report_from_scores(s.view(), 1).unwrap();
        let c = r.caption_retrieval;
        assert!((c.recall[0] - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.median_rank, 2.0);
        assert!((c.mean_rank - 5.0 / 3.0).abs() < 1e-12);
        // Ranks (2, 1, 2): every query is within the top 2.
        assert_eq!(c.recall[1], 100.0);
    }

    #[test]
    fn identity_is_perfect() {
        let s = Array2::<f64>::eye(4);
        let r = report_from_scores(s.view(), 1).unwrap();
        assert_eq!(r.rsum, 600.0);
        assert_eq!(r.caption_retrieval.median_rank, 1.0);
        assert_eq!(r.image_retrieval.mean_rank, 1.0);
    }

    #[test]
    fn even_count_median_averages_middle() {
        let m = DirectionMetrics::from_ranks(&[1, 4, 2, 9]).unwrap();
        assert_eq!(m.median_rank, 3.0);
        assert_eq!(m.mean_rank, 4.0);
    }

    #[test]
    fn mismatched_caption_count_is_rejected() {
        let s = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            report_from_scores(s.view(), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fold_mean_is_fieldwise() {
        let a = report_from_scores(Array2::<f64>::eye(2).view(), 1).unwrap();
        let b = report_from_scores(array![[0.0, 1.0], [1.0, 0.0]].view(), 1).unwrap();
        let m = RetrievalReport::mean(&[a, b]).unwrap();
        assert_eq!(m.caption_retrieval.recall[0], 50.0);
        assert_eq!(m.rsum, (a.rsum + b.rsum) / 2.0);
    }

    /// Sort-based ranking, independent of the counting implementation.
    fn sorted_rank(scores: &[f64], positives: &[usize]) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // Descending score; ties put ground-truth items first (optimistic).
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| positives.contains(&b).cmp(&positives.contains(&a)))
        });
        order.iter().position(|i| positives.contains(i)).unwrap() + 1
    }

    #[test]
    fn ranks_match_sort_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(1..30);
            // Coarse values to force ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..6) as f64 / 5.0)
                .collect();
            let n_pos = rng.random_range(1..=n.min(5));
            let positives: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_pos).into_vec();
            let arr = Array1::from(scores.clone());
            assert_eq!(
                rank_of_positive(arr.view(), &positives).unwrap(),
                sorted_rank(&scores, &positives)
            );
        }
    }
}
