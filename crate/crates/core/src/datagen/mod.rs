//! Paired image/caption feature sets and a synthetic generator with a planted
//! latent structure.
//!
//! Every pair shares a latent unit vector `z` in `R^L`. Image features are
//! `A z + σ ε` and each caption feature is `B z + σ ε'`, where `A` and `B` have
//! orthonormal columns, so the linear model `W_f = A`, `W_g = B` with
//! normalization recovers `z` exactly when `σ = 0`. A fraction of the images is
//! grouped into *confuser clusters* whose latents sit within a small angle of a
//! shared center; those pairs are each other's hard negatives.

mod vsef;

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use vsef::{read_features, write_features, MAGIC, VERSION};

/// Image features with `cpi` captions per image. Caption rows
/// `[j·cpi, (j+1)·cpi)` belong to image `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatureSet {
    n_images: usize,
    d_img: usize,
    d_cap: usize,
    cpi: usize,
    image_features: Vec<f32>,
    caption_features: Vec<f32>,
}

impl PairedFeatureSet {
    /// Builds a set from row-major feature buffers.
    pub fn new(
        n_images: usize,
        d_img: usize,
        d_cap: usize,
        cpi: usize,
        image_features: Vec<f32>,
        caption_features: Vec<f32>,
    ) -> Result<Self> {
        if n_images == 0 || d_img == 0 || d_cap == 0 || cpi == 0 {
            return Err(Error::Config(format!(
                "feature set dimensions must be positive (n_images={n_images}, d_img={d_img}, d_cap={d_cap}, cpi={cpi})"
            )));
        }
        if image_features.len() != n_images * d_img {
            return Err(Error::Config(format!(
                "expected {} image feature values, got {}",
                n_images * d_img,
                image_features.len()
            )));
        }
        if caption_features.len() != n_images * cpi * d_cap {
            return Err(Error::Config(format!(
                "expected {} caption feature values, got {}",
                n_images * cpi * d_cap,
                caption_features.len()
            )));
        }
        if image_features
            .iter()
            .chain(&caption_features)
            .any(|x| !x.is_finite())
        {
            return Err(Error::DegenerateInput(
                "feature set contains non-finite values".into(),
            ));
        }
        Ok(Self {
            n_images,
            d_img,
            d_cap,
            cpi,
            image_features,
            caption_features,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_captions(&self) -> usize {
        self.n_images * self.cpi
    }

    /// One training pair per caption.
    pub fn n_pairs(&self) -> usize {
        self.n_captions()
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn d_cap(&self) -> usize {
        self.d_cap
    }

    pub fn cpi(&self) -> usize {
        self.cpi
    }

    pub fn image_features(&self) -> &[f32] {
        &self.image_features
    }

    pub fn caption_features(&self) -> &[f32] {
        &self.caption_features
    }

    /// Image that caption (pair) `k` describes.
    pub fn image_of_pair(&self, k: usize) -> usize {
        k / self.cpi
    }

    pub fn image_row(&self, j: usize) -> &[f32] {
        &self.image_features[j * self.d_img..(j + 1) * self.d_img]
    }

    pub fn caption_row(&self, k: usize) -> &[f32] {
        &self.caption_features[k * self.d_cap..(k + 1) * self.d_cap]
    }

    pub fn image_matrix(&self) -> Array2<f64> {
        to_f64(&self.image_features, self.n_images, self.d_img)
    }

    pub fn caption_matrix(&self) -> Array2<f64> {
        to_f64(&self.caption_features, self.n_captions(), self.d_cap)
    }

    /// Image and caption feature rows for the given pairs, row `r` of each
    /// belonging to `pairs[r]`.
    pub fn gather_pairs(&self, pairs: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let mut images = Array2::zeros((pairs.len(), self.d_img));
        let mut captions = Array2::zeros((pairs.len(), self.d_cap));
        for (r, &k) in pairs.iter().enumerate() {
            for (dst, &src) in images
                .row_mut(r)
                .iter_mut()
                .zip(self.image_row(self.image_of_pair(k)))
            {
                *dst = f64::from(src);
            }
            for (dst, &src) in captions.row_mut(r).iter_mut().zip(self.caption_row(k)) {
                *dst = f64::from(src);
            }
        }
        (images, captions)
    }

    /// The images in `range` together with their captions.
    pub fn slice_images(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.n_images {
            return Err(Error::Contract(format!(
                "image range {range:?} invalid for {} images",
                self.n_images
            )));
        }
        let img = self.image_features[range.start * self.d_img..range.end * self.d_img].to_vec();
        let row = self.cpi * self.d_cap;
        let cap = self.caption_features[range.start * row..range.end * row].to_vec();
        Self::new(range.len(), self.d_img, self.d_cap, self.cpi, img, cap)
    }
}

fn to_f64(values: &[f32], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), values.iter().map(|&x| f64::from(x)).collect())
        .expect("buffer length checked at construction")
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub cpi: usize,
    pub latent_dim: usize,
    pub d_img: usize,
    pub d_cap: usize,
    pub noise_sigma: f64,
    pub confuser_cluster_size: usize,
    pub confuser_fraction: f64,
    /// Maximum angle between a cluster member's latent and the cluster center.
    pub confuser_angle_deg: f64,
    pub seed: u64,
    /// Seed for the projections `A` and `B`. Sets generated with the same basis
    /// seed share a latent geometry and can serve as train/val/test splits.
    /// Defaults to `seed`.
    pub basis_seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 1000,
            cpi: 5,
            latent_dim: 16,
            d_img: 64,
            d_cap: 48,
            noise_sigma: 0.05,
            confuser_cluster_size: 4,
            confuser_fraction: 0.0,
            confuser_angle_deg: 10.0,
            seed: 0,
            basis_seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_images == 0 {
            return fail("n_images must be positive".into());
        }
        if self.cpi == 0 {
            return fail("captions per image must be positive".into());
        }
        if self.latent_dim == 0 || self.d_img == 0 || self.d_cap == 0 {
            return fail("latent and feature dimensions must be positive".into());
        }
        if self.latent_dim > self.d_img.min(self.d_cap) {
            return fail(format!(
                "latent dimension {} exceeds feature dimensions ({}, {})",
                self.latent_dim, self.d_img, self.d_cap
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.confuser_cluster_size == 0 {
            return fail("confuser cluster size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return fail(format!(
                "confuser fraction must lie in [0, 1], got {}",
                self.confuser_fraction
            ));
        }
        if !(0.0..=180.0).contains(&self.confuser_angle_deg) {
            return fail(format!(
                "confuser angle must lie in [0, 180], got {}",
                self.confuser_angle_deg
            ));
        }
        Ok(())
    }

    /// Number of confuser clusters: the clustered image count rounded down to
    /// whole clusters.
    pub fn n_clusters(&self) -> usize {
        let clustered = (self.confuser_fraction * self.n_images as f64).floor() as usize;
        clustered / self.confuser_cluster_size
    }

    /// The orthonormal-column image and caption projections `A` (`d_img × L`)
    /// and `B` (`d_cap × L`).
    pub fn bases(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.basis_seed.unwrap_or(self.seed));
        rng.set_stream(1);
        let a = orthonormal_columns(self.d_img, self.latent_dim, &mut rng);
        let b = orthonormal_columns(self.d_cap, self.latent_dim, &mut rng);
        Ok((a, b))
    }
}

/// Draws a Gaussian matrix and orthonormalizes its columns with modified
/// Gram-Schmidt.
fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut m: Array2<f64> =
            Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal));
        let mut ok = true;
        for c in 0..cols {
            for prev in 0..c {
                let proj = m.column(prev).dot(&m.column(c));
                let p = m.column(prev).to_owned();
                m.column_mut(c).scaled_add(-proj, &p);
            }
            let norm = m.column(c).dot(&m.column(c)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            m.column_mut(c).mapv_inplace(|x| x / norm);
        }
        if ok {
            return m;
        }
    }
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A unit vector at angle `theta` (radians) from the unit vector `center`, in a
/// uniformly random direction.
fn rotate_away<R: Rng + ?Sized>(center: &[f64], theta: f64, rng: &mut R) -> Vec<f64> {
    if center.len() == 1 {
        return center.to_vec();
    }
    loop {
        let mut u = random_unit(center.len(), rng);
        let along: f64 = u.iter().zip(center).map(|(a, b)| a * b).sum();
        for (ui, ci) in u.iter_mut().zip(center) {
            *ui -= along * ci;
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        return center
            .iter()
            .zip(&u)
            .map(|(c, ui)| theta.cos() * c + theta.sin() * ui / norm)
            .collect();
    }
}

/// The generated features plus the ground truth behind them.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub features: PairedFeatureSet,
    /// Unit latent of every image, `n_images × L`.
    pub latents: Array2<f64>,
    /// Cluster id of each image, `None` for unclustered images.
    pub cluster_of: Vec<Option<usize>>,
}

/// Generates a feature set; see [`generate_with_truth`].
pub fn generate(spec: &SyntheticSpec) -> Result<PairedFeatureSet> {
    Ok(generate_with_truth(spec)?.features)
}

/// Generates a feature set and returns the latents and cluster assignment
/// used to produce it. Image order is a seeded shuffle, so cluster members
/// are scattered and contiguous folds are random subsets.
pub fn generate_with_truth(spec: &SyntheticSpec) -> Result<GeneratedSet> {
    spec.validate()?;
    let (a, b) = spec.bases()?;
    let n = spec.n_images;
    let l = spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n_clusters = spec.n_clusters();
    let theta_max = spec.confuser_angle_deg.to_radians();
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut cluster_of = Vec::with_capacity(n);
    for c in 0..n_clusters {
        let center = random_unit(l, &mut rng);
        for _ in 0..spec.confuser_cluster_size {
            let theta = rng.random_range(0.0..=theta_max);
            latents.push(rotate_away(&center, theta, &mut rng));
            cluster_of.push(Some(c));
        }
    }
    while latents.len() < n {
        latents.push(random_unit(l, &mut rng));
        cluster_of.push(None);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let latents: Vec<Vec<f64>> = order.iter().map(|&i| latents[i].clone()).collect();
    let cluster_of: Vec<Option<usize>> = order.iter().map(|&i| cluster_of[i]).collect();

    let z = Array2::from_shape_fn((n, l), |(i, j)| latents[i][j]);
    let clean_img = z.dot(&a.t());
    let clean_cap = z.dot(&b.t());
    let sigma = spec.noise_sigma;
    let mut noise = |x: f64| -> f32 {
        let e: f64 = rng.sample(StandardNormal);
        (x + sigma * e) as f32
    };
    let mut image_features = Vec::with_capacity(n * spec.d_img);
    for &x in clean_img.iter() {
        image_features.push(noise(x));
    }
    let mut caption_features = Vec::with_capacity(n * spec.cpi * spec.d_cap);
    for row in clean_cap.rows() {
        for _ in 0..spec.cpi {
            for &x in row.iter() {
                caption_features.push(noise(x));
            }
        }
    }
    let features = PairedFeatureSet::new(
        n,
        spec.d_img,
        spec.d_cap,
        spec.cpi,
        image_features,
        caption_features,
    )?;
    Ok(GeneratedSet {
        features,
        latents: z,
        cluster_of,
    })
}

/// Cosine of every pair of rows; used to inspect latent geometry.
pub fn latent_cosines(latents: ArrayView2<'_, f64>) -> Array2<f64> {
    latents.dot(&latents.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{evaluate, EvalProtocol};
    use crate::model::{ProjectionModel, SimilarityKind};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_images: 60,
            cpi: 2,
            latent_dim: 6,
            d_img: 10,
            d_cap: 8,
            noise_sigma: 0.0,
            confuser_fraction: 0.4,
            confuser_cluster_size: 4,
            confuser_angle_deg: 5.0,
            seed: 3,
            basis_seed: None,
        }
    }

    #[test]
    fn bases_are_orthonormal() {
        let (a, b) = small_spec().bases().unwrap();
        for m in [a, b] {
            let gram = m.t().dot(&m);
            for ((i, j), v) in gram.indexed_iter() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small_spec();
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = SyntheticSpec {
            seed: 4,
            ..s.clone()
        };
        assert_ne!(generate(&s).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn shared_basis_seed_shares_projections() {
        let s = small_spec();
        let split = SyntheticSpec {
            seed: 99,
            basis_seed: Some(3),
            ..s.clone()
        };
        assert_eq!(s.bases().unwrap(), split.bases().unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticSpec {
                n_images: 0,
                ..small_spec()
            },
            SyntheticSpec {
                latent_dim: 9,
                ..small_spec()
            },
            SyntheticSpec {
                confuser_fraction: 1.5,
                ..small_spec()
            },
            SyntheticSpec {
                confuser_cluster_size: 0,
                ..small_spec()
            },
            SyntheticSpec {
                noise_sigma: -0.1,
                ..small_spec()
            },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn cluster_assignment_counts() {
        let g = generate_with_truth(&small_spec()).unwrap();
        let clustered = g.cluster_of.iter().filter(|c| c.is_some()).count();
        assert_eq!(clustered, 24);
        let spec = SyntheticSpec {
            confuser_fraction: 0.3,
            ..small_spec()
        };
        assert_eq!(spec.n_clusters(), 4);
    }

    #[test]
    fn noiseless_oracle_recovers_every_pair() {
        let spec = SyntheticSpec {
            cpi: 1,
            confuser_fraction: 0.0,
            ..small_spec()
        };
        let (a, b) = spec.bases().unwrap();
        let set = generate(&spec).unwrap();
        let model = ProjectionModel::new(a, b).unwrap();
        let report = evaluate(
            &model,
            SimilarityKind::InnerProduct,
            &set,
            &EvalProtocol::single(1),
        )
        .unwrap();
        assert_eq!(report.caption_retrieval.recall[0], 100.0);
        assert_eq!(report.image_retrieval.recall[0], 100.0);
    }

    #[test]
    fn positives_beat_unclustered_negatives_without_noise() {
        let spec = small_spec();
        let g = generate_with_truth(&spec).unwrap();
        let (a, b) = spec.bases().unwrap();
        let model = ProjectionModel::new(a, b).unwrap();
        let f = model
            .embed_images(g.features.image_matrix().view())
            .unwrap();
        let c = model
            .embed_captions(g.features.caption_matrix().view())
            .unwrap();
        let s = f.dot(&c.t());
        for i in 0..spec.n_images {
            for k in 0..g.features.n_captions() {
                let j = g.features.image_of_pair(k);
                let same_cluster = g.cluster_of[i].is_some() && g.cluster_of[i] == g.cluster_of[j];
                if j != i && !same_cluster {
                    assert!(s[[i, i * spec.cpi]] > s[[i, k]]);
                }
            }
        }
    }

    #[test]
    fn cluster_members_are_harder_than_background() {
        let spec = SyntheticSpec {
            n_images: 400,
            ..small_spec()
        };
        let g = generate_with_truth(&spec).unwrap();
        let cos = latent_cosines(g.latents.view());
        let mut background = Vec::new();
        let mut within = Vec::new();
        for i in 0..spec.n_images {
            for j in i + 1..spec.n_images {
                match (g.cluster_of[i], g.cluster_of[j]) {
                    (Some(x), Some(y)) if x == y => within.push(cos[[i, j]]),
                    (None, None) => background.push(cos[[i, j]]),
                    _ => {}
                }
            }
        }
        background.sort_by(f64::total_cmp);
        let p99 = background[(background.len() as f64 * 0.99) as usize];
        assert!(!within.is_empty());
        assert!(within.iter().all(|&c| c > p99), "p99 {p99}");
    }
}
