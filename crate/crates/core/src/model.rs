//! Linear projections of image and caption features into a shared embedding
//! space, and the similarity functions used to compare embeddings.
//!
//! An image feature `phi` maps to `W_fᵀ phi`, a caption feature `psi` to
//! `W_gᵀ psi`. Each side may be normalized onto the unit sphere, and both may
//! additionally be passed through an elementwise absolute value (applied after
//! normalization) which keeps embeddings in the nonnegative orthant as order
//! embeddings require.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// How an image embedding `f` and a caption embedding `g` are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    /// `f · g`
    InnerProduct,
    /// `-‖max(0, g - f)‖²`, zero when `g ≤ f` coordinatewise.
    Order,
}

impl SimilarityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimilarityKind::InnerProduct => "ip",
            SimilarityKind::Order => "order",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ip" | "inner-product" => Ok(SimilarityKind::InnerProduct),
            "order" => Ok(SimilarityKind::Order),
            other => Err(Error::Config(format!("unknown similarity kind `{other}`"))),
        }
    }
}

/// Which tower of the model an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Caption,
}

/// The trainable parameters of the joint embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    w_img: Array2<f64>,
    w_cap: Array2<f64>,
    pub normalize_image: bool,
    pub normalize_caption: bool,
    /// Elementwise `|x|` on both embeddings, after normalization.
    pub abs_embeddings: bool,
}

impl ProjectionModel {
    /// Builds a model from explicit projection matrices (`d_in × dim` each).
    /// Both sides are normalized and no absolute value is applied.
    pub fn new(w_img: Array2<f64>, w_cap: Array2<f64>) -> Result<Self> {
        if w_img.ncols() != w_cap.ncols() {
            return Err(Error::Config(format!(
                "image projection has {} columns but caption projection has {}",
                w_img.ncols(),
                w_cap.ncols()
            )));
        }
        for (name, w) in [("image", &w_img), ("caption", &w_cap)] {
            if w.is_empty() {
                return Err(Error::Config(format!(
                    "{name} projection has an empty dimension"
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} projection has non-finite entries"
                )));
            }
        }
        Ok(Self {
            w_img,
            w_cap,
            normalize_image: true,
            normalize_caption: true,
            abs_embeddings: false,
        })
    }

    /// Random initialization: every entry uniform in `[-1/√d_in, 1/√d_in]`.
    pub fn random<R: Rng + ?Sized>(
        d_img: usize,
        d_cap: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_img == 0 || d_cap == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (d_img={d_img}, d_cap={d_cap}, dim={dim})"
            )));
        }
        let mut init = |rows: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, dim), |_| rng.random_range(-bound..=bound))
        };
        let w_img = init(d_img);
        let w_cap = init(d_cap);
        Self::new(w_img, w_cap)
    }

    pub fn with_flags(
        mut self,
        normalize_image: bool,
        normalize_caption: bool,
        abs_embeddings: bool,
    ) -> Self {
        self.normalize_image = normalize_image;
        self.normalize_caption = normalize_caption;
        self.abs_embeddings = abs_embeddings;
        self
    }

    pub fn dim(&self) -> usize {
        self.w_img.ncols()
    }

    pub fn d_img(&self) -> usize {
        self.w_img.nrows()
    }

    pub fn d_cap(&self) -> usize {
        self.w_cap.nrows()
    }

    pub fn w_img(&self) -> &Array2<f64> {
        &self.w_img
    }

    pub fn w_cap(&self) -> &Array2<f64> {
        &self.w_cap
    }

    /// Mutable access to both projections, image first. Used by the optimizer.
    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 2] {
        [&mut self.w_img, &mut self.w_cap]
    }

    fn side(&self, side: Side) -> (&Array2<f64>, bool) {
        match side {
            Side::Image => (&self.w_img, self.normalize_image),
            Side::Caption => (&self.w_cap, self.normalize_caption),
        }
    }

    pub fn embed_image(&self, phi: &[f64]) -> Result<Array1<f64>> {
        self.embed_one(Side::Image, phi)
    }

    pub fn embed_caption(&self, psi: &[f64]) -> Result<Array1<f64>> {
        self.embed_one(Side::Caption, psi)
    }

    fn embed_one(&self, side: Side, x: &[f64]) -> Result<Array1<f64>> {
        let view =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        let proj = self.forward(side, view)?;
        Ok(proj.output.row(0).to_owned())
    }

    /// Embeds a batch of image feature rows.
    pub fn embed_images(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(Side::Image, features)?.output)
    }

    /// Embeds a batch of caption feature rows.
    pub fn embed_captions(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(Side::Caption, features)?.output)
    }

    /// Embeds a batch and keeps the intermediates needed for backpropagation.
    pub fn forward(&self, side: Side, features: ArrayView2<'_, f64>) -> Result<Projection> {
        let (w, normalize) = self.side(side);
        if features.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if features.ncols() != w.nrows() {
            return Err(Error::Config(format!(
                "{side:?} feature dimension {} does not match projection input dimension {}",
                features.ncols(),
                w.nrows()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "{side:?} features contain non-finite values"
            )));
        }
        let raw = features.dot(w);
        let mut norms = Array1::<f64>::ones(raw.nrows());
        let mut output = raw.clone();
        if normalize {
            for (k, mut row) in output.axis_iter_mut(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::DegenerateInput(format!(
                        "{side:?} embedding {k} has norm {norm} and cannot be normalized"
                    )));
                }
                row /= norm;
                norms[k] = norm;
            }
        }
        let normalized = output.clone();
        if self.abs_embeddings {
            output.mapv_inplace(f64::abs);
        }
        Ok(Projection {
            normalize,
            abs: self.abs_embeddings,
            norms,
            normalized,
            output,
        })
    }

    /// Gradient of a scalar with respect to the projection matrix of `side`,
    /// given the batch `features` and the gradient `grad_output` with respect to
    /// the embeddings produced by [`ProjectionModel::forward`].
    pub fn backward(
        &self,
        projection: &Projection,
        features: ArrayView2<'_, f64>,
        grad_output: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let grad_raw = projection.backward(grad_output);
        features.t().dot(&grad_raw)
    }
}

/// A forward pass through one tower: the emitted embeddings plus what the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct Projection {
    normalize: bool,
    abs: bool,
    norms: Array1<f64>,
    /// Embeddings after normalization, before the absolute value.
    normalized: Array2<f64>,
    pub output: Array2<f64>,
}

impl Projection {
    /// Maps a gradient on the emitted embeddings back to the raw projections
    /// `Wᵀx`.
    pub fn backward(&self, grad_output: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut grad = grad_output.to_owned();
        if self.abs {
            // d|x|/dx is taken as 0 at x = 0.
            grad.zip_mut_with(&self.normalized, |g, &x| *g *= sign(x));
        }
        if self.normalize {
            for ((mut g, y), &norm) in grad
                .axis_iter_mut(Axis(0))
                .zip(self.normalized.axis_iter(Axis(0)))
                .zip(self.norms.iter())
            {
                // (I - y yᵀ) g / ‖x‖
                let proj = g.dot(&y);
                g.zip_mut_with(&y, |gi, &yi| *gi = (*gi - yi * proj) / norm);
            }
        }
        grad
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Similarity of one image embedding `f` and one caption embedding `g`.
pub fn similarity(kind: SimilarityKind, f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::Config(format!(
            "embedding dimensions differ: {} vs {}",
            f.len(),
            g.len()
        )));
    }
    Ok(score(kind, ArrayView1::from(f), ArrayView1::from(g)))
}

fn score(kind: SimilarityKind, f: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> f64 {
    match kind {
        SimilarityKind::InnerProduct => f.iter().zip(g.iter()).map(|(a, b)| a * b).sum(),
        SimilarityKind::Order => -f
            .iter()
            .zip(g.iter())
            .map(|(a, b)| {
                let v = (b - a).max(0.0);
                v * v
            })
            .sum::<f64>(),
    }
}

/// Scores every image embedding row against every caption embedding row.
///
/// Entry `(m, n)` is `similarity(kind, images[m], captions[n])`. Rows are
/// computed in parallel; each entry is an independent fixed-order sum, so the
/// result does not depend on the thread count.
pub fn similarity_matrix(
    kind: SimilarityKind,
    images: ArrayView2<'_, f64>,
    captions: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if images.nrows() == 0 || captions.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if images.ncols() != captions.ncols() {
        return Err(Error::Config(format!(
            "embedding dimensions differ: {} vs {}",
            images.ncols(),
            captions.ncols()
        )));
    }
    let n_cap = captions.nrows();
    let rows: Vec<Vec<f64>> = (0..images.nrows())
        .into_par_iter()
        .map(|m| {
            let f = images.row(m);
            (0..n_cap)
                .map(|n| score(kind, f, captions.row(n)))
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((images.nrows(), n_cap), flat).expect("shape matches row count"))
}

/// Backpropagates a gradient on a similarity matrix to the image and caption
/// embeddings that produced it.
pub fn similarity_backward(
    kind: SimilarityKind,
    images: ArrayView2<'_, f64>,
    captions: ArrayView2<'_, f64>,
    grad_sim: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    match kind {
        SimilarityKind::InnerProduct => (grad_sim.dot(&captions), grad_sim.t().dot(&images)),
        SimilarityKind::Order => {
            let mut grad_img = Array2::<f64>::zeros(images.raw_dim());
            let mut grad_cap = Array2::<f64>::zeros(captions.raw_dim());
            let dim = images.ncols();
            for ((m, n), &gs) in grad_sim.indexed_iter() {
                if gs == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    let v = captions[[n, d]] - images[[m, d]];
                    if v > 0.0 {
                        // s = -Σ v², ds/dg = -2v, ds/df = 2v
                        grad_cap[[n, d]] -= 2.0 * v * gs;
                        grad_img[[m, d]] += 2.0 * v * gs;
                    }
                }
            }
            (grad_img, grad_cap)
        }
    }
}
