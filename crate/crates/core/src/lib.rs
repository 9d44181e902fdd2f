//! Joint image-caption embeddings trained with hinge-based triplet ranking
//! losses, and the tools to evaluate them as a bidirectional retrieval system.
//!
//! * [`model`]: linear projections, normalization and similarity functions.
//! * [`loss`]: sum-of-hinges, max-of-hinges and softmax-weighted losses with
//!   analytic gradients.
//! * [`sampler`]: mini-batches and negative pools.
//! * [`optimizer`]: Adam and the step learning-rate schedule.
//! * [`trainer`]: the training loop with recall-sum snapshot selection.
//! * [`evaluator`]: R@K, median and mean rank, fold averaging.
//! * [`analysis`]: probability that a batch holds no hard negative.
//! * [`datagen`]: synthetic feature sets and the `VSEF` file format.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod loss;
pub mod model;
pub mod optimizer;
pub mod sampler;
pub mod snapshot;
pub mod trainer;

pub use error::{Error, Result};
