//! Retrieval-augmented novel class discovery over precomputed embeddings.
//!
//! The pipeline runs in five stages, each a module here:
//!
//! 1. [`synth`] generates Gaussian-mixture image embeddings, a correlated caption
//!    corpus and a labelled/unlabelled split.
//! 2. [`retrieval`] ranks caption embeddings against every image by cosine similarity.
//! 3. [`fusion`] mean-pools the retrieved captions into a text view and concatenates it
//!    with the image view.
//! 4. [`sskmeans`] clusters the fused vectors with labelled samples pinned to their class.
//! 5. [`eval`] scores the clustering with Hungarian-matched accuracy on All/Old/New.
//!
//! [`losses`] holds the contrastive loss kernels with analytic gradients, and
//! [`pipeline`] wires the stages together with on-disk caching.

pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod sskmeans;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use store::{EmbeddingBundle, Modality, SampleRecord};
