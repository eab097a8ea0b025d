//! Hierarchical concept/relation reasoning for multimodal intent classification.
//!
//! The pipeline turns a sequence of embedding tokens into label-guided
//! concept centroids ([`clustering`]), encodes and ranks pairwise concept
//! relations ([`relations`]), lays tokens, concepts and relations out in a
//! staged prompt for a reasoner backend, gates the concept and relation
//! features by a learned confidence score ([`reasoning`]), and trains the
//! whole stack end-to-end ([`harness`]). Everything differentiable runs on
//! the small autodiff tape in [`numerics`].

pub mod clustering;
pub mod datamodel;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod reasoning;
pub mod relations;

pub use error::{Error, Result};
