//! Brain graph super-resolution with an adversarially aligned teacher
//! encoder-decoder and a topology-aware distilled student.
//!
//! Low-resolution connectomes are encoded as edge-feature rows, mapped by a
//! graph convolutional encoder-decoder to high-resolution edge features, and
//! evaluated with node strength, eigenvector centrality and PageRank.

pub mod cli;
pub mod connectome;
pub mod dataio;
pub mod diffmath;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
