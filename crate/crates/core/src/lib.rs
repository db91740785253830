//! Continual embedding-based model routing.
//!
//! A router projects query features into an embedding space and scores them
//! against a growing table of model embeddings. Training proceeds one
//! experience at a time; new models append rows to the table, anchor losses
//! keep old rows and the projection close to their previous values, and a
//! domain-balanced coreset of past queries is replayed.

pub mod bench;
pub mod error;
pub mod matrix_io;
pub mod metrics;
pub mod registry;
pub mod replay;
pub mod rng;
pub mod router;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use registry::{ModelId, ModelRecord, Registry};
pub use router::{RouterState, Snapshot};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/candidates.md")]
    mod candidates {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/replay.md")]
    mod replay {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}
