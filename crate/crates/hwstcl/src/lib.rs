//! Dynamic functional connectivity graph learning.
//!
//! `hwstcl` turns parcellated BOLD time series into sequences of
//! reliability-refined window graphs, couples the windows through an
//! exponential temporal kernel into one joint spatio-temporal operator,
//! pretrains a weighted GIN encoder with a kernel-weighted contrastive
//! objective, and classifies subjects with a ChebNet + bidirectional GRU
//! readout. Everything runs on a small reverse-mode autodiff engine over
//! dense 64-bit tensors, so gradients are available end to end, including
//! for the kernel parameters and for connection-level saliency.
//!
//! The `hwstcl` binary exposes the batch workflow
//! (`synth | graphs | pretrain | train | eval | saliency | sweep`); the
//! library exposes every stage as a plain function. See the book under
//! `book/` for a guided tour.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod connectivity;
pub mod encoders;
pub mod error;
pub mod hwcl;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod readout;
pub mod saliency;
pub mod signal;
pub mod spectral;
pub mod stgraph;
pub mod tensor;
pub mod train;

pub use error::HwstclError;
pub use tensor::Tensor;

/// Book chapters double as doc-tests so the guide can never drift from the
/// API. `cargo test --doc` compiles and runs every fenced Rust block.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/window_graphs.md")]
    mod window_graphs {}
    #[doc = include_str!("../../../book/src/joint_graph.md")]
    mod joint_graph {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
}
