//! Adaptive negative sampling for similarity-based representation learning.
//!
//! The crate couples a small embedding network trained with contrastive,
//! triplet or margin losses to a softmax policy that reshapes a binned
//! distribution over anchor-negative distances. Validation metrics drive the
//! policy through REINFORCE or a PPO clipped surrogate.
//!
//! Module map:
//! - [`datasets`]: synthetic blobs, CSV ingestion, class-half and validation splits
//! - [`encoder`]: two-layer MLP with L2-normalized output, exact backprop, Adam
//! - [`losses`]: contrastive, triplet and margin objectives with exact gradients
//! - [`samplers`]: binned distance distribution, actions, baseline negative miners
//! - [`metrics`]: Recall@k, k-means, NMI, pairwise F1
//! - [`rl`]: softmax policy, REINFORCE, PPO, softmax bandit testbed
//! - [`asrloop`]: episode orchestration, dip detection, strategy comparison
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod asrloop;
pub mod checkpoint;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod rl;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
