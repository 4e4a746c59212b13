//! Derives optimization sub-sequences from the LLVM `-Oz` pass schedule and
//! trains a Double-DQN agent to pick per-program orderings of them, trading
//! off object-file size against statically estimated throughput.
//!
//! The pieces, bottom to top:
//!
//! - [`catalog`] — the bundled `Oz` pipeline and the fixed action spaces
//!   (hand-grouped and graph-derived), plus the pipeline text format.
//! - [`odg`] — the pass dependence graph built from a pipeline, critical-node
//!   selection by degree threshold, and the walk enumeration that yields the
//!   graph-derived action space.
//! - [`reward`] — size/throughput reward ratios and their weighted blend.
//! - [`backend`] — the compiler-facing contract (embed, transform, measure)
//!   with a hermetic mock and an external-process toolchain driver.
//! - [`env`] — the episode MDP: apply an action, re-embed, emit a reward.
//! - [`nn`] + [`agent`] — a scalar-generic feed-forward Q-network with manual
//!   backprop, replay memory, the double-DQN update, and the training loop.
//! - [`eval`] — greedy rollouts vs. the `Oz` baseline, aggregated into
//!   min/avg/max size-reduction reports.

pub mod agent;
pub mod backend;
pub mod catalog;
pub mod env;
pub mod eval;
pub mod nn;
pub mod num;
pub mod odg;
pub mod reward;

pub use num::Scalar;

/// Scalar type used by the shipped training/evaluation pipeline. The math in
/// [`nn`] and [`reward`] is generic over [`Scalar`]; everything above it is
/// instantiated at this precision.
pub type DefaultScalar = f64;

/// Q-network at the default precision.
pub type QNetwork = nn::QNetwork<DefaultScalar>;
/// Q-network at single precision, for memory-constrained inference.
pub type QNetwork32 = nn::QNetwork<f32>;
/// Gradient-descent state at the default precision.
pub type AdamState = nn::Adam<DefaultScalar>;
