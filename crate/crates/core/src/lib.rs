//! Hardware-aware differentiable architecture search.
//!
//! The crate covers the whole loop: candidate blocks and constrained
//! macro-architectures ([`search_space`]), MAC/parameter/latency accounting
//! ([`cost_model`]), Gumbel-Softmax relaxation ([`gumbel`]), a small
//! reverse-mode autodiff engine ([`tensor`]), supernetwork co-optimization
//! ([`supernet`]), a synthetic segmentation task ([`toy`]) and Pareto
//! selection over sampled architectures ([`pareto`]).

pub mod cost_model;
pub mod error;
pub mod gumbel;
pub mod pareto;
pub mod search_space;
pub mod supernet;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
