//! Neural architecture search over network-morphism trees.
//!
//! Architectures are DAGs of tensor nodes ([`graph::ArchGraph`]). New
//! candidates are grown from observed ones with function-preserving
//! morphisms ([`morph`]), compared with an edit-distance kernel
//! ([`kernel`]) and ranked by a Gaussian-process surrogate ([`gp`]) inside
//! a simulated-annealing tree search ([`search`]). Evaluation is delegated
//! to pluggable [`evaluators`].

pub mod evaluators;
pub mod gp;
pub mod graph;
pub mod kernel;
pub mod morph;
pub mod refexec;
pub mod search;
mod hash;

pub use graph::{ArchGraph, LayerKind, TensorShape};

pub use morph::MorphOp;
