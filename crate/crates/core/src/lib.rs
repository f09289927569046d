//! Target-driven navigation with a co-visibility knowledge graph, attention and
//! an asynchronous actor-critic learner, on top of a deterministic symbolic
//! indoor-scene simulator.

pub mod eval;
pub mod expert;
pub mod kg;
pub mod nn;
pub mod policy;
pub mod scene;
pub mod trainer;
