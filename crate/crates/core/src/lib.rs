//! Dynamic control of bipartite matching queues in heavy traffic.
//!
//! The crate covers the whole pipeline: the static planning LP, reference
//! reflected Brownian paths, a small MLP toolkit, the deep-BSDE trainer for the
//! Brownian drift-control problem, the pre-limit matching policies and the
//! discrete-event simulator used to compare them.

pub mod bsde;
pub mod catalog;
pub mod experiment;
pub mod network;
pub mod neural;
pub mod plan;
pub mod policy;
pub mod rbm;
pub mod rng;
pub mod sim;
pub mod spp;
