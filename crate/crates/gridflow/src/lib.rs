//! gridflow: solved AC power-flow datasets, a Newton-Raphson oracle, and
//! graph neural surrogates (GGNN and a GCN baseline) with an evaluation and
//! ranking harness.
//!
//! The pipeline is: parse a MATPOWER case -> solve scenarios with the NR
//! oracle -> assemble a graph dataset -> train a surrogate -> evaluate and
//! rank. Every stage is deterministic given its seeds.

pub mod autodiff;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod pf;
pub mod scenario;
pub mod seed;
pub mod train;
