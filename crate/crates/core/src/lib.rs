//! Sparse All-Reduce over a simulated, cost-metered message fabric.
//!
//! The crate implements a bag-based sparse Reduce-Scatter with per-step
//! top-k block sparsification, residual collection for every discarded
//! gradient, two cross-team synchronization schemes (recursive-doubling and
//! Bruck based) and a small synchronous-SGD harness. Every transfer runs over
//! [`fabric::Fabric`], which counts latency rounds and received scalars per
//! worker so measured costs can be checked against closed-form predictions.
//!
//! The collective algorithms are generic over [`Scalar`]; use [`Real`] for
//! training and [`Exact`] when audits must hold without rounding error.

pub mod collectives;
pub mod error;
pub mod fabric;
pub mod pipeline;
pub mod residual;
pub mod sag;
pub mod scalar;
pub mod sparse;
pub mod srs;
pub mod trainer;
pub mod workload;

pub use error::{Error, Result};
pub use fabric::{CostLedger, ExpectedCost, Fabric, WorkerId};
pub use pipeline::{spardl_all_reduce, Cluster, ClusterConfig, GlobalSparseGradient};
pub use residual::{ResidualMode, ResidualStore};
pub use sag::{HController, SagMode, TeamConfig};
pub use scalar::Scalar;
pub use sparse::{merge_add, partition, top_k_select, BlockPartition, GradientVector, SparseBlock};
pub use srs::SrsTiming;

/// Floating-point scalar used for training runs.
pub type Real = f64;
/// Exact rational scalar used for conservation audits.
pub type Exact = num_rational::Rational64;

pub type RealGradient = GradientVector<Real>;
pub type ExactGradient = GradientVector<Exact>;
pub type RealBlock = SparseBlock<Real>;
pub type ExactBlock = SparseBlock<Exact>;
pub type RealCluster = Cluster<Real>;
pub type ExactCluster = Cluster<Exact>;
