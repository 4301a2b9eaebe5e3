//! Risk-neutral optimization of parametrized PDE models under uncertainty with
//! dimension-adaptive sparse grids, minimum-residual reduced-order models and
//! an inexact trust-region method.

// range checks are written as `!(x > a)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod hdm;
pub mod oracle;
pub mod rom;
pub mod sparse_grid;
pub mod trust_opt;

pub use adapt::{AdaptOptions, Counters, RefinementEvent, SgRomPair, Tracker};
pub use hdm::{BurgersControl, BurgersParams, DiffusionParams, LinearDiffusion, ModelProblem, NewtonOptions};
pub use oracle::{cost_metric, BoundEstimate, CostModel};
pub use rom::{ReducedBasis, RomOptions};
pub use sparse_grid::{MultiIndex, MultiIndexSet, NodeKey, SparseQuadrature};
pub use trust_opt::{tr_run, IterationRecord, RunOutcome, RunStatus, TrustRegionConfig};
