//! Delay QoS monitoring through active network tomography.
//!
//! * [`topology`]: logical probing trees and identifiability.
//! * [`netsim`]: probe traffic generation, either sampled from known link
//!   delay distributions or from a FIFO queueing simulation with background
//!   flows.
//! * [`tomography`]: discretization and EM inversion of end-to-end delays
//!   into per-link delay distributions.
//! * [`monitor`]: EWMA, CUSUM and CDF-EWMA control charts.
//! * [`streamq`]: buffer-based incremental quantiles and a GK summary.
//! * [`harness`]: the windowed simulate/invert/monitor pipeline and reports.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod harness;
pub mod monitor;
pub mod netsim;
pub mod par;
pub mod streamq;
pub mod tomography;
pub mod topology;

pub use par::Execution;
pub use topology::{LinkId, LogicalTree, NodeId};
