//! Multi-lattice multi-stream multicast for tiled 360-degree video over
//! massive MIMO.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod grouping;
pub mod link;
pub mod montecarlo;
pub mod qoe;
pub mod scalar;
pub mod scenario;
pub mod tiling;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases of the generic types.
pub type LinkParamsF64 = link::LinkParams<f64>;
pub type GroupRateF64 = link::GroupRate<f64>;
pub type GroupSinrF64 = link::GroupSinr<f64>;
pub type RateGridF64 = qoe::RateGrid<f64>;
pub type QoEWeightsF64 = qoe::QoEWeights<f64>;
pub type SchedulingConfigF64 = qoe::SchedulingConfig<f64>;
pub type QoESolutionF64 = qoe::QoESolution<f64>;
