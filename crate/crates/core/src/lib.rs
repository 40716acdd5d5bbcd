//! Cooperative vehicular localization.
//!
//! Inter-vehicle distances are measured by sharing raw GPS pseudoranges and
//! solving a weighted least-squares double-difference baseline ([`ranging`]).
//! Each vehicle then acts as a pivot, solves a box- and distance-constrained
//! maximum-likelihood problem over its neighborhood ([`dlea`]), and the
//! neighborhood's tentative locations are fused into a final estimate. The
//! [`netsim`] module runs that protocol as message-passing agents and
//! [`scenario`] generates Poisson traffic snapshots with Gaussian errors.
//!
//! The numeric core (`geo`, `ranging`, `dlea`) is generic over the scalar
//! type through [`Real`]; the simulation layers run in `f64`. The aliases
//! at the crate root fix the scalar to `f64` for everyday use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dlea;
pub mod error;
pub mod geo;
pub mod linalg;
pub mod netsim;
pub mod ranging;
pub mod scenario;

mod ids;
mod real;

pub use error::{Error, Result};
pub use ids::{SatId, VehicleId};
pub use real::Real;

pub type WorldPoint = geo::WorldPoint<f64>;
pub type UnitVector = geo::UnitVector<f64>;
pub type SatelliteState = geo::SatelliteState<f64>;
pub type Constellation = geo::Constellation<f64>;

pub type PseudorangeObservation = ranging::PseudorangeObservation<f64>;
pub type PseudorangeSet = ranging::PseudorangeSet<f64>;
pub type DifferenceSystem = ranging::DifferenceSystem<f64>;
pub type BaselineEstimate = ranging::BaselineEstimate<f64>;

pub type Vec2 = dlea::Vec2<f64>;
pub type GpsFix = dlea::GpsFix<f64>;
pub type NoiseModel = dlea::NoiseModel<f64>;
pub type RoadSpace = dlea::RoadSpace<f64>;
pub type DistanceMeasurement = dlea::DistanceMeasurement<f64>;
pub type DistanceTable = dlea::DistanceTable<f64>;
pub type TentativeEstimateSet = dlea::TentativeEstimateSet<f64>;
pub type FinalEstimate = dlea::FinalEstimate<f64>;
pub type SolverOptions = dlea::SolverOptions<f64>;
