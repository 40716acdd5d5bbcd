use thiserror::Error;

use crate::{SatId, VehicleId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient satellites: {found} available, at least {required} required")]
    InsufficientSatellites { found: usize, required: usize },

    #[error("invalid range {0}: must be positive and finite")]
    InvalidRange(f64),

    #[error("satellite {0} is not part of the constellation")]
    UnknownSatellite(SatId),

    #[error("vehicle {0} has no neighbors")]
    IsolatedVehicle(VehicleId),

    #[error("vehicle {0} is not part of the graph")]
    UnknownVehicle(VehicleId),

    #[error("missing GPS fix for vehicle {0}")]
    MissingFix(VehicleId),

    #[error("missing distance measurement between {0} and {1}")]
    MissingDistance(VehicleId, VehicleId),

    #[error("fusion for {vehicle} is missing tentative estimates from pivots {missing:?}")]
    IncompleteFusion {
        vehicle: VehicleId,
        missing: Vec<VehicleId>,
    },

    #[error("error report is incomplete: {0}")]
    IncompleteReport(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
