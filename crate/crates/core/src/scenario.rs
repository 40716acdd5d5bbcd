//! Experiment generation: Poisson traffic on a multi-lane road, Gaussian
//! GPS and ranging errors, synthetic pseudoranges, and error metrics.
//!
//! Every random stream is derived from the scenario seed so that a
//! `(config, seed)` pair always yields the same snapshot, measurements and
//! report. Trial `t` uses `splitmix64(seed ^ t)` as its own seed; each
//! stream within a trial (traffic, GPS, distances, satellites, receivers)
//! mixes a fixed tag into that trial seed the same way.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::dlea::{
    DistanceMeasurement, DistanceTable, FinalEstimate, GpsFix, NoiseModel, RoadSpace,
    SolverOptions, Vec2, WeightMode,
};
use crate::geo::{elevation_angle, make_constellation, Constellation, WorldPoint};
use crate::netsim::{
    build_neighbor_graph, run_protocol, NeighborGraph, Observations, ProtocolConfig,
    ProtocolError, ProtocolOutcome, RangingInput, RangingMode,
};
use crate::ranging::{
    noncommon_noise_std, quantize, synthesize_pseudorange, PseudorangeObservation, PseudorangeSet,
};
use crate::{Error, Result, VehicleId};

const STREAM_TRAFFIC: u64 = 0x7472_6166;
const STREAM_GPS: u64 = 0x6770_7366;
const STREAM_DISTANCE: u64 = 0x6469_7374;
const STREAM_SATELLITES: u64 = 0x7361_7473;
const STREAM_RECEIVERS: u64 = 0x7263_7672;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` under scenario seed `seed`.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    splitmix64(seed ^ trial)
}

fn stream_seed(trial_seed: u64, tag: u64) -> u64 {
    splitmix64(trial_seed ^ tag)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Road length L, meters.
    pub road_length: f64,
    /// Road width W, meters.
    pub road_width: f64,
    pub lanes: u32,
    pub lane_width: f64,
    /// Communication range R, meters.
    pub comm_range: f64,
    /// Poisson arrival rate λ, vehicles per minute.
    pub arrival_rate: f64,
    /// Mean velocity q, km/h.
    pub mean_velocity: f64,
    /// GPS error δ per axis.
    pub gps_error: NoiseModel<f64>,
    /// Standard deviation of injected distance error ε, meters.
    pub distance_error_std: f64,
    pub ranging_mode: RangingMode,
    pub satellites: usize,
    /// Satellite elevation range, degrees.
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Receiver clock bias spread, meters.
    pub clock_bias_std: f64,
    /// Satellite-common error spread, meters.
    pub common_noise_std: f64,
    /// CNR at the horizon and at zenith, dB-Hz.
    pub cnr_horizon: f64,
    pub cnr_zenith: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
    pub trials: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road_length: 500.0,
            road_width: 9.0,
            lanes: 3,
            lane_width: 3.0,
            comm_range: 150.0,
            arrival_rate: 50.0,
            mean_velocity: 50.0,
            gps_error: NoiseModel {
                mean: Vec2::new(0.0, 0.0),
                stddev: Vec2::new(10.0, 10.0),
            },
            distance_error_std: 1.0,
            ranging_mode: RangingMode::Abstract,
            satellites: 8,
            elevation_min_deg: 15.0,
            elevation_max_deg: 85.0,
            clock_bias_std: 30.0,
            common_noise_std: 5.0,
            cnr_horizon: 30.0,
            cnr_zenith: 50.0,
            weight_mode: WeightMode::Subset,
            seed: 1,
            trials: 20,
        }
    }
}

/// A configuration problem, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ScenarioConfig {
    /// Checks every invariant; an empty list means the config is usable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut positive = |field: &str, v: f64| {
            if !(v > 0.0) || !v.is_finite() {
                out.push(Diagnostic {
                    field: field.into(),
                    message: format!("must be positive, got {v}"),
                });
            }
        };
        positive("road_length", self.road_length);
        positive("road_width", self.road_width);
        positive("lane_width", self.lane_width);
        positive("comm_range", self.comm_range);
        positive("arrival_rate", self.arrival_rate);
        positive("mean_velocity", self.mean_velocity);
        positive("gps_std_x", self.gps_error.stddev.x);
        positive("gps_std_y", self.gps_error.stddev.y);
        positive("cnr_horizon", self.cnr_horizon);
        positive("cnr_zenith", self.cnr_zenith);
        let mut non_negative = |field: &str, v: f64| {
            if !(v >= 0.0) || !v.is_finite() {
                out.push(Diagnostic {
                    field: field.into(),
                    message: format!("must be non-negative, got {v}"),
                });
            }
        };
        non_negative("distance_error_std", self.distance_error_std);
        non_negative("clock_bias_std", self.clock_bias_std);
        non_negative("common_noise_std", self.common_noise_std);
        if !self.gps_error.mean.is_finite() {
            out.push(Diagnostic {
                field: "gps_mean".into(),
                message: "must be finite".into(),
            });
        }
        if self.lanes == 0 {
            out.push(Diagnostic {
                field: "lanes".into(),
                message: "must be at least 1".into(),
            });
        } else if (self.lanes as f64 * self.lane_width - self.road_width).abs() > 1e-9 {
            out.push(Diagnostic {
                field: "road_width".into(),
                message: format!(
                    "lanes × lane_width = {} × {} does not equal road_width {}",
                    self.lanes, self.lane_width, self.road_width
                ),
            });
        }
        if self.satellites < crate::geo::MIN_SATELLITES {
            out.push(Diagnostic {
                field: "satellites".into(),
                message: format!(
                    "at least {} satellites required, got {}",
                    crate::geo::MIN_SATELLITES,
                    self.satellites
                ),
            });
        }
        if !(self.elevation_min_deg >= 5.0
            && self.elevation_min_deg <= self.elevation_max_deg
            && self.elevation_max_deg <= 90.0)
        {
            out.push(Diagnostic {
                field: "elevation_min_deg".into(),
                message: format!(
                    "elevation range [{}, {}] must lie within [5, 90] degrees",
                    self.elevation_min_deg, self.elevation_max_deg
                ),
            });
        }
        if self.trials == 0 {
            out.push(Diagnostic {
                field: "trials".into(),
                message: "must be at least 1".into(),
            });
        }
        out
    }

    pub fn road_space(&self) -> Result<RoadSpace<f64>> {
        RoadSpace::new((0.0, self.road_length), (0.0, self.road_width))
    }

    /// Mean longitudinal spacing `q / λ`, meters.
    pub fn mean_gap(&self) -> f64 {
        let meters_per_minute = self.mean_velocity * 1000.0 / 60.0;
        meters_per_minute / self.arrival_rate
    }

    /// Center of the road space, on the road plane.
    pub fn center(&self) -> WorldPoint<f64> {
        WorldPoint::on_road(self.road_length / 2.0, self.road_width / 2.0)
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig> {
        Ok(ProtocolConfig {
            noise: self.gps_error,
            space: self.road_space()?,
            weight_mode: self.weight_mode,
            solver: SolverOptions::default(),
        })
    }
}

/// True vehicle positions, ids dense from 1 in longitudinal order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSnapshot {
    vehicles: Vec<(VehicleId, Vec2<f64>)>,
}

impl TrafficSnapshot {
    pub fn new(vehicles: Vec<(VehicleId, Vec2<f64>)>) -> Result<Self> {
        for (i, (id, p)) in vehicles.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite position for {id}")));
            }
            if vehicles[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::InvalidInput(format!("duplicate vehicle {id}")));
            }
        }
        Ok(Self { vehicles })
    }

    pub fn vehicles(&self) -> &[(VehicleId, Vec2<f64>)] {
        &self.vehicles
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn position(&self, id: VehicleId) -> Option<Vec2<f64>> {
        self.vehicles.iter().find(|(v, _)| *v == id).map(|(_, p)| *p)
    }

    /// True distance `d_ij`.
    pub fn true_distance(&self, a: VehicleId, b: VehicleId) -> Option<f64> {
        Some(self.position(a)?.distance(&self.position(b)?))
    }
}

/// Spatial Poisson process along the road with exponential gaps of mean
/// [`ScenarioConfig::mean_gap`]; each vehicle sits at the center of a
/// uniformly chosen lane.
pub fn generate_traffic(config: &ScenarioConfig, seed: u64) -> Result<TrafficSnapshot> {
    let gap = Exp::new(1.0 / config.mean_gap())
        .map_err(|e| Error::InvalidInput(format!("traffic density: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vehicles = Vec::new();
    let mut x = 0.0;
    loop {
        x += gap.sample(&mut rng);
        if x > config.road_length {
            break;
        }
        let lane = rng.random_range(0..config.lanes.max(1));
        let y = (lane as f64 + 0.5) * config.lane_width;
        vehicles.push((VehicleId(vehicles.len() as u32 + 1), Vec2::new(x, y)));
    }
    TrafficSnapshot::new(vehicles)
}

/// `ṽ_i = v_i + δ_i`, per-axis independent Gaussian draws.
pub fn apply_gps_error(
    snapshot: &TrafficSnapshot,
    noise: &NoiseModel<f64>,
    seed: u64,
) -> BTreeMap<VehicleId, GpsFix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    snapshot
        .vehicles()
        .iter()
        .map(|(id, p)| {
            let zx: f64 = StandardNormal.sample(&mut rng);
            let zy: f64 = StandardNormal.sample(&mut rng);
            let position = Vec2::new(
                p.x + noise.mean.x + noise.stddev.x * zx,
                p.y + noise.mean.y + noise.stddev.y * zy,
            );
            (
                *id,
                GpsFix {
                    vehicle_id: *id,
                    position,
                },
            )
        })
        .collect()
}

/// `d̃_ij = max(0, d_ij + ε_ij)`, one draw per undirected edge.
pub fn apply_distance_error(
    snapshot: &TrafficSnapshot,
    graph: &NeighborGraph,
    std: f64,
    seed: u64,
) -> Result<DistanceTable<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .edges()
        .into_iter()
        .map(|(a, b)| {
            let d = snapshot
                .true_distance(a, b)
                .ok_or(Error::UnknownVehicle(a))?;
            let z: f64 = StandardNormal.sample(&mut rng);
            DistanceMeasurement::new(a, b, (d + std * z).max(0.0))
        })
        .collect()
}

/// Constellation for a scenario, centered on the road space.
pub fn scenario_constellation(config: &ScenarioConfig, seed: u64) -> Result<Constellation<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let k = make_constellation(
        config.satellites,
        seed,
        (
            config.elevation_min_deg.to_radians(),
            config.elevation_max_deg.to_radians(),
        ),
        &config.center(),
    )?;
    let noise: Vec<f64> = (0..k.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            quantize(config.common_noise_std * z)
        })
        .collect();
    Ok(k.with_common_noise(noise))
}

/// CNR model: linear in the sine of elevation between the horizon and
/// zenith values, plus 1.5 dB-Hz Gaussian jitter, floored at 10 dB-Hz.
pub fn cnr_at(config: &ScenarioConfig, elevation: f64, jitter: f64) -> f64 {
    let span = config.cnr_zenith - config.cnr_horizon;
    (config.cnr_horizon + span * elevation.sin().max(0.0) + 1.5 * jitter).max(10.0)
}

/// Raw pseudoranges for every vehicle. All terms are quantized onto the
/// measurement grid so differencing cancels shared terms exactly.
pub fn synthesize_pseudoranges(
    snapshot: &TrafficSnapshot,
    constellation: &Constellation<f64>,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<BTreeMap<VehicleId, PseudorangeSet<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (id, p) in snapshot.vehicles() {
        let receiver = WorldPoint::on_road(p.x, p.y);
        let z: f64 = StandardNormal.sample(&mut rng);
        let clock_bias = quantize(config.clock_bias_std * z);
        let mut obs = Vec::with_capacity(constellation.len());
        for sat in constellation.satellites() {
            let elevation = elevation_angle(&receiver, sat)?;
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let cnr = cnr_at(config, elevation, jitter);
            let z: f64 = StandardNormal.sample(&mut rng);
            let eps = quantize(noncommon_noise_std(cnr) * z);
            let range = quantize(receiver.distance(&sat.position));
            let value = synthesize_pseudorange(range, clock_bias, sat.common_noise, eps)?;
            obs.push(PseudorangeObservation::new(sat.id, value, cnr)?);
        }
        out.insert(*id, PseudorangeSet::new(*id, clock_bias, obs)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleError {
    pub vehicle_id: VehicleId,
    pub gps_error: f64,
    pub dlea_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub per_vehicle: Vec<VehicleError>,
    pub avg_gps: f64,
    pub avg_dlea: f64,
}

/// Per-vehicle `‖ṽ_i - v_i‖` and `‖v̂_i - v_i‖` with their means. An empty
/// snapshot reports zero averages.
pub fn compute_error_report(
    snapshot: &TrafficSnapshot,
    fixes: &BTreeMap<VehicleId, GpsFix<f64>>,
    finals: &BTreeMap<VehicleId, FinalEstimate<f64>>,
) -> Result<ErrorReport> {
    if fixes.len() != snapshot.len() || finals.len() != snapshot.len() {
        return Err(Error::IncompleteReport(format!(
            "{} vehicles, {} fixes, {} final estimates",
            snapshot.len(),
            fixes.len(),
            finals.len()
        )));
    }
    let per_vehicle = snapshot
        .vehicles()
        .iter()
        .map(|(id, truth)| {
            let fix = fixes
                .get(id)
                .ok_or_else(|| Error::IncompleteReport(format!("no fix for {id}")))?;
            let est = finals
                .get(id)
                .ok_or_else(|| Error::IncompleteReport(format!("no final estimate for {id}")))?;
            Ok(VehicleError {
                vehicle_id: *id,
                gps_error: fix.position.distance(truth),
                dlea_error: est.position.distance(truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_vehicle.len();
    let mean = |f: fn(&VehicleError) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_vehicle.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(ErrorReport {
        avg_gps: mean(|v| v.gps_error),
        avg_dlea: mean(|v| v.dlea_error),
        per_vehicle,
    })
}

/// Ground truth plus generated sensor data for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialInputs {
    pub snapshot: TrafficSnapshot,
    pub graph: NeighborGraph,
    pub observations: Observations,
}

/// Generates traffic, the neighbor graph and every noisy measurement.
pub fn generate_trial_inputs(config: &ScenarioConfig, trial: u64) -> Result<TrialInputs> {
    let ts = trial_seed(config.seed, trial);
    let snapshot = generate_traffic(config, stream_seed(ts, STREAM_TRAFFIC))?;
    let graph = build_neighbor_graph(&snapshot, config.comm_range)?;
    let fixes = apply_gps_error(&snapshot, &config.gps_error, stream_seed(ts, STREAM_GPS));
    let ranging = match config.ranging_mode {
        RangingMode::Abstract => RangingInput::Abstract {
            distances: apply_distance_error(
                &snapshot,
                &graph,
                config.distance_error_std,
                stream_seed(ts, STREAM_DISTANCE),
            )?,
        },
        RangingMode::Full => {
            let constellation =
                scenario_constellation(config, stream_seed(ts, STREAM_SATELLITES))?;
            let pseudoranges = synthesize_pseudoranges(
                &snapshot,
                &constellation,
                config,
                stream_seed(ts, STREAM_RECEIVERS),
            )?;
            RangingInput::Full {
                constellation,
                pseudoranges,
            }
        }
    };
    Ok(TrialInputs {
        snapshot,
        graph,
        observations: Observations { fixes, ranging },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: u64,
    pub inputs: TrialInputs,
    pub protocol: ProtocolOutcome,
    pub report: ErrorReport,
}

impl TrialOutcome {
    pub fn convergence_failures(&self) -> usize {
        self.protocol.solver_failures.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrialError {
    #[error("trial setup: {0}")]
    Setup(#[from] Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Runs one complete trial: generation, protocol, metrics.
pub fn run_trial(config: &ScenarioConfig, trial: u64) -> Result<TrialOutcome, TrialError> {
    let inputs = generate_trial_inputs(config, trial)?;
    let protocol = run_protocol(
        &inputs.snapshot,
        &inputs.graph,
        &inputs.observations,
        &config.protocol_config()?,
    )?;
    let report = compute_error_report(
        &inputs.snapshot,
        &inputs.observations.fixes,
        &protocol.finals,
    )?;
    Ok(TrialOutcome {
        trial,
        inputs,
        protocol,
        report,
    })
}
