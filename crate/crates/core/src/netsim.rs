//! Message-passing execution of the distributed estimation protocol.
//!
//! Each vehicle is an agent with private state. The five protocol steps run
//! as synchronous rounds separated by a barrier:
//!
//! 1. pseudorange exchange (full ranging mode only),
//! 2. GPS fix exchange,
//! 3. distance computation and the pivot's tentative solve (local),
//! 4. tentative-set exchange,
//! 5. weighted fusion (local).
//!
//! The reference scheduler processes agents in ascending id order, which
//! makes traces and estimates bit-reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::dlea::{
    final_estimate, solve_tentative, DistanceMeasurement, DistanceTable, FinalEstimate, FixMap,
    GpsFix, NoiseModel, PivotWeight, RoadSpace, SolveError, SolverOptions, Subset,
    TentativeEstimateSet, Vec2, WeightMode,
};
use crate::geo::{Constellation, WorldPoint};
use crate::ranging::{build_system, wls_baseline, PseudorangeSet};
use crate::scenario::TrafficSnapshot;
use crate::{Error, Result, VehicleId};

/// Symmetric communication graph.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeighborGraph {
    adjacency: BTreeMap<VehicleId, BTreeSet<VehicleId>>,
}

impl NeighborGraph {
    pub fn from_edges(
        vehicles: impl IntoIterator<Item = VehicleId>,
        edges: impl IntoIterator<Item = (VehicleId, VehicleId)>,
    ) -> Result<Self> {
        let mut adjacency: BTreeMap<VehicleId, BTreeSet<VehicleId>> =
            vehicles.into_iter().map(|v| (v, BTreeSet::new())).collect();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidInput(format!("self edge on {a}")));
            }
            for v in [a, b] {
                if !adjacency.contains_key(&v) {
                    return Err(Error::UnknownVehicle(v));
                }
            }
            adjacency.get_mut(&a).map(|s| s.insert(b));
            adjacency.get_mut(&b).map(|s| s.insert(a));
        }
        Ok(Self { adjacency })
    }

    pub fn vehicles(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn vehicle_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, v: VehicleId) -> Option<&BTreeSet<VehicleId>> {
        self.adjacency.get(&v)
    }

    pub fn has_edge(&self, a: VehicleId, b: VehicleId) -> bool {
        self.adjacency.get(&a).is_some_and(|n| n.contains(&b))
    }

    /// Undirected edges as `(lower id, higher id)`, sorted.
    pub fn edges(&self) -> Vec<(VehicleId, VehicleId)> {
        self.adjacency
            .iter()
            .flat_map(|(a, ns)| ns.iter().filter(move |b| *b > a).map(move |b| (*a, *b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }
}

/// Edge between two vehicles iff their true distance is at most `range`.
pub fn build_neighbor_graph(snapshot: &TrafficSnapshot, range: f64) -> Result<NeighborGraph> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::InvalidInput(format!(
            "communication range must be positive, got {range}"
        )));
    }
    let vehicles = snapshot.vehicles();
    let mut edges = Vec::new();
    for (i, (a, pa)) in vehicles.iter().enumerate() {
        for (b, pb) in &vehicles[i + 1..] {
            if pa.distance(pb) <= range {
                edges.push((*a, *b));
            }
        }
    }
    NeighborGraph::from_edges(vehicles.iter().map(|(id, _)| *id), edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RangingMode {
    /// Pseudoranges are exchanged and distances solved by WLS-DD.
    Full,
    /// Noisy distances are injected directly.
    #[default]
    Abstract,
}

impl RangingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RangingMode::Full => "full",
            RangingMode::Abstract => "abstract",
        }
    }
}

impl std::str::FromStr for RangingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "abstract" => Ok(Self::Abstract),
            other => Err(Error::InvalidInput(format!(
                "ranging mode must be `full` or `abstract`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    PseudorangeShare(PseudorangeSet<f64>),
    FixShare(GpsFix<f64>),
    TentativeShare(TentativeEstimateSet<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PayloadKind {
    Pseudorange,
    Fix,
    Tentative,
}

impl PayloadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PayloadKind::Pseudorange => "pseudorange",
            PayloadKind::Fix => "fix",
            PayloadKind::Tentative => "tentative",
        }
    }

    /// Protocol step that carries this payload.
    pub fn round(&self) -> u8 {
        match self {
            PayloadKind::Pseudorange => 1,
            PayloadKind::Fix => 2,
            PayloadKind::Tentative => 4,
        }
    }
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::PseudorangeShare(_) => PayloadKind::Pseudorange,
            Payload::FixShare(_) => PayloadKind::Fix,
            Payload::TentativeShare(_) => PayloadKind::Tentative,
        }
    }

    /// First 16 hex digits of SHA-256 over a canonical little-endian encoding.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        match self {
            Payload::PseudorangeShare(set) => {
                h.update([1u8]);
                h.update(set.receiver_id.0.to_le_bytes());
                h.update(set.clock_bias.to_le_bytes());
                for o in set.observations() {
                    h.update(o.sat_id.0.to_le_bytes());
                    h.update(o.value.to_le_bytes());
                    h.update(o.cnr.to_le_bytes());
                }
            }
            Payload::FixShare(fix) => {
                h.update([2u8]);
                h.update(fix.vehicle_id.0.to_le_bytes());
                h.update(fix.position.x.to_le_bytes());
                h.update(fix.position.y.to_le_bytes());
            }
            Payload::TentativeShare(t) => {
                h.update([3u8]);
                h.update(t.pivot.0.to_le_bytes());
                for (id, p) in &t.estimates {
                    h.update(id.0.to_le_bytes());
                    h.update(p.x.to_le_bytes());
                    h.update(p.y.to_le_bytes());
                }
                h.update(t.objective_value.to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: VehicleId,
    pub to: VehicleId,
    pub round: u8,
    pub payload: Payload,
}

/// One line of the exported message trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    /// Global emission order.
    pub seq: u64,
    pub round: u8,
    pub from: VehicleId,
    pub to: VehicleId,
    pub kind: PayloadKind,
    pub digest: String,
}

impl fmt::Display for TraceRecord {
    /// `round,from,to,kind,digest`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.round,
            self.from.0,
            self.to.0,
            self.kind.as_str(),
            self.digest
        )
    }
}

/// Directed message counts per protocol step (index 0 = step 1).
pub fn exchanged_message_count(graph: &NeighborGraph, mode: RangingMode) -> [usize; 5] {
    let directed = 2 * graph.edge_count();
    [
        match mode {
            RangingMode::Full => directed,
            RangingMode::Abstract => 0,
        },
        directed,
        0,
        directed,
        0,
    ]
}

/// How distances reach the agents in step 1.
#[derive(Debug, Clone, PartialEq)]
pub enum RangingInput {
    Full {
        constellation: Constellation<f64>,
        pseudoranges: BTreeMap<VehicleId, PseudorangeSet<f64>>,
    },
    Abstract {
        distances: DistanceTable<f64>,
    },
}

impl RangingInput {
    pub fn mode(&self) -> RangingMode {
        match self {
            RangingInput::Full { .. } => RangingMode::Full,
            RangingInput::Abstract { .. } => RangingMode::Abstract,
        }
    }
}

/// Sensor data available to the agents after noise generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub fixes: BTreeMap<VehicleId, GpsFix<f64>>,
    pub ranging: RangingInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// GPS error statistics assumed by the estimator.
    pub noise: NoiseModel<f64>,
    pub space: RoadSpace<f64>,
    pub weight_mode: WeightMode,
    pub solver: SolverOptions<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("protocol failed at {vehicle} in step {step}: {source}")]
pub struct ProtocolError {
    pub vehicle: VehicleId,
    pub step: u8,
    #[source]
    pub source: Error,
}

/// Everything an agent's estimator may read. Ground truth is not in here.
#[derive(Debug, Clone)]
struct AgentState {
    id: VehicleId,
    neighbors: Vec<VehicleId>,
    fix: GpsFix<f64>,
    pseudoranges: Option<PseudorangeSet<f64>>,
    injected: BTreeMap<VehicleId, f64>,
    inbox: Vec<Message>,
    received_pseudoranges: BTreeMap<VehicleId, PseudorangeSet<f64>>,
    fixes: FixMap<f64>,
    distances: DistanceTable<f64>,
    tentatives: BTreeMap<VehicleId, TentativeEstimateSet<f64>>,
    solver_failure: Option<String>,
    result: Option<FinalEstimate<f64>>,
}

/// A vehicle in the simulation: hidden ground truth plus estimator state.
#[derive(Debug, Clone)]
pub struct VehicleAgent {
    pub id: VehicleId,
    /// Ground truth; only the harness may read it.
    pub true_position: Vec2<f64>,
    state: AgentState,
}

impl VehicleAgent {
    pub fn fix(&self) -> &GpsFix<f64> {
        &self.state.fix
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub finals: BTreeMap<VehicleId, FinalEstimate<f64>>,
    pub tentatives: BTreeMap<VehicleId, TentativeEstimateSet<f64>>,
    /// Vehicles without neighbors; their final estimate is the raw fix.
    pub isolated: BTreeSet<VehicleId>,
    /// Pivots whose solve did not converge (last iterate used).
    pub solver_failures: Vec<(VehicleId, String)>,
    /// Distances as computed by the agents in step 1/3.
    pub distances: DistanceTable<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Prepared protocol run over a fixed snapshot.
#[derive(Debug, Clone)]
pub struct Protocol {
    graph: NeighborGraph,
    agents: Vec<VehicleAgent>,
    constellation: Option<Constellation<f64>>,
    config: ProtocolConfig,
    mode: RangingMode,
}

impl Protocol {
    pub fn new(
        snapshot: &TrafficSnapshot,
        graph: &NeighborGraph,
        observations: &Observations,
        config: &ProtocolConfig,
    ) -> Result<Self> {
        let mut agents = Vec::with_capacity(snapshot.len());
        for (id, truth) in snapshot.vehicles() {
            let neighbors: Vec<VehicleId> = graph
                .neighbors(*id)
                .ok_or(Error::UnknownVehicle(*id))?
                .iter()
                .copied()
                .collect();
            let fix = *observations.fixes.get(id).ok_or(Error::MissingFix(*id))?;
            let (pseudoranges, injected) = match &observations.ranging {
                RangingInput::Full { pseudoranges, .. } => (
                    Some(
                        pseudoranges
                            .get(id)
                            .cloned()
                            .ok_or_else(|| {
                                Error::InvalidInput(format!("no pseudoranges for {id}"))
                            })?,
                    ),
                    BTreeMap::new(),
                ),
                RangingInput::Abstract { distances } => {
                    let mut m = BTreeMap::new();
                    for n in &neighbors {
                        let d = distances
                            .get(*id, *n)
                            .ok_or(Error::MissingDistance(*id, *n))?;
                        m.insert(*n, d);
                    }
                    (None, m)
                }
            };
            agents.push(VehicleAgent {
                id: *id,
                true_position: *truth,
                state: AgentState {
                    id: *id,
                    neighbors,
                    fix,
                    pseudoranges,
                    injected,
                    inbox: Vec::new(),
                    received_pseudoranges: BTreeMap::new(),
                    fixes: FixMap::new(),
                    distances: DistanceTable::new(),
                    tentatives: BTreeMap::new(),
                    solver_failure: None,
                    result: None,
                },
            });
        }
        let constellation = match &observations.ranging {
            RangingInput::Full { constellation, .. } => Some(constellation.clone()),
            RangingInput::Abstract { .. } => None,
        };
        Ok(Self {
            graph: graph.clone(),
            agents,
            constellation,
            config: config.clone(),
            mode: observations.ranging.mode(),
        })
    }

    pub fn agents(&self) -> &[VehicleAgent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [VehicleAgent] {
        &mut self.agents
    }

    /// Runs steps 1–5 with the single-threaded reference scheduler.
    pub fn run(mut self) -> std::result::Result<ProtocolOutcome, ProtocolError> {
        let mut trace = Vec::new();
        let mut seq = 0u64;

        for round in 1u8..=5 {
            let mut outgoing = Vec::new();
            for agent in &mut self.agents {
                let state = &mut agent.state;
                let inbound = std::mem::take(&mut state.inbox);
                let fail = |source| ProtocolError {
                    vehicle: state.id,
                    step: round,
                    source,
                };
                if let Some(m) = inbound.iter().find(|m| m.round >= round) {
                    return Err(fail(Error::InvalidInput(format!(
                        "message from round {} consumed in round {round}",
                        m.round
                    ))));
                }
                let emitted = match round {
                    1 => state.step_share_pseudoranges(self.mode),
                    2 => {
                        state.receive(inbound);
                        state.step_share_fix()
                    }
                    3 => {
                        state.receive(inbound);
                        state
                            .step_solve(self.constellation.as_ref(), &self.config)
                            .map_err(|e| ProtocolError {
                                vehicle: state.id,
                                step: round,
                                source: e,
                            })?;
                        Vec::new()
                    }
                    4 => {
                        state.receive(inbound);
                        state.step_share_tentative()
                    }
                    _ => {
                        state.receive(inbound);
                        state
                            .step_fuse(self.config.weight_mode)
                            .map_err(|e| ProtocolError {
                                vehicle: state.id,
                                step: round,
                                source: e,
                            })?;
                        Vec::new()
                    }
                };
                for m in emitted {
                    trace.push(TraceRecord {
                        seq,
                        round: m.round,
                        from: m.from,
                        to: m.to,
                        kind: m.payload.kind(),
                        digest: m.payload.digest(),
                    });
                    seq += 1;
                    outgoing.push(m);
                }
            }
            // barrier: deliver everything emitted in this round
            for m in outgoing {
                if !self.graph.has_edge(m.from, m.to) {
                    return Err(ProtocolError {
                        vehicle: m.from,
                        step: round,
                        source: Error::InvalidInput(format!("{} is not a neighbor", m.to)),
                    });
                }
                if let Some(dest) = self.agents.iter_mut().find(|a| a.id == m.to) {
                    dest.state.inbox.push(m);
                }
            }
        }

        let mut outcome = ProtocolOutcome {
            finals: BTreeMap::new(),
            tentatives: BTreeMap::new(),
            isolated: BTreeSet::new(),
            solver_failures: Vec::new(),
            distances: DistanceTable::new(),
            trace,
        };
        for agent in self.agents {
            let s = agent.state;
            if s.neighbors.is_empty() {
                outcome.isolated.insert(s.id);
            }
            if let Some(reason) = s.solver_failure {
                outcome.solver_failures.push((s.id, reason));
            }
            for m in s.distances.iter() {
                outcome.distances.insert(m);
            }
            if let Some(own) = s.tentatives.get(&s.id) {
                outcome.tentatives.insert(s.id, own.clone());
            }
            if let Some(f) = s.result {
                outcome.finals.insert(s.id, f);
            }
        }
        Ok(outcome)
    }
}

impl AgentState {
    fn send(&self, round: u8, payload: Payload) -> Vec<Message> {
        self.neighbors
            .iter()
            .map(|to| Message {
                from: self.id,
                to: *to,
                round,
                payload: payload.clone(),
            })
            .collect()
    }

    fn receive(&mut self, inbound: Vec<Message>) {
        for m in inbound {
            match m.payload {
                Payload::PseudorangeShare(set) => {
                    self.received_pseudoranges.insert(m.from, set);
                }
                Payload::FixShare(fix) => {
                    self.fixes.insert(fix.vehicle_id, fix.position);
                }
                Payload::TentativeShare(t) => {
                    self.tentatives.insert(t.pivot, t);
                }
            }
        }
    }

    fn step_share_pseudoranges(&mut self, mode: RangingMode) -> Vec<Message> {
        match (mode, &self.pseudoranges) {
            (RangingMode::Full, Some(set)) => self.send(1, Payload::PseudorangeShare(set.clone())),
            _ => Vec::new(),
        }
    }

    fn step_share_fix(&mut self) -> Vec<Message> {
        self.fixes.insert(self.id, self.fix.position);
        self.send(2, Payload::FixShare(self.fix))
    }

    /// Ranging to every neighbor, then the pivot solve.
    fn step_solve(
        &mut self,
        constellation: Option<&Constellation<f64>>,
        config: &ProtocolConfig,
    ) -> Result<()> {
        if self.neighbors.is_empty() {
            return Ok(());
        }
        for n in self.neighbors.clone() {
            let d = match (&self.pseudoranges, constellation) {
                (Some(own), Some(k)) => {
                    let theirs = self.received_pseudoranges.get(&n).ok_or_else(|| {
                        Error::InvalidInput(format!("no pseudoranges received from {n}"))
                    })?;
                    let their_fix = *self.fixes.get(&n).ok_or(Error::MissingFix(n))?;
                    let mine = (self.id, own, self.fix.position);
                    let other = (n, theirs, their_fix);
                    // evaluate once per undirected pair in canonical order
                    let (a, b) = if self.id < n { (mine, other) } else { (other, mine) };
                    let system = build_system(
                        a.1,
                        b.1,
                        &WorldPoint::on_road(a.2.x, a.2.y),
                        &WorldPoint::on_road(b.2.x, b.2.y),
                        k,
                    )?;
                    wls_baseline(&system)?.distance
                }
                _ => *self
                    .injected
                    .get(&n)
                    .ok_or(Error::MissingDistance(self.id, n))?,
            };
            self.distances.insert(DistanceMeasurement::new(self.id, n, d)?);
        }

        let subset = Subset::new(self.id, self.neighbors.iter().copied())?;
        let tentative = match solve_tentative(
            &subset,
            &self.fixes,
            &self.distances,
            &config.noise,
            &config.space,
            &config.solver,
        ) {
            Ok(t) => t,
            Err(SolveError::NonConvergence { pivot, last }) => {
                self.solver_failure = Some(format!(
                    "pivot {pivot}: violation {:.3e}, projected gradient {:.3e}",
                    last.stats.max_violation, last.stats.projected_gradient
                ));
                *last
            }
            Err(SolveError::Invalid(e)) => return Err(e),
        };
        self.tentatives.insert(self.id, tentative);
        Ok(())
    }

    fn step_share_tentative(&mut self) -> Vec<Message> {
        match self.tentatives.get(&self.id) {
            Some(t) => self.send(4, Payload::TentativeShare(t.clone())),
            None => Vec::new(),
        }
    }

    fn step_fuse(&mut self, mode: WeightMode) -> Result<()> {
        if self.neighbors.is_empty() {
            self.result = Some(FinalEstimate {
                vehicle_id: self.id,
                position: self.fix.position,
                contributing_pivots: vec![(self.id, 1.0)],
            });
            return Ok(());
        }
        let subset = Subset::new(self.id, self.neighbors.iter().copied())?;
        let weights: BTreeMap<VehicleId, PivotWeight> = self
            .tentatives
            .iter()
            .map(|(pivot, t)| {
                let size = t.len() as u32;
                let weight = match mode {
                    WeightMode::Subset => size,
                    WeightMode::Neighbors => size.saturating_sub(1),
                };
                (*pivot, PivotWeight { pivot: *pivot, weight })
            })
            .collect();
        self.result = Some(final_estimate(self.id, &subset, &self.tentatives, &weights)?);
        Ok(())
    }
}

/// Builds and runs the protocol in one call.
pub fn run_protocol(
    snapshot: &TrafficSnapshot,
    graph: &NeighborGraph,
    observations: &Observations,
    config: &ProtocolConfig,
) -> std::result::Result<ProtocolOutcome, ProtocolError> {
    let protocol = Protocol::new(snapshot, graph, observations, config).map_err(|e| {
        ProtocolError {
            vehicle: VehicleId(0),
            step: 0,
            source: e,
        }
    })?;
    protocol.run()
}
