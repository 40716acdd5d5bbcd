//! Distributed location estimation.
//!
//! Every vehicle `k` is the pivot of a subset `V^k` (itself plus its
//! neighbors). The pivot solves a maximum-likelihood problem over the GPS
//! fixes of `V^k`, constrained so each neighbor sits at the measured distance
//! from the pivot and everything stays inside the road box. Each vehicle then
//! fuses the tentative locations computed for it by all pivots of its own
//! subset, weighting pivot `s` by the size of `V^s`.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Add, Mul, Sub};

use crate::netsim::NeighborGraph;
use crate::{Error, Real, Result, VehicleId};

mod solver;

pub use solver::{solve_tentative, SolveError, SolveStats, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> T {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &Self) -> T {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Real> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

/// A vehicle's standalone GPS position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix<T> {
    pub vehicle_id: VehicleId,
    pub position: Vec2<T>,
}

/// GPS fixes indexed by vehicle.
pub type FixMap<T> = BTreeMap<VehicleId, Vec2<T>>;

/// Per-axis Gaussian GPS error statistics.
///
/// A zero standard deviation is representable (noise-free generation) but
/// the estimator requires both deviations to be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel<T> {
    pub mean: Vec2<T>,
    pub stddev: Vec2<T>,
}

impl<T: Real> NoiseModel<T> {
    pub fn new(mean: Vec2<T>, stddev: Vec2<T>) -> Result<Self> {
        if !mean.is_finite() || !stddev.is_finite() {
            return Err(Error::InvalidInput("noise model must be finite".into()));
        }
        if stddev.x < T::zero() || stddev.y < T::zero() {
            return Err(Error::InvalidInput(format!(
                "noise standard deviation must be non-negative, got ({}, {})",
                stddev.x, stddev.y
            )));
        }
        Ok(Self { mean, stddev })
    }

    /// Zero-mean, equal deviation on both axes.
    pub fn isotropic(sigma: T) -> Result<Self> {
        Self::new(Vec2::default(), Vec2::new(sigma, sigma))
    }

    pub fn is_estimable(&self) -> bool {
        self.stddev.x > T::zero() && self.stddev.y > T::zero()
    }

    /// Same model with both deviations multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            mean: self.mean,
            stddev: self.stddev * factor,
        }
    }
}

/// Rectangular road-space box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadSpace<T> {
    pub x_bounds: (T, T),
    pub y_bounds: (T, T),
}

impl<T: Real> RoadSpace<T> {
    pub fn new(x_bounds: (T, T), y_bounds: (T, T)) -> Result<Self> {
        let ok = |(lo, hi): (T, T)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(x_bounds) || !ok(y_bounds) {
            return Err(Error::InvalidInput(format!(
                "road space bounds must satisfy lb < ub: x {:?}, y {:?}",
                x_bounds, y_bounds
            )));
        }
        Ok(Self { x_bounds, y_bounds })
    }

    pub fn clamp(&self, p: Vec2<T>) -> Vec2<T> {
        Vec2::new(
            p.x.max(self.x_bounds.0).min(self.x_bounds.1),
            p.y.max(self.y_bounds.0).min(self.y_bounds.1),
        )
    }

    pub fn contains(&self, p: &Vec2<T>) -> bool {
        p.x >= self.x_bounds.0
            && p.x <= self.x_bounds.1
            && p.y >= self.y_bounds.0
            && p.y <= self.y_bounds.1
    }

    /// Longest distance two points in the box can be apart.
    pub fn diagonal(&self) -> T {
        (self.x_bounds.1 - self.x_bounds.0).hypot(self.y_bounds.1 - self.y_bounds.0)
    }
}

/// Measured distance between two vehicles. The pair is stored ordered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMeasurement<T> {
    pub pair: (VehicleId, VehicleId),
    pub value: T,
}

impl<T: Real> DistanceMeasurement<T> {
    pub fn new(a: VehicleId, b: VehicleId, value: T) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidInput(format!("distance from {a} to itself")));
        }
        if !(value >= T::zero()) || !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "distance between {a} and {b} must be non-negative, got {value}"
            )));
        }
        Ok(Self {
            pair: (a.min(b), a.max(b)),
            value,
        })
    }
}

/// Symmetric lookup of distance measurements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistanceTable<T> {
    entries: BTreeMap<(VehicleId, VehicleId), T>,
}

impl<T: Real> DistanceTable<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, m: DistanceMeasurement<T>) {
        self.entries.insert(m.pair, m.value);
    }

    pub fn get(&self, a: VehicleId, b: VehicleId) -> Option<T> {
        self.entries.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = DistanceMeasurement<T>> + '_ {
        self.entries
            .iter()
            .map(|(&pair, &value)| DistanceMeasurement { pair, value })
    }
}

impl<T: Real> FromIterator<DistanceMeasurement<T>> for DistanceTable<T> {
    fn from_iter<I: IntoIterator<Item = DistanceMeasurement<T>>>(iter: I) -> Self {
        let mut t = Self::new();
        for m in iter {
            t.insert(m);
        }
        t
    }
}

/// A pivot and its neighborhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subset {
    pivot: VehicleId,
    members: BTreeSet<VehicleId>,
}

impl Subset {
    /// Builds a subset from explicit neighbors.
    pub fn new(pivot: VehicleId, neighbors: impl IntoIterator<Item = VehicleId>) -> Result<Self> {
        let mut members: BTreeSet<VehicleId> = neighbors.into_iter().collect();
        members.insert(pivot);
        if members.len() < 2 {
            return Err(Error::IsolatedVehicle(pivot));
        }
        Ok(Self { pivot, members })
    }

    pub fn pivot(&self) -> VehicleId {
        self.pivot
    }

    pub fn members(&self) -> &BTreeSet<VehicleId> {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, v: VehicleId) -> bool {
        self.members.contains(&v)
    }

    pub fn neighbors(&self) -> impl Iterator<Item = VehicleId> + '_ {
        let pivot = self.pivot;
        self.members.iter().copied().filter(move |v| *v != pivot)
    }
}

pub fn build_subset(pivot: VehicleId, graph: &NeighborGraph) -> Result<Subset> {
    let neighbors = graph
        .neighbors(pivot)
        .ok_or(Error::UnknownVehicle(pivot))?;
    if neighbors.is_empty() {
        return Err(Error::IsolatedVehicle(pivot));
    }
    Subset::new(pivot, neighbors.iter().copied())
}

/// How pivot weights are derived from a subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// `w_k = |V^k|`.
    #[default]
    Subset,
    /// `w_k = |N_k| = |V^k| - 1`.
    Neighbors,
}

impl WeightMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightMode::Subset => "subset",
            WeightMode::Neighbors => "neighbors",
        }
    }
}

impl std::str::FromStr for WeightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subset" => Ok(Self::Subset),
            "neighbors" => Ok(Self::Neighbors),
            other => Err(Error::InvalidInput(format!(
                "weight mode must be `subset` or `neighbors`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PivotWeight {
    pub pivot: VehicleId,
    pub weight: u32,
}

pub fn pivot_weight(subset: &Subset) -> PivotWeight {
    pivot_weight_with(subset, WeightMode::Subset)
}

pub fn pivot_weight_with(subset: &Subset, mode: WeightMode) -> PivotWeight {
    let n = subset.len() as u32;
    PivotWeight {
        pivot: subset.pivot(),
        weight: match mode {
            WeightMode::Subset => n,
            WeightMode::Neighbors => n - 1,
        },
    }
}

/// Sum of per-vehicle negative log-likelihood terms
/// `(v̂_x - ṽ_x - μ_x)² / 2σ_x² + (v̂_y - ṽ_y - μ_y)² / 2σ_y²`.
pub fn objective<T: Real>(
    estimates: &BTreeMap<VehicleId, Vec2<T>>,
    fixes: &FixMap<T>,
    noise: &NoiseModel<T>,
) -> Result<T> {
    let two = T::lit(2.0);
    let (vx, vy) = (
        two * noise.stddev.x * noise.stddev.x,
        two * noise.stddev.y * noise.stddev.y,
    );
    let mut acc = T::zero();
    for (id, est) in estimates {
        let fix = fixes.get(id).ok_or(Error::MissingFix(*id))?;
        let rx = est.x - fix.x - noise.mean.x;
        let ry = est.y - fix.y - noise.mean.y;
        acc = acc + rx * rx / vx + ry * ry / vy;
    }
    Ok(acc)
}

/// Analytic gradient of [`objective`] with respect to every estimate.
pub fn objective_gradient<T: Real>(
    estimates: &BTreeMap<VehicleId, Vec2<T>>,
    fixes: &FixMap<T>,
    noise: &NoiseModel<T>,
) -> Result<BTreeMap<VehicleId, Vec2<T>>> {
    let (vx, vy) = (
        noise.stddev.x * noise.stddev.x,
        noise.stddev.y * noise.stddev.y,
    );
    estimates
        .iter()
        .map(|(id, est)| {
            let fix = fixes.get(id).ok_or(Error::MissingFix(*id))?;
            Ok((
                *id,
                Vec2::new(
                    (est.x - fix.x - noise.mean.x) / vx,
                    (est.y - fix.y - noise.mean.y) / vy,
                ),
            ))
        })
        .collect()
}

/// A pivot's solved tentative locations for its subset.
#[derive(Debug, Clone, PartialEq)]
pub struct TentativeEstimateSet<T> {
    pub pivot: VehicleId,
    pub estimates: BTreeMap<VehicleId, Vec2<T>>,
    pub objective_value: T,
    pub stats: SolveStats<T>,
}

impl<T: Real> TentativeEstimateSet<T> {
    pub fn members(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.estimates.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalEstimate<T> {
    pub vehicle_id: VehicleId,
    pub position: Vec2<T>,
    /// `(pivot, w_s / Σ w)` for every pivot of the vehicle's subset.
    pub contributing_pivots: Vec<(VehicleId, T)>,
}

/// Weighted fusion of the tentative locations computed for `vehicle` by the
/// pivots of its own subset.
///
/// `subset` must be `V^vehicle`; `tentatives` and `weights` are keyed by pivot.
pub fn final_estimate<T: Real>(
    vehicle: VehicleId,
    subset: &Subset,
    tentatives: &BTreeMap<VehicleId, TentativeEstimateSet<T>>,
    weights: &BTreeMap<VehicleId, PivotWeight>,
) -> Result<FinalEstimate<T>> {
    if subset.pivot() != vehicle {
        return Err(Error::InvalidInput(format!(
            "fusion for {vehicle} needs its own subset, got pivot {}",
            subset.pivot()
        )));
    }
    let missing: Vec<VehicleId> = subset
        .members()
        .iter()
        .copied()
        .filter(|s| {
            !weights.contains_key(s)
                || !tentatives
                    .get(s)
                    .is_some_and(|t| t.estimates.contains_key(&vehicle))
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteFusion { vehicle, missing });
    }

    let total: u64 = subset
        .members()
        .iter()
        .map(|s| weights[s].weight as u64)
        .sum();
    if total == 0 {
        return Err(Error::InvalidInput(format!(
            "pivot weights for {vehicle} sum to zero"
        )));
    }
    let total = T::lit(total as f64);
    let mut position = Vec2::new(T::zero(), T::zero());
    let mut contributing = Vec::with_capacity(subset.len());
    for s in subset.members() {
        let w = T::lit(weights[s].weight as f64) / total;
        position = position + tentatives[s].estimates[&vehicle] * w;
        contributing.push((*s, w));
    }
    Ok(FinalEstimate {
        vehicle_id: vehicle,
        position,
        contributing_pivots: contributing,
    })
}
