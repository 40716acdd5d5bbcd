//! Flat Cartesian world frame: points, satellites, line-of-sight geometry.
//!
//! Vehicles live on the road plane `z = 0`; satellites sit on a sphere of
//! radius [`SATELLITE_RADIUS`] around the road-space center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Real, Result, SatId};

/// GPS-like orbit radius measured from the road-space center, meters.
pub const SATELLITE_RADIUS: f64 = 2.02e7;
/// Minimum distance of any satellite from the world origin, meters.
pub const MIN_SATELLITE_DISTANCE: f64 = 1.0e7;
/// Minimum pairwise separation of satellites within a constellation, meters.
pub const MIN_SATELLITE_SEPARATION: f64 = 1.0e6;
/// Fewest satellites that still permit localization.
pub const MIN_SATELLITES: usize = 4;
/// Lowest elevation accepted for generated satellites, radians (5°).
pub const MIN_ELEVATION: f64 = 5.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldPoint<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> WorldPoint<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    /// A point on the road plane.
    pub fn on_road(x: T, y: T) -> Self {
        Self { x, y, z: T::zero() }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(&self, other: &Self) -> [T; 3] {
        [self.x - other.x, self.y - other.y, self.z - other.z]
    }

    pub fn norm(&self) -> T {
        norm3(&[self.x, self.y, self.z])
    }

    pub fn distance(&self, other: &Self) -> T {
        norm3(&self.sub(other))
    }

    pub fn midpoint(&self, other: &Self) -> Self {
        let half = T::lit(0.5);
        Self {
            x: (self.x + other.x) * half,
            y: (self.y + other.y) * half,
            z: (self.z + other.z) * half,
        }
    }
}

pub(crate) fn norm3<T: Real>(v: &[T; 3]) -> T {
    // hypot keeps the 2e7-scale components from losing precision in the square
    v[0].hypot(v[1]).hypot(v[2])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector<T> {
    pub ux: T,
    pub uy: T,
    pub uz: T,
}

impl<T: Real> UnitVector<T> {
    pub fn as_array(&self) -> [T; 3] {
        [self.ux, self.uy, self.uz]
    }

    pub fn dot(&self, v: &[T; 3]) -> T {
        self.ux * v[0] + self.uy * v[1] + self.uz * v[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteState<T> {
    pub id: SatId,
    pub position: WorldPoint<T>,
    /// Error shared by every receiver in the vicinity (satellite clock,
    /// atmosphere, ephemeris), meters.
    pub common_noise: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation<T> {
    satellites: Vec<SatelliteState<T>>,
}

impl<T: Real> Constellation<T> {
    /// Validates count, id uniqueness, far-field distance and separation.
    pub fn new(satellites: Vec<SatelliteState<T>>) -> Result<Self> {
        if satellites.len() < MIN_SATELLITES {
            return Err(Error::InsufficientSatellites {
                found: satellites.len(),
                required: MIN_SATELLITES,
            });
        }
        for (i, s) in satellites.iter().enumerate() {
            if !s.position.is_finite() || !s.common_noise.is_finite() {
                return Err(Error::InvalidInput(format!("{} has non-finite state", s.id)));
            }
            if s.position.norm() < T::lit(MIN_SATELLITE_DISTANCE) {
                return Err(Error::InvalidInput(format!(
                    "{} is closer than {MIN_SATELLITE_DISTANCE} m to the origin",
                    s.id
                )));
            }
            for other in &satellites[i + 1..] {
                if other.id == s.id {
                    return Err(Error::InvalidInput(format!("duplicate satellite id {}", s.id)));
                }
                if s.position.distance(&other.position) < T::lit(MIN_SATELLITE_SEPARATION) {
                    return Err(Error::InvalidInput(format!(
                        "{} and {} are closer than {MIN_SATELLITE_SEPARATION} m",
                        s.id, other.id
                    )));
                }
            }
        }
        Ok(Self { satellites })
    }

    pub fn satellites(&self) -> &[SatelliteState<T>] {
        &self.satellites
    }

    pub fn len(&self) -> usize {
        self.satellites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.satellites.is_empty()
    }

    pub fn get(&self, id: SatId) -> Option<&SatelliteState<T>> {
        self.satellites.iter().find(|s| s.id == id)
    }

    /// Replaces every satellite's common noise, in constellation order.
    pub fn with_common_noise(mut self, noise: impl IntoIterator<Item = T>) -> Self {
        for (sat, n) in self.satellites.iter_mut().zip(noise) {
            sat.common_noise = n;
        }
        self
    }
}

/// Direction from `receiver` to the satellite, normalized.
pub fn unit_vector<T: Real>(
    receiver: &WorldPoint<T>,
    sat: &SatelliteState<T>,
) -> Result<UnitVector<T>> {
    let d = sat.position.sub(receiver);
    let n = norm3(&d);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::DegenerateGeometry(format!(
            "receiver coincides with {} or has non-finite coordinates",
            sat.id
        )));
    }
    Ok(UnitVector {
        ux: d[0] / n,
        uy: d[1] / n,
        uz: d[2] / n,
    })
}

/// Angle of the receiver→satellite line above the road plane, in [−π/2, π/2].
pub fn elevation_angle<T: Real>(receiver: &WorldPoint<T>, sat: &SatelliteState<T>) -> Result<T> {
    let d = sat.position.sub(receiver);
    let horizontal = d[0].hypot(d[1]);
    if horizontal == T::zero() && d[2] == T::zero() {
        return Err(Error::DegenerateGeometry(format!(
            "receiver coincides with {}",
            sat.id
        )));
    }
    Ok(d[2].atan2(horizontal))
}

/// Places `n` satellites on a sphere of radius [`SATELLITE_RADIUS`] around
/// `center`, with uniformly drawn azimuths in [0, 2π) and elevations in
/// `elevation_range` (radians). Draws violating the separation invariant are
/// redrawn. Satellites are numbered from 1 and carry zero common noise.
pub fn make_constellation<T: Real>(
    n: usize,
    seed: u64,
    elevation_range: (f64, f64),
    center: &WorldPoint<T>,
) -> Result<Constellation<T>> {
    if n < MIN_SATELLITES {
        return Err(Error::InsufficientSatellites {
            found: n,
            required: MIN_SATELLITES,
        });
    }
    let (lo, hi) = elevation_range;
    if !(lo >= MIN_ELEVATION - 1e-12 && lo <= hi && hi <= std::f64::consts::FRAC_PI_2) {
        return Err(Error::InvalidInput(format!(
            "elevation range [{lo}, {hi}] rad must lie within [5°, 90°]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [center.x.as_f64(), center.y.as_f64(), center.z.as_f64()];
    let mut placed: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while placed.len() < n {
        attempts += 1;
        if attempts > 10_000 * n {
            return Err(Error::InvalidInput(format!(
                "cannot place {n} satellites with {MIN_SATELLITE_SEPARATION} m separation"
            )));
        }
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let p = [
            c[0] + SATELLITE_RADIUS * el.cos() * az.cos(),
            c[1] + SATELLITE_RADIUS * el.cos() * az.sin(),
            c[2] + SATELLITE_RADIUS * el.sin(),
        ];
        let separated = placed.iter().all(|q| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            norm3(&d) >= MIN_SATELLITE_SEPARATION
        });
        if separated {
            placed.push(p);
        }
    }
    let satellites = placed
        .into_iter()
        .enumerate()
        .map(|(i, p)| SatelliteState {
            id: SatId(i as u32 + 1),
            position: WorldPoint::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2])),
            common_noise: T::zero(),
        })
        .collect();
    Constellation::new(satellites)
}
