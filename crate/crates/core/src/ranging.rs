//! Inter-vehicle baseline from shared raw pseudoranges.
//!
//! A pseudorange decomposes into true range, receiver clock bias, a
//! satellite-common error and receiver-specific noise. Differencing two
//! receivers' measurements of the same satellite removes the common error;
//! differencing again against a reference satellite removes both clock
//! biases. With far-field unit vectors the double differences are linear in
//! the baseline `r_ab = p_b - p_a`, which is then recovered by (weighted)
//! least squares with CNR-derived weights.

use crate::geo::{unit_vector, Constellation, WorldPoint};
use crate::linalg::{solve3, symmetric_eigenvalues, Mat3};
use crate::{Error, Real, Result, SatId, VehicleId};

/// Grid on which synthesized measurement terms are expressed, meters (2⁻²⁰).
///
/// Sums and differences of grid values below 2³³ m are exact in `f64`, so
/// common-noise and clock-bias cancellation holds bit for bit.
pub const MEASUREMENT_RESOLUTION: f64 = 1.0 / 1_048_576.0;

/// Scale of the receiver noise law `σ_ε(φ) = c / φ`, meters·dB-Hz.
pub const NOISE_CNR_SCALE: f64 = 30.0;

/// Largest accepted condition number of the (weighted) normal matrix.
pub const MAX_CONDITION: f64 = 1e10;

/// Fewest shared satellites needed for a baseline (three double differences).
pub const MIN_SHARED_SATELLITES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudorangeObservation<T> {
    pub sat_id: SatId,
    /// Measured pseudorange, meters.
    pub value: T,
    /// Carrier-to-noise ratio, dB-Hz.
    pub cnr: T,
}

impl<T: Real> PseudorangeObservation<T> {
    pub fn new(sat_id: SatId, value: T, cnr: T) -> Result<Self> {
        if !(value > T::zero()) || !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "pseudorange for {sat_id} must be positive, got {value}"
            )));
        }
        if !(cnr > T::zero()) || !cnr.is_finite() {
            return Err(Error::InvalidInput(format!(
                "CNR for {sat_id} must be positive, got {cnr}"
            )));
        }
        Ok(Self { sat_id, value, cnr })
    }
}

/// One receiver's measurements for an epoch, ordered by satellite id.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudorangeSet<T> {
    pub receiver_id: VehicleId,
    /// Receiver clock bias expressed in meters. Carried for bookkeeping of
    /// the synthesis; the estimator never uses it.
    pub clock_bias: T,
    observations: Vec<PseudorangeObservation<T>>,
}

impl<T: Real> PseudorangeSet<T> {
    pub fn new(
        receiver_id: VehicleId,
        clock_bias: T,
        mut observations: Vec<PseudorangeObservation<T>>,
    ) -> Result<Self> {
        observations.sort_by_key(|o| o.sat_id);
        if let Some(w) = observations.windows(2).find(|w| w[0].sat_id == w[1].sat_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate observation of {} for receiver {receiver_id}",
                w[0].sat_id
            )));
        }
        Ok(Self {
            receiver_id,
            clock_bias,
            observations,
        })
    }

    pub fn observations(&self) -> &[PseudorangeObservation<T>] {
        &self.observations
    }

    pub fn get(&self, sat_id: SatId) -> Option<&PseudorangeObservation<T>> {
        self.observations
            .binary_search_by_key(&sat_id, |o| o.sat_id)
            .ok()
            .map(|i| &self.observations[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleDifference<T> {
    pub sat_id: SatId,
    pub value: T,
}

/// Double differences `D`, geometry `H` and diagonal weights `W` for one
/// receiver pair. Row `k` relates satellite `sat_ids[k]` to the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSystem<T> {
    pub reference_sat: SatId,
    sat_ids: Vec<SatId>,
    dd: Vec<T>,
    geometry: Vec<[T; 3]>,
    weights: Vec<T>,
}

impl<T: Real> DifferenceSystem<T> {
    pub fn new(
        reference_sat: SatId,
        sat_ids: Vec<SatId>,
        dd: Vec<T>,
        geometry: Vec<[T; 3]>,
        weights: Vec<T>,
    ) -> Result<Self> {
        let n = dd.len();
        if sat_ids.len() != n || geometry.len() != n || weights.len() != n {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {} ids, {n} differences, {} geometry rows, {} weights",
                sat_ids.len(),
                geometry.len(),
                weights.len()
            )));
        }
        let two = T::lit(2.0) * (T::one() + T::lit(1e3) * T::epsilon());
        for row in &geometry {
            if !(row[0].hypot(row[1]).hypot(row[2]) <= two) {
                return Err(Error::InvalidInput(
                    "geometry row is not a difference of unit vectors".into(),
                ));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(**w > T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("weight {w} is not strictly positive")));
        }
        Ok(Self {
            reference_sat,
            sat_ids,
            dd,
            geometry,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.dd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dd.is_empty()
    }

    pub fn sat_ids(&self) -> &[SatId] {
        &self.sat_ids
    }

    pub fn dd(&self) -> &[T] {
        &self.dd
    }

    pub fn geometry(&self) -> &[[T; 3]] {
        &self.geometry
    }

    /// Diagonal of `W`.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Same system with every weight multiplied by `factor`.
    pub fn scaled_weights(&self, factor: T) -> Result<Self> {
        let weights = self.weights.iter().map(|w| *w * factor).collect();
        Self::new(
            self.reference_sat,
            self.sat_ids.clone(),
            self.dd.clone(),
            self.geometry.clone(),
            weights,
        )
    }

    /// Same system with `W = I`.
    pub fn unweighted(&self) -> Self {
        Self {
            weights: vec![T::one(); self.dd.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineEstimate<T> {
    /// Displacement from receiver a to receiver b, meters.
    pub vector: [T; 3],
    /// Euclidean length of `vector`, meters.
    pub distance: T,
}

impl<T: Real> BaselineEstimate<T> {
    fn from_vector(vector: [T; 3]) -> Self {
        Self {
            vector,
            distance: vector[0].hypot(vector[1]).hypot(vector[2]),
        }
    }
}

/// `PR = R + t + x + ε`.
pub fn synthesize_pseudorange<T: Real>(
    true_range: T,
    clock_bias: T,
    common_noise: T,
    noncommon_noise: T,
) -> Result<T> {
    if !(true_range > T::zero()) || !true_range.is_finite() {
        return Err(Error::InvalidRange(true_range.as_f64()));
    }
    Ok(true_range + clock_bias + common_noise + noncommon_noise)
}

/// Rounds a measurement term onto the [`MEASUREMENT_RESOLUTION`] grid.
pub fn quantize<T: Real>(value: T) -> T {
    let res = T::lit(MEASUREMENT_RESOLUTION);
    (value / res).round() * res
}

/// Standard deviation of receiver-specific noise at the given CNR.
pub fn noncommon_noise_std<T: Real>(cnr: T) -> T {
    T::lit(NOISE_CNR_SCALE) / cnr
}

pub fn single_difference<T: Real>(obs_a: T, obs_b: T) -> T {
    obs_a - obs_b
}

pub fn double_difference<T: Real>(sd_i: T, sd_j: T) -> T {
    sd_i - sd_j
}

/// Diagonal entry of the CNR weight matrix for one satellite.
pub fn cnr_weight<T: Real>(cnr_a: T, cnr_b: T) -> T {
    let a2 = cnr_a * cnr_a;
    let b2 = cnr_b * cnr_b;
    a2 * b2 / (a2 + b2)
}

/// Assembles the double-difference system for receivers `a` and `b`.
///
/// The reference satellite is the shared satellite with the highest
/// `min(φ_a, φ_b)` (lowest id on ties). Unit vectors are evaluated at the
/// midpoint of the two reported positions.
pub fn build_system<T: Real>(
    set_a: &PseudorangeSet<T>,
    set_b: &PseudorangeSet<T>,
    position_a: &WorldPoint<T>,
    position_b: &WorldPoint<T>,
    constellation: &Constellation<T>,
) -> Result<DifferenceSystem<T>> {
    let shared: Vec<(&PseudorangeObservation<T>, &PseudorangeObservation<T>)> = set_a
        .observations()
        .iter()
        .filter_map(|oa| set_b.get(oa.sat_id).map(|ob| (oa, ob)))
        .collect();
    if shared.len() < MIN_SHARED_SATELLITES {
        return Err(Error::InsufficientSatellites {
            found: shared.len(),
            required: MIN_SHARED_SATELLITES,
        });
    }

    let mut reference = 0;
    for (k, (oa, ob)) in shared.iter().enumerate() {
        let (ra, rb) = shared[reference];
        if oa.cnr.min(ob.cnr) > ra.cnr.min(rb.cnr) {
            reference = k;
        }
    }

    let origin = position_a.midpoint(position_b);
    let los = |sat_id: SatId| {
        let sat = constellation
            .get(sat_id)
            .ok_or(Error::UnknownSatellite(sat_id))?;
        unit_vector(&origin, sat)
    };

    let (ref_a, ref_b) = shared[reference];
    let ref_sd = single_difference(ref_a.value, ref_b.value);
    let ref_los = los(ref_a.sat_id)?.as_array();

    let n = shared.len() - 1;
    let mut sat_ids = Vec::with_capacity(n);
    let mut dd = Vec::with_capacity(n);
    let mut geometry = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (k, (oa, ob)) in shared.iter().enumerate() {
        if k == reference {
            continue;
        }
        let e = los(oa.sat_id)?.as_array();
        sat_ids.push(oa.sat_id);
        dd.push(double_difference(
            single_difference(oa.value, ob.value),
            ref_sd,
        ));
        geometry.push([e[0] - ref_los[0], e[1] - ref_los[1], e[2] - ref_los[2]]);
        weights.push(cnr_weight(oa.cnr, ob.cnr));
    }
    DifferenceSystem::new(ref_a.sat_id, sat_ids, dd, geometry, weights)
}

/// Ordinary least squares `(HᵀH)⁻¹HᵀD`.
pub fn ls_baseline<T: Real>(system: &DifferenceSystem<T>) -> Result<BaselineEstimate<T>> {
    solve_normal_equations(&system.geometry, &system.dd, None)
}

/// Weighted least squares `(HᵀWH)⁻¹HᵀWD`.
pub fn wls_baseline<T: Real>(system: &DifferenceSystem<T>) -> Result<BaselineEstimate<T>> {
    solve_normal_equations(&system.geometry, &system.dd, Some(&system.weights))
}

fn solve_normal_equations<T: Real>(
    geometry: &[[T; 3]],
    dd: &[T],
    weights: Option<&[T]>,
) -> Result<BaselineEstimate<T>> {
    if geometry.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} double differences cannot determine a 3D baseline",
            geometry.len()
        )));
    }
    let mut normal: Mat3<T> = [[T::zero(); 3]; 3];
    let mut rhs = [T::zero(); 3];
    for (k, (h, d)) in geometry.iter().zip(dd).enumerate() {
        let w = weights.map_or(T::one(), |w| w[k]);
        for r in 0..3 {
            rhs[r] = rhs[r] + w * h[r] * *d;
            for c in 0..3 {
                normal[r][c] = normal[r][c] + w * h[r] * h[c];
            }
        }
    }

    let ev = symmetric_eigenvalues(&normal);
    let limit = T::lit(MAX_CONDITION).min(T::lit(0.01) / T::epsilon());
    if !(ev[0] > T::zero()) || ev[2] / ev[0] > limit {
        return Err(Error::DegenerateGeometry(format!(
            "normal matrix condition number {} exceeds {}",
            (ev[2] / ev[0]).abs(),
            limit
        )));
    }
    let vector = solve3(&normal, &rhs)
        .ok_or_else(|| Error::DegenerateGeometry("singular normal matrix".into()))?;
    Ok(BaselineEstimate::from_vector(vector))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{make_constellation, SatelliteState};

    fn sat_at(id: u32, x: f64, y: f64, z: f64) -> SatelliteState<f64> {
        SatelliteState {
            id: SatId(id),
            position: WorldPoint::new(x, y, z),
            common_noise: 0.0,
        }
    }

    #[test]
    fn synthesize_examples() {
        assert_eq!(synthesize_pseudorange(2.02e7, 5.0, 3.0, 0.5).unwrap(), 2.02000085e7);
        assert_eq!(synthesize_pseudorange(2.02e7, 0.0, 0.0, 0.0).unwrap(), 2.02e7);
        let v: f64 = synthesize_pseudorange(1e7, -2.5, 1.2, -0.3).unwrap();
        assert!((v - 9_999_998.4).abs() < 1e-8);
    }

    #[test]
    fn synthesize_rejects_non_positive_range() {
        assert_eq!(
            synthesize_pseudorange(0.0, 1.0, 0.0, 0.0),
            Err(Error::InvalidRange(0.0))
        );
        assert!(synthesize_pseudorange(-5.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn single_difference_examples() {
        assert_eq!(single_difference(100.0, 97.5), 2.5);
        assert_eq!(single_difference(1234.5678, 1234.5678), 0.0);
    }

    #[test]
    fn single_difference_cancels_common_noise() {
        let ra = quantize(20_200_123.456_789);
        let rb = quantize(20_200_077.001_234);
        let ta = quantize(12.3);
        let tb = quantize(-4.4);
        let ea = quantize(0.37);
        let eb = quantize(-0.81);
        let x = quantize(7.3);
        let with: f64 = single_difference(
            synthesize_pseudorange(ra, ta, x, ea).unwrap(),
            synthesize_pseudorange(rb, tb, x, eb).unwrap(),
        );
        let without = single_difference(
            synthesize_pseudorange(ra, ta, 0.0, ea).unwrap(),
            synthesize_pseudorange(rb, tb, 0.0, eb).unwrap(),
        );
        assert_eq!(with.to_bits(), without.to_bits());
    }

    #[test]
    fn double_difference_examples() {
        assert_eq!(double_difference(2.5, 1.0), 1.5);
        assert_eq!(double_difference(-3.25, -3.25), 0.0);
    }

    #[test]
    fn double_difference_matches_geometry_with_clock_bias() {
        let a = WorldPoint::new(0.0, 0.0, 0.0);
        let b = WorldPoint::new(60.0, 80.0, 0.0);
        let si = sat_at(1, 1.2e7, 3.0e6, 1.6e7);
        let sj = sat_at(2, -8.0e6, 1.1e7, 1.4e7);
        let (ta, tb) = (9.9, -4.2);
        let pr = |p: &WorldPoint<f64>, s: &SatelliteState<f64>, t: f64| {
            synthesize_pseudorange(quantize(p.distance(&s.position)), t, 0.0, 0.0).unwrap()
        };
        let sd_i = single_difference(pr(&a, &si, ta), pr(&b, &si, tb));
        let sd_j = single_difference(pr(&a, &sj, ta), pr(&b, &sj, tb));
        let dd = double_difference(sd_i, sd_j);

        // Clock terms vanish: same value with zero bias.
        let dd0 = double_difference(
            single_difference(pr(&a, &si, 0.0), pr(&b, &si, 0.0)),
            single_difference(pr(&a, &sj, 0.0), pr(&b, &sj, 0.0)),
        );
        assert!((dd - dd0).abs() < 1e-6);

        // First-order geometry: [e_i - e_j] · (b - a), to linearization accuracy.
        let mid = a.midpoint(&b);
        let ei = unit_vector(&mid, &si).unwrap();
        let ej = unit_vector(&mid, &sj).unwrap();
        let r = b.sub(&a);
        let geometric = ei.dot(&r) - ej.dot(&r);
        assert!((dd - geometric).abs() < 1e-3, "{dd} vs {geometric}");
    }

    #[test]
    fn weight_formula_equal_cnr() {
        assert_eq!(cnr_weight(40.0, 40.0), 800.0);
    }

    fn pr_set(
        id: u32,
        pos: &WorldPoint<f64>,
        k: &Constellation<f64>,
        cnrs: &[f64],
    ) -> PseudorangeSet<f64> {
        let obs = k
            .satellites()
            .iter()
            .zip(cnrs)
            .map(|(s, c)| {
                let pr = synthesize_pseudorange(pos.distance(&s.position), 0.0, 0.0, 0.0).unwrap();
                PseudorangeObservation::new(s.id, pr, *c).unwrap()
            })
            .collect();
        PseudorangeSet::new(VehicleId(id), 0.0, obs).unwrap()
    }

    #[test]
    fn build_system_dimensions_and_reference() {
        let center = WorldPoint::new(0.0, 0.0, 0.0);
        let k = make_constellation::<f64>(5, 3, (0.3, 1.4), &center).unwrap();
        let a = WorldPoint::new(0.0, 0.0, 0.0);
        let b = WorldPoint::new(100.0, 0.0, 0.0);
        let sa = pr_set(1, &a, &k, &[40.0, 45.0, 50.0, 38.0, 41.0]);
        let sb = pr_set(2, &b, &k, &[42.0, 48.0, 47.0, 39.0, 40.0]);
        let sys = build_system(&sa, &sb, &a, &b, &k).unwrap();
        assert_eq!(sys.len(), 4);
        assert_eq!(sys.geometry().len(), 4);
        assert_eq!(sys.weights().len(), 4);
        // min CNRs: 40, 45, 47, 38, 40 -> satellite 3 is the reference
        assert_eq!(sys.reference_sat, SatId(3));
        assert!(!sys.sat_ids().contains(&SatId(3)));
    }

    #[test]
    fn build_system_needs_four_shared() {
        let center = WorldPoint::new(0.0, 0.0, 0.0);
        let k = make_constellation::<f64>(5, 3, (0.3, 1.4), &center).unwrap();
        let a = WorldPoint::new(0.0, 0.0, 0.0);
        let sa = pr_set(1, &a, &k, &[40.0; 5]);
        let mut obs = sa.observations().to_vec();
        obs.truncate(3);
        let sb = PseudorangeSet::new(VehicleId(2), 0.0, obs).unwrap();
        assert_eq!(
            build_system(&sa, &sb, &a, &a, &k).unwrap_err(),
            Error::InsufficientSatellites { found: 3, required: 4 }
        );
    }

    #[test]
    fn exact_linear_system_is_recovered() {
        let h = vec![
            [0.3, -0.2, 0.1],
            [-0.5, 0.4, 0.2],
            [0.1, 0.6, -0.3],
            [0.2, 0.2, 0.5],
        ];
        let r = [12.5, -3.0, 0.75];
        let d: Vec<f64> = h
            .iter()
            .map(|row| row[0] * r[0] + row[1] * r[1] + row[2] * r[2])
            .collect();
        let ids = (1..=4).map(SatId).collect();
        let sys = DifferenceSystem::new(SatId(9), ids, d, h, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for est in [ls_baseline(&sys).unwrap(), wls_baseline(&sys).unwrap()] {
            for i in 0..3 {
                assert!((est.vector[i] - r[i]).abs() <= 1e-9 * r[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicated_row_is_degenerate() {
        let h = vec![[0.3, -0.2, 0.1], [0.3, -0.2, 0.1], [0.1, 0.6, -0.3]];
        let ids = (1..=3).map(SatId).collect();
        let sys = DifferenceSystem::new(SatId(9), ids, vec![1.0, 1.0, 2.0], h, vec![1.0; 3])
            .unwrap();
        assert!(matches!(ls_baseline(&sys), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(wls_baseline(&sys), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn uniform_cnr_matches_ls() {
        let center = WorldPoint::new(0.0, 0.0, 0.0);
        let k = make_constellation::<f64>(7, 5, (0.3, 1.4), &center).unwrap();
        let a = WorldPoint::new(0.0, 0.0, 0.0);
        let b = WorldPoint::new(30.0, -40.0, 0.0);
        let sa = pr_set(1, &a, &k, &[42.0; 7]);
        let mut sb = pr_set(2, &b, &k, &[42.0; 7]);
        // perturb b's measurements so the fit has a residual
        let obs: Vec<_> = sb
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| PseudorangeObservation::new(o.sat_id, o.value + 0.3 * i as f64, o.cnr).unwrap())
            .collect();
        sb = PseudorangeSet::new(VehicleId(2), 0.0, obs).unwrap();
        let sys = build_system(&sa, &sb, &a, &b, &k).unwrap();
        let ls = ls_baseline(&sys).unwrap();
        let wls = wls_baseline(&sys).unwrap();
        for i in 0..3 {
            assert!((ls.vector[i] - wls.vector[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_observations_rejected() {
        assert!(PseudorangeObservation::new(SatId(1), -1.0, 40.0).is_err());
        assert!(PseudorangeObservation::new(SatId(1), 1.0, 0.0).is_err());
        let o = PseudorangeObservation::new(SatId(1), 1.0, 40.0).unwrap();
        assert!(PseudorangeSet::new(VehicleId(1), 0.0, vec![o, o]).is_err());
    }
}
