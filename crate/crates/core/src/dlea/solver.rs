//! Augmented-Lagrangian solver for a pivot's tentative locations.
//!
//! Variables are the 2D positions of every subset member, laid out as
//! `[x_0, y_0, x_1, y_1, ...]` with the pivot first. Equality
//! constraints `‖v_j - v_k‖ - d_jk = 0` tie each neighbor `j` to the pivot
//! `k`; the road box is enforced by projection inside a projected Newton
//! minimizer with a monotone Armijo line search.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use thiserror::Error;

use super::{objective, FixMap, NoiseModel, RoadSpace, Subset, TentativeEstimateSet, Vec2};
use crate::dlea::DistanceTable;
use crate::linalg::cholesky_solve;
use crate::{Error, Real, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Constraint violation (m) below which a solution counts as feasible.
    pub feasibility_tol: T,
    /// Projected-gradient norm below which an inner problem is solved, for
    /// the objective measured in units of the smaller GPS variance.
    pub gradient_tol: T,
    /// Violation at which the outer loop stops early.
    pub target_violation: T,
    /// Initial penalty, in the same units as `gradient_tol`.
    pub initial_penalty: T,
    pub penalty_growth: T,
    pub max_penalty: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            max_outer: 50,
            max_inner: 200,
            feasibility_tol: T::lit(1e-4),
            gradient_tol: T::lit(1e-6),
            target_violation: T::lit(1e-7),
            initial_penalty: T::lit(10.0),
            penalty_growth: T::lit(10.0),
            max_penalty: T::lit(1e8),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats<T> {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Largest `|‖v_j - v_k‖ - d_jk|` at the returned point.
    pub max_violation: T,
    /// Projected-gradient norm of the last inner problem.
    pub projected_gradient: T,
    /// False when the distances cannot all be met inside the box.
    pub feasible: bool,
    pub converged: bool,
    /// Augmented objective (in variance-normalized units) at the start and
    /// end of each inner solve.
    pub augmented_trace: Vec<(T, T)>,
}

impl<T: Real> Default for SolveStats<T> {
    fn default() -> Self {
        Self {
            outer_iterations: 0,
            inner_iterations: 0,
            max_violation: T::zero(),
            projected_gradient: T::zero(),
            feasible: true,
            converged: true,
            augmented_trace: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError<T: Real> {
    #[error(transparent)]
    Invalid(#[from] Error),

    #[error(
        "pivot {pivot} did not converge: violation {} after {} outer iterations",
        last.stats.max_violation,
        last.stats.outer_iterations
    )]
    NonConvergence {
        pivot: VehicleId,
        last: Box<TentativeEstimateSet<T>>,
    },
}

impl<T: Real> SolveError<T> {
    /// Best available iterate, if the solver got far enough to produce one.
    pub fn last_iterate(&self) -> Option<&TentativeEstimateSet<T>> {
        match self {
            SolveError::NonConvergence { last, .. } => Some(last),
            SolveError::Invalid(_) => None,
        }
    }
}

/// Variables come in 2-D blocks. A neighbor required at distance zero shares
/// the pivot's block: its constraint is `q = p`, which the norm form can
/// only approach through a kink.
struct Problem<T> {
    ids: Vec<VehicleId>,
    /// Block of each member of `ids`.
    slot: Vec<usize>,
    /// Mean of the block's fixes shifted by the noise mean, flattened.
    center: Vec<T>,
    /// Inverse variance times the number of members in the block.
    weight: Vec<T>,
    pivot: usize,
    /// (block index, required distance)
    links: Vec<(usize, T)>,
    lower: [T; 2],
    upper: [T; 2],
}

impl<T: Real> Problem<T> {
    fn objective(&self, x: &[T]) -> T {
        let half = T::lit(0.5);
        x.iter()
            .zip(&self.center)
            .enumerate()
            .fold(T::zero(), |acc, (i, (xi, ci))| {
                let r = *xi - *ci;
                acc + half * r * r * self.weight[i]
            })
    }

    /// Signed offset `q_j - p` and its length for link `l`.
    fn link_geometry(&self, x: &[T], l: usize) -> (T, T, T) {
        let (j, _) = self.links[l];
        let p = self.pivot;
        let dx = x[2 * j] - x[2 * p];
        let dy = x[2 * j + 1] - x[2 * p + 1];
        (dx, dy, dx.hypot(dy))
    }

    fn constraints(&self, x: &[T], out: &mut [T]) {
        for (l, c) in out.iter_mut().enumerate() {
            let (_, _, n) = self.link_geometry(x, l);
            *c = n - self.links[l].1;
        }
    }

    fn augmented(&self, x: &[T], lambda: &[T], rho: T, scratch: &mut [T]) -> T {
        self.constraints(x, scratch);
        let half = T::lit(0.5);
        scratch
            .iter()
            .zip(lambda)
            .fold(self.objective(x), |acc, (c, l)| {
                acc - *l * *c + half * rho * *c * *c
            })
    }

    /// `augmented(to) - augmented(from)`, evaluated from differences so that
    /// changes far below the rounding of the absolute values stay visible.
    fn augmented_change(&self, from: &[T], to: &[T], lambda: &[T], rho: T) -> T {
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let mut change = T::zero();
        for i in 0..from.len() {
            let step = to[i] - from[i];
            let mid = to[i] + from[i] - two * self.center[i];
            change = change + half * self.weight[i] * step * mid;
        }
        for l in 0..self.links.len() {
            let (a0, b0, n0) = self.link_geometry(from, l);
            let (a1, b1, n1) = self.link_geometry(to, l);
            let sum = n0 + n1;
            let dn = if sum > T::zero() {
                ((a1 - a0) * (a1 + a0) + (b1 - b0) * (b1 + b0)) / sum
            } else {
                T::zero()
            };
            let d = self.links[l].1;
            let c_sum = n0 + n1 - two * d;
            change = change - lambda[l] * dn + half * rho * dn * c_sum;
        }
        change
    }

    fn augmented_gradient(&self, x: &[T], lambda: &[T], rho: T, g: &mut [T]) {
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = (x[i] - self.center[i]) * self.weight[i];
        }
        let p = self.pivot;
        for l in 0..self.links.len() {
            let (j, d) = self.links[l];
            let (dx, dy, n) = self.link_geometry(x, l);
            let (ux, uy) = if n > T::zero() {
                (dx / n, dy / n)
            } else {
                // coincident points: push along +x so the iteration can leave the kink
                (T::one(), T::zero())
            };
            let k = rho * (n - d) - lambda[l];
            g[2 * j] = g[2 * j] + k * ux;
            g[2 * j + 1] = g[2 * j + 1] + k * uy;
            g[2 * p] = g[2 * p] - k * ux;
            g[2 * p + 1] = g[2 * p + 1] - k * uy;
        }
    }

    /// Keeps the pivot and moves each neighbor onto its circle: radially
    /// when that stays in the box, otherwise to the nearest in-box point of
    /// the circle. `None` if some circle misses the box entirely.
    fn feasible_projection(&self, x: &[T]) -> Option<Vec<T>> {
        let mut y = x.to_vec();
        let p = self.pivot;
        let (px, py) = (x[2 * p], x[2 * p + 1]);
        let inside = |a: T, b: T| {
            a >= self.lower[0] && a <= self.upper[0] && b >= self.lower[1] && b <= self.upper[1]
        };
        for &(j, d) in &self.links {
            let (dx, dy) = (x[2 * j] - px, x[2 * j + 1] - py);
            let n = dx.hypot(dy);
            let (rx, ry) = if n > T::zero() {
                (px + dx * d / n, py + dy * d / n)
            } else {
                (px + d, py)
            };
            let chosen = if inside(rx, ry) {
                Some((rx, ry))
            } else {
                let mut candidates = Vec::with_capacity(8);
                for edge in [self.lower[0], self.upper[0]] {
                    let r = d * d - (edge - px) * (edge - px);
                    if r >= T::zero() {
                        candidates.push((edge, py + r.sqrt()));
                        candidates.push((edge, py - r.sqrt()));
                    }
                }
                for edge in [self.lower[1], self.upper[1]] {
                    let r = d * d - (edge - py) * (edge - py);
                    if r >= T::zero() {
                        candidates.push((px + r.sqrt(), edge));
                        candidates.push((px - r.sqrt(), edge));
                    }
                }
                candidates
                    .into_iter()
                    .filter(|(a, b)| inside(*a, *b))
                    .min_by(|a, b| {
                        let da = (a.0 - rx).hypot(a.1 - ry);
                        let db = (b.0 - rx).hypot(b.1 - ry);
                        da.partial_cmp(&db).unwrap_or(Ordering::Equal)
                    })
            };
            let (a, b) = chosen?;
            y[2 * j] = a;
            y[2 * j + 1] = b;
        }
        Some(y)
    }

    /// Exact Hessian of the augmented Lagrangian, dense row-major.
    fn hessian(&self, x: &[T], lambda: &[T], rho: T, h: &mut [T]) {
        let n = x.len();
        h.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..n {
            h[i * n + i] = self.weight[i];
        }
        let p = self.pivot;
        for l in 0..self.links.len() {
            let (j, d) = self.links[l];
            let (dx, dy, norm) = self.link_geometry(x, l);
            if !(norm > T::zero()) {
                // the norm is not differentiable here; keep the penalty's stiffness
                for (a, b) in [(2 * j, 2 * j), (2 * p, 2 * p), (2 * j + 1, 2 * j + 1), (2 * p + 1, 2 * p + 1)] {
                    h[a * n + b] = h[a * n + b] + rho;
                }
                continue;
            }
            let u = [dx / norm, dy / norm];
            let k = rho * (norm - d) - lambda[l];
            let mut block = [[T::zero(); 2]; 2];
            for (r, row) in block.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    let eye = if r == c { T::one() } else { T::zero() };
                    *v = rho * u[r] * u[c] + k * (eye - u[r] * u[c]) / norm;
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    let b = block[r][c];
                    let (jr, jc, pr, pc) = (2 * j + r, 2 * j + c, 2 * p + r, 2 * p + c);
                    h[jr * n + jc] = h[jr * n + jc] + b;
                    h[pr * n + pc] = h[pr * n + pc] + b;
                    h[jr * n + pc] = h[jr * n + pc] - b;
                    h[pr * n + jc] = h[pr * n + jc] - b;
                }
            }
        }
    }

    fn project(&self, x: &mut [T]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.max(self.lower[i % 2]).min(self.upper[i % 2]);
        }
    }

    fn projected_gradient_norm(&self, x: &[T], g: &[T]) -> T {
        x.iter().zip(g).enumerate().fold(T::zero(), |acc, (i, (xi, gi))| {
            let moved = (*xi - *gi).max(self.lower[i % 2]).min(self.upper[i % 2]);
            acc.max((moved - *xi).abs())
        })
    }
}

struct InnerResult<T> {
    iterations: usize,
    projected_gradient: T,
    start: T,
    end: T,
}

/// Projected Newton (Bertsekas) on the augmented Lagrangian for fixed
/// multipliers, with an Armijo search along the projection arc.
///
/// Variables at a bound whose gradient pushes outward are held by a
/// projected-gradient step; the rest take a Newton step on the exact
/// Hessian, shifted towards the identity when it is not positive definite.
fn minimize_inner<T: Real>(
    problem: &Problem<T>,
    x: &mut [T],
    lambda: &[T],
    rho: T,
    max_iter: usize,
    tol: T,
) -> InnerResult<T> {
    let n = x.len();
    let mut scratch = vec![T::zero(); problem.links.len()];
    let mut g = vec![T::zero(); n];
    let mut h = vec![T::zero(); n * n];
    let mut d = vec![T::zero(); n];
    let mut trial = vec![T::zero(); n];
    let mut free = Vec::with_capacity(n);
    let mut reduced = Vec::with_capacity(n * n);
    let mut rhs = Vec::with_capacity(n);

    let mut f = problem.augmented(x, lambda, rho, &mut scratch);
    let start = f;
    problem.augmented_gradient(x, lambda, rho, &mut g);
    let mut pg = problem.projected_gradient_norm(x, &g);
    let armijo = T::lit(1e-4);
    let mut shift = T::zero();

    let mut iterations = 0;
    while iterations < max_iter && pg > tol {
        iterations += 1;
        let width = pg.min(T::lit(1e-3));
        free.clear();
        for i in 0..n {
            let (lo, hi) = (problem.lower[i % 2], problem.upper[i % 2]);
            let binding = (x[i] <= lo + width && g[i] > T::zero())
                || (x[i] >= hi - width && g[i] < T::zero());
            if binding {
                d[i] = -g[i];
            } else {
                free.push(i);
            }
        }

        problem.hessian(x, lambda, rho, &mut h);
        let m = free.len();
        let diag_scale = free
            .iter()
            .fold(T::zero(), |acc, &i| acc.max(h[i * n + i].abs()))
            .max(T::one());
        let mut solved = m == 0;
        while !solved {
            reduced.clear();
            for &r in &free {
                for &c in &free {
                    reduced.push(h[r * n + c]);
                }
            }
            for k in 0..m {
                reduced[k * m + k] = reduced[k * m + k] + shift;
            }
            rhs.clear();
            rhs.extend(free.iter().map(|&i| -g[i]));
            if cholesky_solve(&mut reduced, &mut rhs, m) {
                for (k, &i) in free.iter().enumerate() {
                    d[i] = rhs[k];
                }
                solved = true;
                shift = shift * T::lit(0.1);
                if shift < T::lit(1e-12) * diag_scale {
                    shift = T::zero();
                }
            } else {
                shift = (shift * T::lit(10.0)).max(T::lit(1e-8) * diag_scale);
                if !shift.is_finite() || shift > T::lit(1e12) * diag_scale {
                    for &i in &free {
                        d[i] = -g[i];
                    }
                    solved = true;
                }
            }
        }

        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let mut decrease = T::zero();
            for i in 0..n {
                trial[i] = x[i] + t * d[i];
            }
            problem.project(&mut trial);
            for i in 0..n {
                decrease = decrease + g[i] * (trial[i] - x[i]);
            }
            if !(decrease < T::zero()) {
                t = t * T::lit(0.5);
                continue;
            }
            let change = problem.augmented_change(x, &trial, lambda, rho);
            if change <= armijo * decrease {
                accepted = Some(change);
                break;
            }
            t = t * T::lit(0.5);
        }
        let Some(change) = accepted else { break };

        x.copy_from_slice(&trial);
        f = f + change;
        problem.augmented_gradient(x, lambda, rho, &mut g);
        pg = problem.projected_gradient_norm(x, &g);
    }
    InnerResult {
        iterations,
        projected_gradient: pg,
        start,
        end: f,
    }
}

/// Solves the pivot's constrained maximum-likelihood problem.
///
/// The iteration starts at the GPS fixes clamped into the road box. Only
/// pivot-to-neighbor distances are constrained. When a required distance is
/// longer than the box diagonal the best effort is returned with
/// `stats.feasible == false`; otherwise exhausting the iteration budget
/// yields [`SolveError::NonConvergence`] carrying the last iterate.
pub fn solve_tentative<T: Real>(
    subset: &Subset,
    fixes: &FixMap<T>,
    distances: &DistanceTable<T>,
    noise: &NoiseModel<T>,
    space: &RoadSpace<T>,
    options: &SolverOptions<T>,
) -> Result<TentativeEstimateSet<T>, SolveError<T>> {
    if !noise.is_estimable() {
        return Err(Error::InvalidInput(format!(
            "estimator needs positive GPS deviations, got ({}, {})",
            noise.stddev.x, noise.stddev.y
        ))
        .into());
    }
    let pivot_id = subset.pivot();
    // Pivot first, then neighbors ordered by their data; ids only break exact
    // ties, so relabeling vehicles does not change the arithmetic.
    let mut keyed = Vec::with_capacity(subset.len());
    for id in subset.neighbors() {
        let fix = fixes.get(&id).ok_or(Error::MissingFix(id))?;
        let d = distances
            .get(pivot_id, id)
            .ok_or(Error::MissingDistance(pivot_id, id))?;
        keyed.push((fix.x, fix.y, d, id));
    }
    keyed.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
            .then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal))
            .then(a.3.cmp(&b.3))
    });
    let ids: Vec<VehicleId> = std::iter::once(pivot_id)
        .chain(keyed.into_iter().map(|k| k.3))
        .collect();
    let pivot = 0;

    // The objective is scaled by min(σ_x², σ_y²), which leaves the argmin
    // unchanged and makes the tolerances independent of the noise level.
    let var = [
        noise.stddev.x * noise.stddev.x,
        noise.stddev.y * noise.stddev.y,
    ];
    let unit = var[0].min(var[1]);
    let inv_var = [unit / var[0], unit / var[1]];

    let mut slot = Vec::with_capacity(ids.len());
    let mut members: Vec<Vec<Vec2<T>>> = Vec::with_capacity(ids.len());
    let mut links = Vec::with_capacity(ids.len() - 1);
    let mut structurally_feasible = true;
    for (i, id) in ids.iter().enumerate() {
        let fix = *fixes.get(id).ok_or(Error::MissingFix(*id))?;
        if !fix.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite fix for {id}")).into());
        }
        if i == pivot {
            slot.push(0);
            members.push(vec![fix]);
            continue;
        }
        let d = distances
            .get(pivot_id, *id)
            .ok_or(Error::MissingDistance(pivot_id, *id))?;
        if !(d >= T::zero()) || !d.is_finite() {
            return Err(Error::InvalidInput(format!(
                "distance {pivot_id}-{id} must be non-negative, got {d}"
            ))
            .into());
        }
        if d > space.diagonal() {
            structurally_feasible = false;
        }
        if d == T::zero() {
            slot.push(0);
            members[0].push(fix);
        } else {
            slot.push(members.len());
            links.push((members.len(), d));
            members.push(vec![fix]);
        }
    }
    let mut center = Vec::with_capacity(2 * members.len());
    let mut weight = Vec::with_capacity(2 * members.len());
    let mut x = Vec::with_capacity(2 * members.len());
    for block in &members {
        let k = T::from_usize(block.len()).expect("block size fits the scalar");
        let sum = block
            .iter()
            .fold(Vec2::new(T::zero(), T::zero()), |acc, f| Vec2::new(acc.x + f.x, acc.y + f.y));
        let mean = Vec2::new(sum.x / k, sum.y / k);
        center.push(mean.x + noise.mean.x);
        center.push(mean.y + noise.mean.y);
        weight.push(inv_var[0] * k);
        weight.push(inv_var[1] * k);
        let start = space.clamp(mean);
        x.push(start.x);
        x.push(start.y);
    }
    let problem = Problem {
        ids,
        slot,
        center,
        weight,
        pivot,
        links,
        lower: [space.x_bounds.0, space.y_bounds.0],
        upper: [space.x_bounds.1, space.y_bounds.1],
    };

    // Precision floors so f32 instances can still terminate.
    let scale = space
        .x_bounds
        .0
        .abs()
        .max(space.x_bounds.1.abs())
        .max(space.y_bounds.0.abs())
        .max(space.y_bounds.1.abs())
        .max(T::one());
    let precision = T::lit(16.0) * T::epsilon() * scale;
    let tolerances = Tolerances {
        gradient: options.gradient_tol,
        precision,
        target_violation: options.target_violation.max(precision),
    };
    let start = x.clone();
    let (mut stats, mut gradient_tol) = augmented_lagrangian(&problem, &mut x, options, &tolerances);

    // A local minimum can be worse than simply moving every neighbor onto its
    // circle; restart from that point when it is better.
    if let Some(mut y) = problem.feasible_projection(&start) {
        if problem.objective(&y) < problem.objective(&x) {
            let (second, second_tol) =
                augmented_lagrangian(&problem, &mut y, options, &tolerances);
            let first_ok = violation_at(&problem, &x) <= options.feasibility_tol;
            let second_ok = violation_at(&problem, &y) <= options.feasibility_tol;
            stats.outer_iterations += second.outer_iterations;
            stats.inner_iterations += second.inner_iterations;
            stats.augmented_trace.extend(second.augmented_trace);
            if second_ok && (!first_ok || problem.objective(&y) < problem.objective(&x)) {
                x = y;
                stats.projected_gradient = second.projected_gradient;
                gradient_tol = second_tol;
            }
        }
    }
    stats.feasible = structurally_feasible;
    let mut c = vec![T::zero(); problem.links.len()];

    // Iterates are convex combinations of in-box points; clamp away rounding.
    problem.project(&mut x);
    problem.constraints(&x, &mut c);
    stats.max_violation = max_abs(&c);
    stats.converged = stats.max_violation <= options.feasibility_tol
        && stats.projected_gradient <= gradient_tol;
    if stats.max_violation > options.feasibility_tol {
        stats.feasible = false;
    }

    let estimates: BTreeMap<VehicleId, Vec2<T>> = problem
        .ids
        .iter()
        .zip(&problem.slot)
        .map(|(id, b)| (*id, Vec2::new(x[2 * b], x[2 * b + 1])))
        .collect();
    let objective_value = objective(&estimates, fixes, noise)?;
    let result = TentativeEstimateSet {
        pivot: pivot_id,
        estimates,
        objective_value,
        stats,
    };
    if result.stats.converged || !structurally_feasible {
        Ok(result)
    } else {
        Err(SolveError::NonConvergence {
            pivot: pivot_id,
            last: Box::new(result),
        })
    }
}

struct Tolerances<T> {
    gradient: T,
    precision: T,
    target_violation: T,
}

/// Outer multiplier/penalty loop from `x`. Returns the statistics and the
/// gradient tolerance in force at the end.
fn augmented_lagrangian<T: Real>(
    problem: &Problem<T>,
    x: &mut [T],
    options: &SolverOptions<T>,
    tol: &Tolerances<T>,
) -> (SolveStats<T>, T) {
    // Rounding in each constraint value is amplified by the penalty.
    let gradient_floor = |rho: T| tol.gradient.max(tol.precision * (T::one() + rho));
    let mut lambda = vec![T::zero(); problem.links.len()];
    let mut rho = options.initial_penalty;
    let mut c = vec![T::zero(); problem.links.len()];
    problem.constraints(x, &mut c);
    let mut violation = max_abs(&c);

    let mut gradient_tol = gradient_floor(rho);
    let mut stats = SolveStats {
        converged: false,
        ..SolveStats::default()
    };
    for _ in 0..options.max_outer {
        stats.outer_iterations += 1;
        gradient_tol = gradient_floor(rho);
        let inner = minimize_inner(problem, x, &lambda, rho, options.max_inner, gradient_tol);
        stats.inner_iterations += inner.iterations;
        stats.projected_gradient = inner.projected_gradient;
        stats.augmented_trace.push((inner.start, inner.end));

        problem.constraints(x, &mut c);
        let new_violation = max_abs(&c);
        if new_violation <= tol.target_violation && inner.projected_gradient <= gradient_tol {
            break;
        }
        for (l, cl) in lambda.iter_mut().zip(&c) {
            *l = *l - rho * *cl;
        }
        if new_violation > tol.target_violation && new_violation > T::lit(0.25) * violation {
            rho = (rho * options.penalty_growth).min(options.max_penalty);
        }
        violation = new_violation;
    }
    (stats, gradient_tol)
}

fn violation_at<T: Real>(problem: &Problem<T>, x: &[T]) -> T {
    let mut c = vec![T::zero(); problem.links.len()];
    problem.constraints(x, &mut c);
    max_abs(&c)
}

fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, c| m.max(c.abs()))
}
