//! Brute-force oracle for the pivot problem: exhaustive search over a grid
//! of exactly feasible configurations.
//!
//! The pivot ranges over a square grid of spacing `h`; every neighbor is
//! placed on the circle of its required radius around the pivot at angular
//! steps of arc length `h`, keeping only in-box points. Because the objective
//! is separable across neighbors given the pivot, the minimum over the
//! product grid is the pivot term plus each neighbor's own minimum.
//! Search windows are pruned with an upper bound `U` taken from a coarse
//! feasible search: any member whose term exceeds `U` cannot be optimal.

#![allow(dead_code)]

use std::f64::consts::{PI, TAU};

pub struct GridInstance {
    /// Fix plus noise mean, per member; index `pivot` is the pivot.
    pub centers: Vec<(f64, f64)>,
    pub sigma: (f64, f64),
    pub pivot: usize,
    /// (member index, required distance)
    pub links: Vec<(usize, f64)>,
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
}

impl GridInstance {
    fn term(&self, i: usize, x: f64, y: f64) -> f64 {
        let (cx, cy) = self.centers[i];
        (x - cx).powi(2) / (2.0 * self.sigma.0.powi(2))
            + (y - cy).powi(2) / (2.0 * self.sigma.1.powi(2))
    }

    fn in_box(&self, x: f64, y: f64) -> bool {
        x >= self.x_bounds.0 && x <= self.x_bounds.1 && y >= self.y_bounds.0 && y <= self.y_bounds.1
    }

    /// Best in-box point for neighbor `i` on the circle of radius `d`
    /// around `(px, py)`, over angles in `[lo, hi]` at arc step `h`.
    #[allow(clippy::too_many_arguments)]
    fn best_on_circle(&self, i: usize, d: f64, px: f64, py: f64, lo: f64, hi: f64, h: f64) -> f64 {
        if d == 0.0 {
            return if self.in_box(px, py) {
                self.term(i, px, py)
            } else {
                f64::INFINITY
            };
        }
        let step = (h / d).min(0.01);
        let n = ((hi - lo) / step).ceil() as usize + 1;
        let mut best = f64::INFINITY;
        let mut visit = |x: f64, y: f64| {
            if self.in_box(x, y) {
                best = best.min(self.term(i, x, y));
            }
        };
        for k in 0..n {
            let a = lo + step * k as f64;
            visit(px + d * a.cos(), py + d * a.sin());
        }
        // points where the circle crosses a box edge, so active bounds are hit exactly
        for x in [self.x_bounds.0, self.x_bounds.1] {
            let r = d * d - (x - px).powi(2);
            if r >= 0.0 {
                visit(x, py + r.sqrt());
                visit(x, py - r.sqrt());
            }
        }
        for y in [self.y_bounds.0, self.y_bounds.1] {
            let r = d * d - (y - py).powi(2);
            if r >= 0.0 {
                visit(px + r.sqrt(), y);
                visit(px - r.sqrt(), y);
            }
        }
        best
    }

    /// Angular interval (around the direction to the window center) that
    /// contains every circle point inside the window `[x0,x1]×[y0,y1]`.
    fn angular_window(px: f64, py: f64, win: (f64, f64, f64, f64)) -> (f64, f64) {
        let (x0, x1, y0, y1) = win;
        if px >= x0 && px <= x1 && py >= y0 && py <= y1 {
            return (-PI, PI);
        }
        let base = ((y0 + y1) / 2.0 - py).atan2((x0 + x1) / 2.0 - px);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (cx, cy) in [(x0, y0), (x0, y1), (x1, y0), (x1, y1)] {
            let mut rel = (cy - py).atan2(cx - px) - base;
            while rel > PI {
                rel -= TAU;
            }
            while rel < -PI {
                rel += TAU;
            }
            lo = lo.min(rel);
            hi = hi.max(rel);
        }
        (base + lo, base + hi)
    }

    fn window(&self, i: usize, bound: f64) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.centers[i];
        let rx = self.sigma.0 * (2.0 * bound).sqrt();
        let ry = self.sigma.1 * (2.0 * bound).sqrt();
        (cx - rx, cx + rx, cy - ry, cy + ry)
    }

    fn total_at_pivot(&self, px: f64, py: f64, h: f64, bound: Option<f64>) -> f64 {
        let mut total = self.term(self.pivot, px, py);
        for &(j, d) in &self.links {
            let (lo, hi) = match bound {
                Some(u) => Self::angular_window(px, py, self.window(j, u)),
                None => (-PI, PI),
            };
            total += self.best_on_circle(j, d, px, py, lo, hi, h);
            if !total.is_finite() {
                return total;
            }
        }
        total
    }

    /// Coarse feasible search, giving an upper bound on the optimum.
    pub fn upper_bound(&self, h: f64) -> f64 {
        let mut best = f64::INFINITY;
        let nx = ((self.x_bounds.1 - self.x_bounds.0) / h).floor() as usize;
        let ny = ((self.y_bounds.1 - self.y_bounds.0) / h).floor() as usize;
        for ix in 0..=nx {
            for iy in 0..=ny {
                let px = self.x_bounds.0 + h * ix as f64;
                let py = self.y_bounds.0 + h * iy as f64;
                best = best.min(self.total_at_pivot(px, py, 0.05, None));
            }
        }
        best
    }

    /// Exhaustive minimum at resolution `h` (meters), pruned by `bound`.
    pub fn minimum(&self, h: f64, bound: f64) -> f64 {
        let (x0, x1, y0, y1) = self.window(self.pivot, bound);
        let x0 = x0.max(self.x_bounds.0);
        let x1 = x1.min(self.x_bounds.1);
        let y0 = y0.max(self.y_bounds.0);
        let y1 = y1.min(self.y_bounds.1);
        let mut best = bound;
        let nx = ((x1 - x0) / h).ceil() as usize;
        let ny = ((y1 - y0) / h).ceil() as usize;
        for ix in 0..=nx {
            let px = (x0 + h * ix as f64).min(x1);
            for iy in 0..=ny {
                let py = (y0 + h * iy as f64).min(y1);
                best = best.min(self.total_at_pivot(px, py, h, Some(bound)));
            }
        }
        best
    }
}
