//! Small dense helpers: 3×3 routines for the baseline normal equations and
//! a Cholesky solve for the pivot solver's Newton steps.

use crate::Real;

pub type Mat3<T> = [[T; 3]; 3];

/// Eigenvalues of a symmetric 3×3 matrix, ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<T: Real>(m: &Mat3<T>) -> [T; 3] {
    let mut a = *m;
    let two = T::lit(2.0);
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == T::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (two * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
            let c = T::one() / (t * t + T::one()).sqrt();
            let s = t * c;
            // A <- Jᵀ A J with the rotation acting on rows/cols p and q
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot is exactly zero.
pub fn solve3<T: Real>(m: &Mat3<T>, b: &[T; 3]) -> Option<[T; 3]> {
    let mut a = *m;
    let mut rhs = *b;
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if a[pivot_row][col] == T::zero() {
            return None;
        }
        a.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            rhs[row] = rhs[row] - f * rhs[col];
        }
    }
    let mut x = [T::zero(); 3];
    for row in (0..3).rev() {
        let mut acc = rhs[row];
        for k in row + 1..3 {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Solves `a x = b` in place for a symmetric positive definite `a` stored
/// row-major as `n × n`. `a` is overwritten by its Cholesky factor and `b`
/// by the solution. Returns `false` if `a` is not numerically positive
/// definite.
pub fn cholesky_solve<T: Real>(a: &mut [T], b: &mut [T], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d = d - a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v = v - a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v = v - a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v = v - a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    true
}
