//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves `min ½ xᵀGx + aᵀx  s.t.  Cᵀx ≥ b` with `G` positive definite. The
//! factorisation `Jᵀ N_A = [R; 0]`, `J = L⁻ᵀQ`, is updated with Givens
//! rotations as constraints enter and leave the active set.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration limit reached")]
    IterationLimit,
    #[error("dimension mismatch")]
    Dimension,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Indices of the constraints active at the solution.
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

fn givens(a: f64, b: f64) -> Option<(f64, f64, f64)> {
    let h = libm::hypot(a, b);
    (h > 0.0 && b != 0.0).then(|| (a / h, b / h, h))
}

fn rotate_cols(j: &mut DMatrix<f64>, c0: usize, c1: usize, c: f64, s: f64) {
    for k in 0..j.nrows() {
        let (x, y) = (j[(k, c0)], j[(k, c1)]);
        j[(k, c0)] = c * x + s * y;
        j[(k, c1)] = -s * x + c * y;
    }
}

/// Solves the QP. `c` holds one constraint per column.
pub fn solve_qp(g: &DMatrix<f64>, a: &DVector<f64>, c: &DMatrix<f64>, b: &DVector<f64>) -> Result<QpSolution, QpError> {
    let n = g.nrows();
    let m = c.ncols();
    if g.ncols() != n || a.len() != n || (m > 0 && c.nrows() != n) || b.len() != m {
        return Err(QpError::Dimension);
    }
    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    let l_inv = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(QpError::NotPositiveDefinite)?;
    let mut jm = l_inv.transpose();

    // unconstrained minimiser x = -G⁻¹a = -J Jᵀ a
    let mut x = -(&jm * (jm.transpose() * a));
    let mut f = 0.5 * a.dot(&x);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut is_active = vec![false; m];

    let scale = 1.0 + b.amax();
    let eps = 1e-11 * scale;
    let max_iter = 50 * (n + m) + 100;
    let mut iterations = 0;

    loop {
        // most violated inactive constraint
        let mut worst = (-eps, usize::MAX);
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let s = c.column(i).dot(&x) - b[i];
            if s < worst.0 {
                worst = (s, i);
            }
        }
        if worst.1 == usize::MAX {
            return Ok(QpSolution { x, objective: f, active, multipliers: u, iterations });
        }
        let p = worst.1;
        let np = c.column(p).clone_owned();
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let q = active.len();
            let d = jm.transpose() * &np;
            // primal direction z = J₂ d₂, dual direction r = R⁻¹ d₁
            let mut z = DVector::<f64>::zeros(n);
            for jc in q..n {
                z.axpy(d[jc], &jm.column(jc), 1.0);
            }
            let mut rv = vec![0.0; q];
            for i in (0..q).rev() {
                let mut s = d[i];
                for k in (i + 1)..q {
                    s -= r[(i, k)] * rv[k];
                }
                rv[i] = s / r[(i, i)];
            }
            // partial step: first active constraint whose multiplier hits zero
            let mut t1 = f64::INFINITY;
            let mut drop = usize::MAX;
            for k in 0..q {
                if rv[k] > 0.0 {
                    let t = u_plus[k] / rv[k];
                    if t < t1 {
                        t1 = t;
                        drop = k;
                    }
                }
            }
            let sp = np.dot(&x) - b[p];
            let zn = z.dot(&np);
            let t2 = if z.amax() > 1e-13 * (1.0 + np.amax()) && zn > 0.0 { -sp / zn } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
                f += t * zn * (0.5 * t + u_plus[q]);
            }
            for k in 0..q {
                u_plus[k] -= t * rv[k];
            }
            u_plus[q] += t;

            if t2 <= t1 {
                // full step: constraint p joins the active set
                let mut d = d;
                for jc in ((q + 1)..n).rev() {
                    if let Some((cg, sg, h)) = givens(d[jc - 1], d[jc]) {
                        d[jc - 1] = h;
                        d[jc] = 0.0;
                        rotate_cols(&mut jm, jc - 1, jc, cg, sg);
                    }
                }
                for i in 0..=q {
                    r[(i, q)] = d[i];
                }
                active.push(p);
                is_active[p] = true;
                u = u_plus;
                break;
            }

            // partial step: drop constraint `drop` and retry with p
            let l = drop;
            is_active[active[l]] = false;
            active.remove(l);
            u_plus.remove(l);
            for col in l..(q - 1) {
                for row in 0..=(col + 1).min(n - 1) {
                    r[(row, col)] = r[(row, col + 1)];
                }
            }
            for row in 0..n {
                r[(row, q - 1)] = 0.0;
            }
            for jr in l..(q - 1) {
                if let Some((cg, sg, h)) = givens(r[(jr, jr)], r[(jr + 1, jr)]) {
                    r[(jr, jr)] = h;
                    r[(jr + 1, jr)] = 0.0;
                    for k in (jr + 1)..(q - 1) {
                        let (x0, x1) = (r[(jr, k)], r[(jr + 1, k)]);
                        r[(jr, k)] = cg * x0 + sg * x1;
                        r[(jr + 1, k)] = -sg * x0 + cg * x1;
                    }
                    rotate_cols(&mut jm, jr, jr + 1, cg, sg);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let a = DVector::from_vec(vec![-2.0, -4.0]);
        let sol = solve_qp(&g, &a, &DMatrix::zeros(2, 0), &DVector::zeros(0)).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadprog_reference_problem() {
        // classic example from the quadprog documentation
        let g = DMatrix::identity(3, 3);
        let a = DVector::from_vec(vec![0.0, -5.0, 0.0]);
        let c = DMatrix::from_row_slice(3, 3, &[-4.0, 2.0, 0.0, -3.0, 1.0, -2.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![-8.0, 2.0, 0.0]);
        let sol = solve_qp(&g, &a, &c, &b).unwrap();
        let expect = [0.476_190_476_190_476_2, 1.047_619_047_619_047_7, 2.095_238_095_238_095_4];
        for i in 0..3 {
            assert!((sol.x[i] - expect[i]).abs() < 1e-9, "{:?}", sol.x);
        }
        assert!((sol.objective + 2.380_952_380_952_381).abs() < 1e-9);
    }

    #[test]
    fn box_constraints_clip() {
        let g = DMatrix::identity(2, 2);
        let a = DVector::from_vec(vec![-5.0, 5.0]);
        // -1 <= x_i <= 1
        let c = DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0, -1.0, -1.0]);
        let sol = solve_qp(&g, &a, &c, &b).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let g = DMatrix::identity(1, 1);
        let a = DVector::zeros(1);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![2.0, -1.0]);
        assert_eq!(solve_qp(&g, &a, &c, &b).unwrap_err(), QpError::Infeasible);
    }
}
