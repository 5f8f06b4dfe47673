//! Strictly convex inequality-constrained QP by the Goldfarb–Idnani dual
//! active-set method.
//!
//! Solves `min ½ xᵀGx + aᵀx  s.t.  Cᵀx ≥ b` with `G` positive definite. The
//! problems here have a handful of variables, so the active-set operators are
//! recomputed densely at each step rather than updated by rotations.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint column; zero for inactive constraints.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    /// The constraint set is empty.
    Infeasible,
    /// `G` is not positive definite.
    NotConvex,
}

/// `c` holds one constraint per column.
pub fn solve(g: &DMatrix<f64>, a: &DVector<f64>, c: &DMatrix<f64>, b: &DVector<f64>) -> Result<QpSolution, QpError> {
    let n = g.nrows();
    let m = c.ncols();
    let chol = g.clone().cholesky().ok_or(QpError::NotConvex)?;
    let ginv = chol.inverse();
    let mut x = -(&ginv * a);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let scale: Vec<f64> = (0..m).map(|j| 1.0 + c.column(j).amax() + b[j].abs()).collect();
    let tol = 1e-12;
    let mut iterations = 0;

    // H = G⁻¹ − G⁻¹N(NᵀG⁻¹N)⁻¹NᵀG⁻¹,  N* = (NᵀG⁻¹N)⁻¹NᵀG⁻¹
    let operators = |active: &[usize]| -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        if active.is_empty() {
            return Some((ginv.clone(), DMatrix::zeros(0, n)));
        }
        let nmat = DMatrix::from_fn(n, active.len(), |i, j| c[(i, active[j])]);
        let gn = &ginv * &nmat;
        let inner = nmat.transpose() * &gn;
        let inner_inv = inner.try_inverse()?;
        let nstar = &inner_inv * gn.transpose();
        let h = &ginv - &gn * &nstar;
        Some((h, nstar))
    };

    loop {
        iterations += 1;
        if iterations > 50 * (m + n + 1) {
            return Err(QpError::Infeasible);
        }
        // most violated constraint, measured relative to its size
        let mut p = None;
        let mut worst = 0.0;
        for j in 0..m {
            if active.contains(&j) {
                continue;
            }
            let s = (c.column(j).dot(&x) - b[j]) / scale[j];
            if s < -tol && s < worst {
                worst = s;
                p = Some(j);
            }
        }
        let Some(p) = p else { break };
        let np = c.column(p).clone_owned();
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            let (h, nstar) = operators(&active).ok_or(QpError::Infeasible)?;
            let z = &h * &np;
            let r = &nstar * &np;

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 0.0 {
                    let t = u_plus[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let zn = z.dot(&np);
            let sp = np.dot(&x) - b[p];
            let t2 = if z.amax() <= 1e-14 * (1.0 + np.amax()) || zn <= 0.0 {
                f64::INFINITY
            } else {
                -sp / zn
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            for j in 0..r.len() {
                u_plus[j] -= t * r[j];
            }
            let last = u_plus.len() - 1;
            u_plus[last] += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t2 <= t1 {
                active.push(p);
                u = u_plus;
                break;
            }
            let k = drop.expect("partial step implies a blocking constraint");
            active.remove(k);
            u_plus.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (j, &idx) in active.iter().enumerate() {
        multipliers[idx] = u[j].max(0.0);
    }
    Ok(QpSolution { x, multipliers, active, iterations })
}
