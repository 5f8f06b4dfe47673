//! Bound-constrained SQP for small smooth problems.
//!
//! `min f(x)  s.t.  c(x) ≥ 0,  lower ≤ x ≤ upper`. Variables are mapped to the
//! unit box, gradients come from central differences, the Hessian of the
//! Lagrangian is a damped BFGS approximation, and steps are globalized by an
//! L1 merit line search. Linearizations that have no feasible step are
//! relaxed with elastic slacks.

use nalgebra::{DMatrix, DVector};

use super::qp;

#[derive(Debug, Clone, Copy)]
pub struct SqpOptions {
    pub max_iter: usize,
    /// KKT tolerance on the scaled problem.
    pub tol: f64,
    /// Central-difference step in unit-box coordinates.
    pub fd_step: f64,
    /// Divide the objective by this; `None` uses `max(|f(x0)|, 1e-8)`.
    pub f_scale: Option<f64>,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions { max_iter: 200, tol: 1e-6, fd_step: 1e-6, f_scale: None }
    }
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub constraints: Vec<f64>,
    /// Lagrange multipliers of `c(x) ≥ 0`, in scaled units.
    pub multipliers: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

impl SqpResult {
    pub fn max_violation(&self) -> f64 {
        self.constraints.iter().map(|c| (-c).max(0.0)).fold(0.0, f64::max)
    }
}

struct Scaled<F> {
    eval: F,
    lower: Vec<f64>,
    range: Vec<f64>,
    f_scale: f64,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Scaled<F> {
    fn physical(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.lower).zip(&self.range).map(|((y, l), r)| l + y * r).collect()
    }

    fn call(&mut self, y: &[f64]) -> (f64, Vec<f64>) {
        self.evaluations += 1;
        let x = self.physical(y);
        let (f, c) = (self.eval)(&x);
        (f / self.f_scale, c)
    }

    fn gradients(&mut self, y: &[f64], h: f64, m: usize) -> (DVector<f64>, DMatrix<f64>) {
        let n = y.len();
        let mut gf = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, m);
        let mut yp = y.to_vec();
        for i in 0..n {
            yp[i] = y[i] + h;
            let (fp, cp) = self.call(&yp);
            yp[i] = y[i] - h;
            let (fm, cm) = self.call(&yp);
            yp[i] = y[i];
            gf[i] = (fp - fm) / (2.0 * h);
            for j in 0..m {
                jac[(i, j)] = (cp[j] - cm[j]) / (2.0 * h);
            }
        }
        (gf, jac)
    }
}

fn violation(c: &[f64]) -> f64 {
    c.iter().map(|c| (-c).max(0.0)).sum()
}

/// Solve the QP subproblem in the step `d`, with box rows for `0 ≤ y + d ≤ 1`.
/// Falls back to an elastic relaxation when the linearization is infeasible.
fn subproblem(
    b: &DMatrix<f64>,
    gf: &DVector<f64>,
    jac: &DMatrix<f64>,
    c: &[f64],
    y: &[f64],
    penalty: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = y.len();
    let m = c.len();
    let cols = m + 2 * n;
    let mut cm = DMatrix::zeros(n, cols);
    let mut bv = DVector::zeros(cols);
    for j in 0..m {
        cm.set_column(j, &jac.column(j));
        bv[j] = -c[j];
    }
    for i in 0..n {
        cm[(i, m + 2 * i)] = 1.0;
        bv[m + 2 * i] = -y[i];
        cm[(i, m + 2 * i + 1)] = -1.0;
        bv[m + 2 * i + 1] = y[i] - 1.0;
    }
    match qp::solve(b, gf, &cm, &bv) {
        Ok(sol) => {
            let lam = DVector::from_iterator(m, (0..m).map(|j| sol.multipliers[j]));
            return Some((sol.x, lam));
        }
        Err(qp::QpError::NotConvex) => return None,
        Err(qp::QpError::Infeasible) => {}
    }

    // elastic: variables (d, t), rows c + Jᵀd + t ≥ 0, t ≥ 0
    let nv = n + m;
    let mut g = DMatrix::zeros(nv, nv);
    g.view_mut((0, 0), (n, n)).copy_from(b);
    let eps = 1e-8 * penalty.max(1.0);
    for j in 0..m {
        g[(n + j, n + j)] = eps;
    }
    let mut a = DVector::zeros(nv);
    a.rows_mut(0, n).copy_from(gf);
    for j in 0..m {
        a[n + j] = penalty;
    }
    let cols = 2 * m + 2 * n;
    let mut ce = DMatrix::zeros(nv, cols);
    let mut be = DVector::zeros(cols);
    for j in 0..m {
        for i in 0..n {
            ce[(i, j)] = jac[(i, j)];
        }
        ce[(n + j, j)] = 1.0;
        be[j] = -c[j];
        ce[(n + j, m + j)] = 1.0;
    }
    for i in 0..n {
        ce[(i, 2 * m + 2 * i)] = 1.0;
        be[2 * m + 2 * i] = -y[i];
        ce[(i, 2 * m + 2 * i + 1)] = -1.0;
        be[2 * m + 2 * i + 1] = y[i] - 1.0;
    }
    let sol = qp::solve(&g, &a, &ce, &be).ok()?;
    let d = sol.x.rows(0, n).clone_owned();
    let lam = DVector::from_iterator(m, (0..m).map(|j| sol.multipliers[j]));
    Some((d, lam))
}

/// `eval` returns the objective and the constraint vector at a physical point.
pub fn minimize<F>(eval: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &SqpOptions) -> SqpResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let range: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let mut prob = Scaled { eval, lower: lower.to_vec(), range, f_scale: 1.0, evaluations: 0 };
    let mut y: Vec<f64> = x0
        .iter()
        .zip(lower)
        .zip(&prob.range)
        .map(|((x, l), r)| ((x - l) / r).clamp(0.0, 1.0))
        .collect();

    let (f0, c0) = prob.call(&y);
    prob.f_scale = opts.f_scale.unwrap_or_else(|| f0.abs().max(1e-8));
    let mut f = f0 / prob.f_scale;
    let mut c = c0;
    let m = c.len();
    let h = opts.fd_step;

    let mut b = DMatrix::<f64>::identity(n, n);
    let mut penalty: f64 = 1.0;
    let (mut gf, mut jac) = prob.gradients(&y, h, m);
    let mut lam = DVector::zeros(m);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let Some((d, lam_qp)) = subproblem(&b, &gf, &jac, &c, &y, penalty.max(10.0)) else {
            b = DMatrix::identity(n, n);
            continue;
        };
        lam = lam_qp;

        // KKT residual of the current point with the QP multipliers
        let grad_l = &gf - &jac * &lam;
        let mut stationarity = 0.0_f64;
        for i in 0..n {
            // a component pushing against an active box face is fine
            let gi = grad_l[i];
            let at_lower = y[i] <= 1e-12 && gi > 0.0;
            let at_upper = y[i] >= 1.0 - 1e-12 && gi < 0.0;
            if !(at_lower || at_upper) {
                stationarity = stationarity.max(gi.abs());
            }
        }
        let viol = c.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        let complementarity = c.iter().zip(lam.iter()).map(|(c, l)| (c * l).abs()).fold(0.0, f64::max);
        let step = d.amax();
        if viol <= opts.tol && ((stationarity <= opts.tol && complementarity <= opts.tol) || step <= opts.tol * 1e-2) {
            converged = true;
            break;
        }

        penalty = penalty.max(1.1 * lam.amax() + 1e-3);
        let merit = |f: f64, c: &[f64]| f + penalty * violation(c);
        let phi0 = merit(f, &c);
        // directional derivative of the L1 merit along d
        let dphi = gf.dot(&d) - penalty * violation(&c);

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let yt: Vec<f64> = (0..n).map(|i| (y[i] + t * d[i]).clamp(0.0, 1.0)).collect();
            let (ft, ct) = prob.call(&yt);
            if merit(ft, &ct) <= phi0 + 1e-4 * t * dphi.min(0.0) {
                accepted = Some((yt, ft, ct));
                break;
            }
            t *= 0.5;
        }
        let Some((y_new, f_new, c_new)) = accepted else {
            // no descent on the merit: the quasi-Newton model has gone stale
            if b != DMatrix::identity(n, n) {
                b = DMatrix::identity(n, n);
                continue;
            }
            break;
        };

        let (gf_new, jac_new) = prob.gradients(&y_new, h, m);
        let s = DVector::from_iterator(n, (0..n).map(|i| y_new[i] - y[i]));
        let yk = (&gf_new - &jac_new * &lam) - (&gf - &jac * &lam);
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        let sy = s.dot(&yk);
        if sbs > 1e-16 {
            // Powell damping keeps the update positive definite
            let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
            let r = &yk * theta + &bs * (1.0 - theta);
            let sr = s.dot(&r);
            if sr > 1e-16 {
                b = &b - &bs * bs.transpose() / sbs + &r * r.transpose() / sr;
            }
        }
        y = y_new;
        f = f_new;
        c = c_new;
        gf = gf_new;
        jac = jac_new;
        if s.amax() <= 1e-14 {
            break;
        }
    }

    let x = prob.physical(&y);
    SqpResult {
        x,
        f: f * prob.f_scale,
        constraints: c,
        multipliers: lam.iter().copied().collect(),
        converged,
        iterations,
        evaluations: prob.evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_objective_on_disk() {
        // min x₀ + x₁  s.t.  2 − x₀² − x₁² ≥ 0  →  (−1, −1)
        let r = minimize(
            |x| (x[0] + x[1], vec![2.0 - x[0] * x[0] - x[1] * x[1]]),
            &[0.5, 0.2],
            &[-3.0, -3.0],
            &[3.0, 3.0],
            &SqpOptions { f_scale: Some(1.0), ..Default::default() },
        );
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] + 1.0).abs() < 1e-5 && (r.x[1] + 1.0).abs() < 1e-5, "{r:?}");
        assert!((r.multipliers[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn active_bound() {
        let r = minimize(
            |x| ((x[0] - 3.0).powi(2) + (x[1] - 0.5).powi(2), vec![]),
            &[0.0, 0.0],
            &[-1.0, -1.0],
            &[1.0, 1.0],
            &Default::default(),
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 0.5).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn product_under_hyperbola() {
        // min w·t  s.t.  w·t³ ≥ 40 on [2.5,5.5]×[1.5,4.5]: t is cheaper, w at its lower bound
        let r = minimize(
            |x| (x[0] * x[1], vec![(x[0] * x[1].powi(3) - 40.0) / 40.0]),
            &[5.0, 4.0],
            &[2.5, 1.5],
            &[5.5, 4.5],
            &Default::default(),
        );
        assert!(r.converged, "{r:?}");
        let t = (40.0_f64 / 2.5).cbrt();
        assert!((r.x[0] - 2.5).abs() < 1e-6 && (r.x[1] - t).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn recovers_from_infeasible_start() {
        let r = minimize(
            |x| (x[0] * x[0] + x[1] * x[1], vec![x[0] + x[1] - 1.5, 1.0 - x[0]]),
            &[0.0, 0.0],
            &[-2.0, -2.0],
            &[2.0, 2.0],
            &SqpOptions { f_scale: Some(1.0), ..Default::default() },
        );
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 0.75).abs() < 1e-6 && (r.x[1] - 0.75).abs() < 1e-6, "{r:?}");
    }
}
