//! One possible future: deterministic initial design with a safety margin,
//! a simulated high-fidelity test, the redesign decision, calibration on the
//! test result and, if triggered, redesign.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{ErrorModel, ErrorTrajectory};
use crate::optim::{latin_hypercube, sqp};
use crate::problems::DesignProblem;

/// Standard-deviation offsets `{k_ini, k_lb, k_ub, k_re}`, all stored
/// nonnegative. The test passes when the standardized margin lies in
/// `[−k_lb, k_ub]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginVector {
    pub k_ini: f64,
    pub k_lb: f64,
    pub k_ub: f64,
    pub k_re: f64,
}

/// Box the margin optimizer searches.
pub const MARGIN_BOUNDS: [f64; 2] = [0.0, 4.0];

impl MarginVector {
    /// Components must be nonnegative; infinite offsets are allowed for
    /// limiting cases.
    pub fn new(k_ini: f64, k_lb: f64, k_ub: f64, k_re: f64) -> Result<Self> {
        let k = MarginVector { k_ini, k_lb, k_ub, k_re };
        if k.as_array().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::input(format!("margin components must be nonnegative, got {k:?}")));
        }
        Ok(k)
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c, d] => MarginVector::new(*a, *b, *c, *d),
            _ => Err(Error::input(format!("a margin vector has 4 components, got {}", v.len()))),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.k_ini, self.k_lb, self.k_ub, self.k_re]
    }

    pub fn within_bounds(&self) -> bool {
        self.as_array().iter().all(|v| (MARGIN_BOUNDS[0]..=MARGIN_BOUNDS[1]).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedesignKind {
    None,
    Safety,
    Performance,
}

impl RedesignKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RedesignKind::None => "none",
            RedesignKind::Safety => "safety",
            RedesignKind::Performance => "performance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignOptions {
    /// Random starts for the initial design in addition to the box centre.
    pub starts: usize,
    pub seed: u64,
    pub tol: f64,
    pub fd_step: f64,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { starts: 4, seed: 0, tol: 1e-6, fd_step: 1e-6 }
    }
}

/// A deterministic design and its margin bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub x: Vec<f64>,
    pub objective: f64,
    /// `ḡ_H(x, u_cons)`.
    pub mean_margin: f64,
    /// `σ_G(x, u_cons)`.
    pub sigma: f64,
    /// `ḡ_H − k σ_G`, limit-state units.
    pub constraint: f64,
    pub converged: bool,
}

fn joint(x: &[f64], u: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    p.extend_from_slice(u);
    p
}

/// Mean and standard deviation of the corrected limit state at `(x, u)`.
pub fn corrected_margin(model: &ErrorModel, problem: &DesignProblem, x: &[f64], u: &[f64]) -> (f64, f64) {
    let p = model.predict_unchecked(&joint(x, u));
    (problem.lofi(x, u) + p.mean, p.sd)
}

fn margin_design(
    model: &ErrorModel,
    problem: &DesignProblem,
    u_cons: &[f64],
    k: f64,
    starts: &[Vec<f64>],
    opts: &DesignOptions,
) -> Result<DesignPoint> {
    let scale = problem.limit_state_scale;
    let sqp_opts = sqp::SqpOptions { tol: opts.tol, fd_step: opts.fd_step, ..Default::default() };
    let mut best: Option<DesignPoint> = None;
    let mut least_violated: Option<(f64, Vec<f64>)> = None;
    for x0 in starts {
        let r = sqp::minimize(
            |x| {
                let (m, s) = corrected_margin(model, problem, x, u_cons);
                let mut c = vec![(m - k * s) / scale];
                c.extend(problem.deterministic_constraints(x));
                (problem.objective(x, u_cons), c)
            },
            x0,
            &problem.lower,
            &problem.upper,
            &sqp_opts,
        );
        let viol = r.max_violation();
        if viol > opts.tol {
            if least_violated.as_ref().is_none_or(|(v, _)| viol < *v) {
                least_violated = Some((viol, r.x.clone()));
            }
            continue;
        }
        let (m, s) = corrected_margin(model, problem, &r.x, u_cons);
        let cand = DesignPoint {
            objective: problem.objective(&r.x, u_cons),
            mean_margin: m,
            sigma: s,
            constraint: m - k * s,
            converged: r.converged,
            x: r.x,
        };
        if best.as_ref().is_none_or(|b| cand.objective < b.objective - 1e-12 * b.objective.abs()) {
            best = Some(cand);
        }
        // a converged warm start is what redesign asks for
        if starts.len() == 1 {
            break;
        }
    }
    best.ok_or_else(|| {
        let (viol, x) = least_violated.unwrap_or((f64::INFINITY, Vec::new()));
        let binding: Vec<String> = x
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                if (v - problem.upper[i]).abs() <= 1e-9 * (1.0 + v.abs()) {
                    Some(format!("x[{i}] at upper bound {}", problem.upper[i]))
                } else if (v - problem.lower[i]).abs() <= 1e-9 * (1.0 + v.abs()) {
                    Some(format!("x[{i}] at lower bound {}", problem.lower[i]))
                } else {
                    None
                }
            })
            .collect();
        Error::Infeasible(format!(
            "margin k = {k} cannot be met in the design box; least violation {viol:e} (scaled) at {x:?}, binding: {}",
            if binding.is_empty() { "none".to_string() } else { binding.join(", ") }
        ))
    })
}

fn design_starts(problem: &DesignProblem, opts: &DesignOptions) -> Vec<Vec<f64>> {
    let centre: Vec<f64> = problem.lower.iter().zip(&problem.upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let mut starts = vec![centre];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for s in latin_hypercube(opts.starts, problem.design_dim(), &mut rng) {
        starts.push(s.iter().enumerate().map(|(i, t)| problem.lower[i] + t * (problem.upper[i] - problem.lower[i])).collect());
    }
    starts
}

/// Minimize `f(x, u_cons)` subject to `ḡ_H(x, u_cons) − k_ini σ_G(x, u_cons) ≥ 0`.
pub fn initial_design(
    model: &ErrorModel,
    problem: &DesignProblem,
    u_cons: &[f64],
    k_ini: f64,
    opts: &DesignOptions,
) -> Result<DesignPoint> {
    if !(k_ini >= 0.0) {
        return Err(Error::input(format!("k_ini must be nonnegative, got {k_ini}")));
    }
    margin_design(model, problem, u_cons, k_ini, &design_starts(problem, opts), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Realized high-fidelity limit state at `(x_ini, u_cons)`.
    pub test_value: f64,
    /// Realized discrepancy at the same point.
    pub discrepancy: f64,
    pub mean_margin: f64,
    pub sigma: f64,
    pub z: f64,
}

/// Simulate the future high-fidelity test of the initial design.
pub fn simulate_test(
    trajectory: &mut ErrorTrajectory<'_>,
    model: &ErrorModel,
    problem: &DesignProblem,
    x_ini: &[f64],
    u_cons: &[f64],
) -> Result<TestResult> {
    let (m, s) = corrected_margin(model, problem, x_ini, u_cons);
    if s <= 1e-12 * problem.limit_state_scale {
        return Err(Error::DegenerateTest { sd: s });
    }
    let e = trajectory.eval(x_ini, u_cons);
    let test_value = problem.lofi(x_ini, u_cons) + e;
    Ok(TestResult { test_value, discrepancy: e, mean_margin: m, sigma: s, z: (test_value - m) / s })
}

pub fn decide_redesign(z: f64, k: &MarginVector) -> (bool, RedesignKind) {
    if z < -k.k_lb {
        (true, RedesignKind::Safety)
    } else if z > k.k_ub {
        (true, RedesignKind::Performance)
    } else {
        (false, RedesignKind::None)
    }
}

/// Calibrate the model on the test and redesign with margin `k_re`, starting
/// from the initial design.
pub fn redesign(
    model: &ErrorModel,
    problem: &DesignProblem,
    x_ini: &[f64],
    u_cons: &[f64],
    observed_discrepancy: f64,
    k_re: f64,
    opts: &DesignOptions,
) -> Result<(DesignPoint, ErrorModel)> {
    let calibrated = model.condition_on(&joint(x_ini, u_cons), observed_discrepancy)?;
    let warm = margin_design(&calibrated, problem, u_cons, k_re, &[x_ini.to_vec()], opts);
    let point = match warm {
        Ok(p) if p.converged => p,
        _ => {
            let mut starts = vec![x_ini.to_vec()];
            starts.extend(design_starts(problem, opts));
            margin_design(&calibrated, problem, u_cons, k_re, &starts, opts)?
        }
    };
    Ok((point, calibrated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutcome {
    pub seed: u64,
    pub x_ini: Vec<f64>,
    pub test_value: f64,
    pub z_ini: f64,
    pub q: bool,
    pub redesign_kind: RedesignKind,
    pub x_re: Option<Vec<f64>>,
    pub x_final: Vec<f64>,
    pub f_ini: f64,
    pub f_final: f64,
    /// Realized high-fidelity margin of the final design at `u_cons`.
    pub margin_final: f64,
    /// Set when the model was already certain at the initial design, so the
    /// test could not change anything.
    pub degenerate: bool,
}

/// Run one future given its trajectory. `x_ini` is shared across futures.
pub fn run_cycle(
    model: &ErrorModel,
    trajectory: &mut ErrorTrajectory<'_>,
    problem: &DesignProblem,
    u_cons: &[f64],
    k: &MarginVector,
    x_ini: &DesignPoint,
    opts: &DesignOptions,
) -> Result<DesignOutcome> {
    let seed = trajectory.seed();
    let tag = |e: Error| Error::Future { seed, source: Box::new(e) };
    let f_ini = problem.objective(&x_ini.x, u_cons);
    let test = match simulate_test(trajectory, model, problem, &x_ini.x, u_cons) {
        Ok(t) => t,
        Err(Error::DegenerateTest { .. }) => {
            let e = trajectory.eval(&x_ini.x, u_cons);
            let g = problem.lofi(&x_ini.x, u_cons) + e;
            return Ok(DesignOutcome {
                seed,
                x_ini: x_ini.x.clone(),
                test_value: g,
                z_ini: 0.0,
                q: false,
                redesign_kind: RedesignKind::None,
                x_re: None,
                x_final: x_ini.x.clone(),
                f_ini,
                f_final: f_ini,
                margin_final: g,
                degenerate: true,
            });
        }
        Err(e) => return Err(tag(e)),
    };
    let (q, kind) = decide_redesign(test.z, k);
    let (x_re, x_final, f_final, margin_final) = if q {
        let (point, _) = redesign(model, problem, &x_ini.x, u_cons, test.discrepancy, k.k_re, opts).map_err(tag)?;
        let margin = problem.lofi(&point.x, u_cons) + trajectory.eval(&point.x, u_cons);
        (Some(point.x.clone()), point.x, point.objective, margin)
    } else {
        (None, x_ini.x.clone(), f_ini, test.test_value)
    };
    Ok(DesignOutcome {
        seed,
        x_ini: x_ini.x.clone(),
        test_value: test.test_value,
        z_ini: test.z,
        q,
        redesign_kind: kind,
        x_re,
        x_final,
        f_ini,
        f_final,
        margin_final,
        degenerate: false,
    })
}

/// Seed of the `index`-th future under a master seed. Mixing both through
/// SplitMix64 keeps neighbouring futures uncorrelated.
pub fn future_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

/// Master seed of an independent stream of futures. Propagation draws its
/// futures from a different stream than the margin search so the validation
/// does not reuse the realizations the margins were tuned on.
pub fn stream_seed(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
