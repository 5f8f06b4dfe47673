//! Preliminary reliability-based design on a mean limit state, and the
//! conservative aleatory values that stand in for the aleatory variables in
//! the deterministic design problems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::ErrorModel;
use crate::optim::{latin_hypercube, sqp};
use crate::problems::DesignProblem;
use crate::reliability::{form_pf, from_standard_normal, to_standard_normal, AleatoryDistribution, FormOptions};
use crate::stats::{halton, norm_ppf};

/// Which limit state the preliminary RBDO treats as the mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanModel {
    /// `g_L + ē`, the low-fidelity model corrected by the discrepancy mean.
    #[default]
    Corrected,
    /// `g_L` alone.
    LowFidelity,
}

/// Evaluates the chosen mean limit state.
pub fn mean_limit_state<'a>(
    problem: &'a DesignProblem,
    model: &'a ErrorModel,
    mean_model: MeanModel,
) -> impl Fn(&[f64], &[f64]) -> f64 + Sync + 'a {
    move |x: &[f64], u: &[f64]| {
        let g = problem.lofi(x, u);
        match mean_model {
            MeanModel::LowFidelity => g,
            MeanModel::Corrected => {
                let mut p = x.to_vec();
                p.extend_from_slice(u);
                g + model.predict_unchecked(&p).mean
            }
        }
    }
}

/// Objective averaged over the aleatory variables when the problem says it
/// depends on them, otherwise evaluated once at the aleatory means.
pub fn expected_objective_over_aleatory(problem: &DesignProblem, x: &[f64], samples: &[Vec<f64>]) -> f64 {
    if !problem.objective_uses_aleatory || samples.is_empty() {
        return problem.objective(x, &problem.aleatory_means());
    }
    samples.iter().map(|u| problem.objective(x, u)).sum::<f64>() / samples.len() as f64
}

/// Fixed low-discrepancy aleatory sample for objective averaging.
pub fn aleatory_sample(dists: &[AleatoryDistribution], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let z: Vec<f64> = (0..dists.len()).map(|d| norm_ppf(halton(i + 1, d))).collect();
            from_standard_normal(&z, dists)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbdoOptions {
    /// Random starts in addition to the box centre.
    pub starts: usize,
    pub seed: u64,
    pub tol: f64,
    /// Finite-difference step of the outer loop, in unit-box coordinates.
    pub fd_step: f64,
    pub objective_samples: usize,
}

impl Default for RbdoOptions {
    fn default() -> Self {
        RbdoOptions { starts: 4, seed: 0, tol: 1e-6, fd_step: 1e-5, objective_samples: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbdoResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub beta: f64,
    pub pf: f64,
    pub converged: bool,
}

/// Double-loop RBDO: SQP on the design, FORM for the reliability index.
///
/// The probabilistic constraint is written as `β(x) ≥ β★`, which is the same
/// feasible set as `p_F ≤ p_F★` and better scaled.
pub fn solve_rbdo<G>(problem: &DesignProblem, mean_g: G, opts: &RbdoOptions) -> Result<RbdoResult>
where
    G: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let beta_t = problem.target_beta();
    let form_opts = FormOptions::default();
    let samples = aleatory_sample(&problem.aleatory, opts.objective_samples);
    let n = problem.design_dim();
    let centre: Vec<f64> = problem.lower.iter().zip(&problem.upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let mut starts = vec![centre];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for s in latin_hypercube(opts.starts, n, &mut rng) {
        starts.push(s.iter().enumerate().map(|(i, t)| problem.lower[i] + t * (problem.upper[i] - problem.lower[i])).collect());
    }

    let sqp_opts = sqp::SqpOptions { tol: opts.tol, fd_step: opts.fd_step, ..Default::default() };
    let mut best: Option<RbdoResult> = None;
    for x0 in &starts {
        let r = sqp::minimize(
            |x| {
                let f = expected_objective_over_aleatory(problem, x, &samples);
                let beta = form_pf(&mean_g, &problem.aleatory, x, &form_opts).beta;
                let mut c = vec![(beta - beta_t).clamp(-1e3, 1e3)];
                c.extend(problem.deterministic_constraints(x));
                (f, c)
            },
            x0,
            &problem.lower,
            &problem.upper,
            &sqp_opts,
        );
        let form = form_pf(&mean_g, &problem.aleatory, &r.x, &form_opts);
        let feasible = form.beta >= beta_t - 1e-4 && problem.deterministic_constraints(&r.x).iter().all(|c| *c >= -1e-8);
        if !feasible {
            continue;
        }
        let cand = RbdoResult { objective: r.f, beta: form.beta, pf: form.pf, converged: r.converged, x: r.x };
        if best.as_ref().is_none_or(|b| cand.objective < b.objective - 1e-12 * b.objective.abs()) {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::Infeasible(format!("no RBDO start reached β ≥ {beta_t:.4} within the design bounds")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConservativeMode {
    RbdoMpp,
    Percentile { levels: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservativeValues {
    pub u_cons: Vec<f64>,
    pub uhat_cons: Vec<f64>,
    pub x_rbdo: Option<Vec<f64>>,
    pub beta_target: f64,
    pub mode: ConservativeMode,
}

/// MPP of the mean limit state at a fixed design.
///
/// Falls back to a direct minimization of `‖û‖²` on the limit surface when
/// FORM does not converge.
pub fn find_mpp<G>(problem: &DesignProblem, mean_g: G, x: &[f64]) -> Result<ConservativeValues>
where
    G: Fn(&[f64], &[f64]) -> f64,
{
    problem.check_design(x)?;
    let form = form_pf(&mean_g, &problem.aleatory, x, &FormOptions::default());
    let scale = problem.limit_state_scale;
    let uhat = if form.converged {
        form.mpp_uhat
    } else {
        let p = problem.aleatory_dim();
        let r = sqp::minimize(
            |z| {
                let u = from_standard_normal(z, &problem.aleatory);
                let g = mean_g(x, &u) / scale;
                (z.iter().map(|v| v * v).sum::<f64>(), vec![g, -g])
            },
            &form.mpp_uhat,
            &vec![-10.0; p],
            &vec![10.0; p],
            &sqp::SqpOptions { f_scale: Some(1.0), ..Default::default() },
        );
        let u = from_standard_normal(&r.x, &problem.aleatory);
        if !r.converged || mean_g(x, &u).abs() > 1e-6 * scale {
            return Err(Error::Estimation("MPP search failed by FORM and by direct minimization".into()));
        }
        r.x
    };
    let u_cons = from_standard_normal(&uhat, &problem.aleatory);
    Ok(ConservativeValues {
        u_cons,
        uhat_cons: uhat,
        x_rbdo: Some(x.to_vec()),
        beta_target: problem.target_beta(),
        mode: ConservativeMode::RbdoMpp,
    })
}

/// Componentwise quantiles of the aleatory distributions.
pub fn percentile_conservative(dists: &[AleatoryDistribution], levels: &[f64]) -> Result<ConservativeValues> {
    if levels.len() != dists.len() {
        return Err(Error::input(format!("{} levels for {} aleatory variables", levels.len(), dists.len())));
    }
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::input("percentile levels must lie in (0,1)"));
    }
    let u_cons: Vec<f64> = dists.iter().zip(levels).map(|(d, l)| d.quantile(*l)).collect();
    let uhat_cons = to_standard_normal(&u_cons, dists)?;
    let beta = uhat_cons.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ConservativeValues { u_cons, uhat_cons, x_rbdo: None, beta_target: beta, mode: ConservativeMode::Percentile { levels: levels.to_vec() } })
}
