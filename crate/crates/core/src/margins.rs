//! Choosing the margin vector: analytic redesign and exceedance
//! probabilities, the Monte Carlo expected objective over futures, and the
//! CMA-ES search over `k ∈ [0,4]⁴` with penalized constraints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_cycle::{future_seed, initial_design, run_cycle, DesignOptions, DesignPoint, MarginVector, MARGIN_BOUNDS};
use crate::error::{Error, Result};
use crate::gp::{ErrorModel, ErrorTrajectory};
use crate::optim::cmaes::{self, CmaesOptions};
use crate::problems::DesignProblem;
use crate::rbdo::{aleatory_sample, expected_objective_over_aleatory, ConservativeValues};
use crate::stats::{norm_cdf, truncated_normal_cdf};

/// `Φ(−k_lb) + 1 − Φ(k_ub)`.
pub fn probability_of_redesign(k: &MarginVector) -> f64 {
    norm_cdf(-k.k_lb) + (1.0 - norm_cdf(k.k_ub))
}

/// Probability of a negative margin at `u_cons` after possible redesign:
/// a test-passing future keeps the initial margin, truncated to the pass
/// region, and a redesigned one has margin `k_re` standard deviations.
pub fn approx_exceedance(k: &MarginVector) -> Result<f64> {
    let p_re = probability_of_redesign(k);
    let kept = truncated_normal_cdf(-k.k_ini, -k.k_lb, k.k_ub)?;
    Ok((1.0 - p_re) * kept + p_re * norm_cdf(-k.k_re))
}

/// Everything the margin search needs besides the margin vector.
#[derive(Debug, Clone)]
pub struct MarginOptProblem<'a> {
    pub problem: &'a DesignProblem,
    pub model: &'a ErrorModel,
    pub u_cons: &'a ConservativeValues,
    pub alpha: f64,
    pub redesign_cap: f64,
    /// Futures per objective evaluation.
    pub m: usize,
    pub master_seed: u64,
    pub design: DesignOptions,
    pub cmaes: CmaesOptions,
    /// Aleatory sample size when the objective depends on `U`.
    pub objective_samples: usize,
}

impl<'a> MarginOptProblem<'a> {
    pub fn new(
        problem: &'a DesignProblem,
        model: &'a ErrorModel,
        u_cons: &'a ConservativeValues,
        redesign_cap: f64,
        m: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let p = MarginOptProblem {
            problem,
            model,
            u_cons,
            alpha: problem.alpha,
            redesign_cap,
            m,
            master_seed,
            design: DesignOptions::default(),
            cmaes: CmaesOptions { seed: master_seed, ..Default::default() },
            objective_samples: 64,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::input(format!("alpha must lie in (0,1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.redesign_cap) {
            return Err(Error::input(format!("redesign cap must lie in [0,1], got {}", self.redesign_cap)));
        }
        if self.m < 100 {
            return Err(Error::input(format!("at least 100 futures per evaluation are needed, got {}", self.m)));
        }
        if self.u_cons.u_cons.len() != self.problem.aleatory_dim() {
            return Err(Error::input("conservative values do not match the aleatory dimension"));
        }
        Ok(())
    }

    pub fn with_cap(&self, cap: f64) -> Self {
        MarginOptProblem { redesign_cap: cap, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub mean: f64,
    /// Standard error of `mean`.
    pub std_err: f64,
    /// `std_err / |mean|`.
    pub cov: f64,
    pub futures: usize,
    pub aborted: usize,
    pub redesigned: usize,
    pub x_ini: Vec<f64>,
    pub f_ini: f64,
}

fn final_objective(ctx: &MarginOptProblem<'_>, x: &[f64], samples: &[Vec<f64>]) -> f64 {
    if ctx.problem.objective_uses_aleatory {
        expected_objective_over_aleatory(ctx.problem, x, samples)
    } else {
        ctx.problem.objective(x, &ctx.u_cons.u_cons)
    }
}

/// Mean final objective over `m` futures. Future `i` always uses the
/// trajectory seeded by `future_seed(master_seed, i)`, so different margin
/// vectors see the same epistemic realizations.
pub fn expected_objective(ctx: &MarginOptProblem<'_>, k: &MarginVector) -> Result<ObjectiveEstimate> {
    let x_ini = initial_design(ctx.model, ctx.problem, &ctx.u_cons.u_cons, k.k_ini, &ctx.design)?;
    expected_objective_from(ctx, k, &x_ini)
}

fn expected_objective_from(ctx: &MarginOptProblem<'_>, k: &MarginVector, x_ini: &DesignPoint) -> Result<ObjectiveEstimate> {
    let samples = if ctx.problem.objective_uses_aleatory {
        aleatory_sample(&ctx.problem.aleatory, ctx.objective_samples)
    } else {
        Vec::new()
    };
    let runs: Vec<Result<(f64, bool)>> = (0..ctx.m as u64)
        .into_par_iter()
        .map(|i| {
            let mut traj = ErrorTrajectory::new(ctx.model, future_seed(ctx.master_seed, i));
            let out = run_cycle(ctx.model, &mut traj, ctx.problem, &ctx.u_cons.u_cons, k, x_ini, &ctx.design)?;
            Ok((final_objective(ctx, &out.x_final, &samples), out.q))
        })
        .collect();
    let mut values = Vec::with_capacity(runs.len());
    let mut aborted = 0;
    let mut redesigned = 0;
    let mut first_error = None;
    for r in runs {
        match r {
            Ok((f, q)) => {
                values.push(f);
                redesigned += q as usize;
            }
            Err(e) => {
                aborted += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if aborted as f64 > 0.01 * ctx.m as f64 {
        return Err(Error::Estimation(format!(
            "{aborted} of {} futures aborted; first: {}",
            ctx.m,
            first_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let n = values.len() as f64;
    let f_ini = final_objective(ctx, &x_ini.x, &samples);
    // shifted by f_ini: most futures keep the initial design
    let shift = values.iter().map(|v| v - f_ini).sum::<f64>() / n;
    let mean = f_ini + shift;
    let var = if values.len() > 1 { values.iter().map(|v| (v - f_ini - shift).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let std_err = (var / n).sqrt();
    let cov = if std_err == 0.0 { 0.0 } else { std_err / mean.abs() };
    Ok(ObjectiveEstimate {
        mean,
        std_err,
        cov,
        futures: values.len(),
        aborted,
        redesigned,
        f_ini,
        x_ini: x_ini.x.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub redesign_cap: f64,
    pub k: MarginVector,
    pub expected_f: f64,
    pub expected_f_std_err: f64,
    pub cov_expected_f: f64,
    pub p_re: f64,
    pub neg_margin_prob: f64,
    pub x_ini: Vec<f64>,
    pub f_ini: f64,
    pub penalty_weight: f64,
    pub generations: usize,
    pub evaluations: usize,
}

/// Violations are measured in probability units; a violation of this size
/// costs ten times the reference objective.
const VIOLATION_SCALE: f64 = 0.01;
const START: [f64; 4] = [2.0, 2.0, 2.0, 2.0];

fn violations(ctx: &MarginOptProblem<'_>, k: &MarginVector) -> Option<(f64, f64, f64, f64)> {
    let p_re = probability_of_redesign(k);
    let exc = approx_exceedance(k).ok()?;
    Some(((exc - ctx.alpha).max(0.0), (p_re - ctx.redesign_cap).max(0.0), p_re, exc))
}

/// CMA-ES over the margin box, minimizing the expected objective plus
/// `λ·max(0, exceedance − α)² + λ·max(0, p_re − cap)²`.
///
/// The returned point is the best evaluated candidate that meets both
/// constraints exactly, not merely the penalized minimum.
pub fn optimize_margins(ctx: &MarginOptProblem<'_>) -> Result<TradeoffPoint> {
    ctx.validate()?;
    let start = MarginVector::from_slice(&START)?;
    let f_ref = match expected_objective(ctx, &start) {
        Ok(est) => est.mean.abs(),
        Err(_) => ctx.problem.objective(&centre(ctx.problem), &ctx.u_cons.u_cons).abs(),
    }
    .max(1e-12);
    let lambda = 10.0 * f_ref / (VIOLATION_SCALE * VIOLATION_SCALE);
    let failed_value = 1e6 * f_ref;

    type Candidate = (Vec<f64>, f64, ObjectiveEstimate);
    let mut best_feasible: Option<Candidate> = None;
    let mut least_violation: Option<(f64, Vec<f64>, f64, f64)> = None;
    let lower = [MARGIN_BOUNDS[0]; 4];
    let upper = [MARGIN_BOUNDS[1]; 4];
    let r = cmaes::minimize(
        |batch: &[Vec<f64>]| {
            let evals: Vec<(f64, Option<(ObjectiveEstimate, f64)>)> = batch
                .par_iter()
                .map(|kv| {
                    let k = match MarginVector::from_slice(kv) {
                        Ok(k) => k,
                        Err(_) => return (failed_value, None),
                    };
                    let Some((v_exc, v_re, _, _)) = violations(ctx, &k) else {
                        return (failed_value, None);
                    };
                    let penalty = lambda * (v_exc * v_exc + v_re * v_re);
                    match expected_objective(ctx, &k) {
                        Ok(est) => (est.mean + penalty, Some((est, v_exc.max(v_re)))),
                        Err(_) => (failed_value + penalty, None),
                    }
                })
                .collect();
            let mut values = Vec::with_capacity(evals.len());
            for (kv, (value, est)) in batch.iter().zip(evals) {
                values.push(value);
                let Some((est, viol)) = est else { continue };
                if viol <= 0.0 {
                    if best_feasible.as_ref().is_none_or(|b| est.mean < b.1) {
                        best_feasible = Some((kv.clone(), est.mean, est));
                    }
                } else if least_violation.as_ref().is_none_or(|l| viol < l.0) {
                    let k = MarginVector::from_slice(kv).expect("validated above");
                    let (_, _, p_re, exc) = violations(ctx, &k).expect("validated above");
                    least_violation = Some((viol, kv.clone(), p_re, exc));
                }
            }
            values
        },
        &START,
        &lower,
        &upper,
        &ctx.cmaes,
    );

    let Some((kv, _, est)) = best_feasible else {
        let detail = match least_violation {
            Some((v, k, p_re, exc)) => format!("least violation {v:.4e} at k = {k:?} (p_re {p_re:.4}, exceedance {exc:.4})"),
            None => "no candidate produced a design".to_string(),
        };
        return Err(Error::Infeasible(format!(
            "no margin vector meets exceedance ≤ {} and p_re ≤ {}; {detail}",
            ctx.alpha, ctx.redesign_cap
        )));
    };
    let k = MarginVector::from_slice(&kv)?;
    // constraints re-derived from k alone
    let p_re = probability_of_redesign(&k);
    let neg_margin_prob = approx_exceedance(&k)?;
    Ok(TradeoffPoint {
        redesign_cap: ctx.redesign_cap,
        k,
        expected_f: est.mean,
        expected_f_std_err: est.std_err,
        cov_expected_f: est.cov,
        p_re,
        neg_margin_prob,
        x_ini: est.x_ini,
        f_ini: est.f_ini,
        penalty_weight: lambda,
        generations: r.generations,
        evaluations: r.evaluations,
    })
}

fn centre(problem: &DesignProblem) -> Vec<f64> {
    problem.lower.iter().zip(&problem.upper).map(|(l, u)| 0.5 * (l + u)).collect()
}

/// One margin optimization per cap with the same futures; failures are kept
/// in place so the sweep always returns one entry per cap.
pub fn tradeoff_sweep(ctx: &MarginOptProblem<'_>, caps: &[f64]) -> Result<Vec<(f64, Result<TradeoffPoint>)>> {
    if caps.is_empty() {
        return Err(Error::input("the cap list is empty"));
    }
    Ok(caps.iter().map(|&cap| (cap, optimize_margins(&ctx.with_cap(cap)))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(a: f64, b: f64, c: f64, d: f64) -> MarginVector {
        MarginVector::new(a, b, c, d).unwrap()
    }

    #[test]
    fn redesign_probability_limits() {
        assert!((probability_of_redesign(&k(0.0, 0.0, f64::INFINITY, 0.0)) - 0.5).abs() < 1e-15);
        assert!((probability_of_redesign(&k(0.0, 0.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exceedance_limits() {
        let p = approx_exceedance(&k(1.0, f64::INFINITY, f64::INFINITY, 0.0)).unwrap();
        assert!((p - norm_cdf(-1.0)).abs() < 1e-15);
        assert!(approx_exceedance(&k(1.0, 0.0, 0.0, 3.0)).is_err());
    }
}
