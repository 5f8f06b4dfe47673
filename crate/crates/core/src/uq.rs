//! Two-level propagation: for each future, the probability of failure of the
//! initial and final designs under that future's discrepancy realization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_cycle::{future_seed, stream_seed, initial_design, run_cycle, DesignOptions, DesignOutcome, DesignPoint, MarginVector, RedesignKind};
use crate::error::{Error, Result};
use crate::gp::{ErrorModel, ErrorTrajectory};
use crate::margins::approx_exceedance;
use crate::problems::DesignProblem;
use crate::reliability::{form_pf, mcs_pf, FormOptions};
use crate::stats::{mean, norm_ppf, pearson, quantile, Histogram, Proportion};

pub const FALLBACK_SAMPLES: usize = 100_000;
pub const HISTOGRAM_BINS: usize = 40;
/// Stream of futures used for propagation; the margin search uses the
/// master seed directly.
pub const PROPAGATION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfMethod {
    Form,
    /// Crude Monte Carlo on the realization's conditional mean given the
    /// values already drawn; used when FORM does not converge.
    McsFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfRealization {
    pub pf: f64,
    pub beta: f64,
    pub mpp_uhat: Vec<f64>,
    pub method: PfMethod,
}

/// Probability of failure of design `x` under the realized limit state
/// `g_L + e⁽ⁱ⁾`.
pub fn pf_realization(trajectory: &mut ErrorTrajectory<'_>, problem: &DesignProblem, x: &[f64]) -> Result<PfRealization> {
    problem.check_design(x)?;
    let form = form_pf(|x: &[f64], u: &[f64]| problem.lofi(x, u) + trajectory.eval(x, u), &problem.aleatory, x, &FormOptions::default());
    if form.converged {
        return Ok(PfRealization { pf: form.pf, beta: form.beta, mpp_uhat: form.mpp_uhat, method: PfMethod::Form });
    }
    let (pts, vals): (Vec<Vec<f64>>, Vec<f64>) = trajectory.cache().iter().cloned().unzip();
    let realized = trajectory.model().condition_on_many(&pts, &vals)?;
    let est = mcs_pf(
        |x: &[f64], u: &[f64]| {
            let mut joint = x.to_vec();
            joint.extend_from_slice(u);
            problem.lofi(x, u) + realized.predict_mean_unchecked(&joint)
        },
        &problem.aleatory,
        x,
        FALLBACK_SAMPLES,
        trajectory.seed() ^ 0x5DEE_CE66,
    );
    Ok(PfRealization { pf: est.pf, beta: -norm_ppf(est.pf), mpp_uhat: form.mpp_uhat, method: PfMethod::McsFallback })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureRecord {
    pub outcome: DesignOutcome,
    pub initial: PfRealization,
    pub redesigned: Option<PfRealization>,
    pub pf_final: f64,
    pub beta_final: f64,
}

impl FutureRecord {
    pub fn final_realization(&self) -> &PfRealization {
        self.redesigned.as_ref().unwrap_or(&self.initial)
    }
}

/// Raw per-future results before any aggregation.
#[derive(Debug)]
pub struct FutureBatch {
    pub x_ini: DesignPoint,
    pub records: Vec<Result<FutureRecord>>,
}

pub fn simulate_futures(
    model: &ErrorModel,
    problem: &DesignProblem,
    u_cons: &[f64],
    k: &MarginVector,
    m: usize,
    master_seed: u64,
    design: &DesignOptions,
) -> Result<FutureBatch> {
    let x_ini = initial_design(model, problem, u_cons, k.k_ini, design)?;
    let master = stream_seed(master_seed, PROPAGATION_STREAM);
    let records = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let mut traj = ErrorTrajectory::new(model, future_seed(master, i));
            let seed = traj.seed();
            let tag = |e: Error| match e {
                Error::Future { .. } => e,
                e => Error::Future { seed, source: Box::new(e) },
            };
            let outcome = run_cycle(model, &mut traj, problem, u_cons, k, &x_ini, design)?;
            let initial = pf_realization(&mut traj, problem, &outcome.x_ini).map_err(tag)?;
            let redesigned = match &outcome.x_re {
                Some(x) => Some(pf_realization(&mut traj, problem, x).map_err(tag)?),
                None => None,
            };
            let fin = redesigned.as_ref().unwrap_or(&initial);
            let (pf_final, beta_final) = (fin.pf, fin.beta);
            Ok(FutureRecord { outcome, initial, redesigned, pf_final, beta_final })
        })
        .collect();
    Ok(FutureBatch { x_ini, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        Some(Summary {
            count: values.len(),
            mean: mean(values),
            q05: quantile(values, 0.05),
            q50: quantile(values, 0.5),
            q95: quantile(values, 0.95),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub futures: usize,
    pub objective: Option<Summary>,
    /// `f_final / f_ini − 1`.
    pub objective_change: Option<Summary>,
    pub margin: Option<Summary>,
    pub beta: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedHistogram {
    pub quantity: String,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub k: MarginVector,
    pub m: usize,
    pub master_seed: u64,
    pub target_pf: f64,
    pub x_ini: Vec<f64>,
    pub futures: usize,
    pub aborted: Vec<String>,
    /// Futures whose model was certain at the initial design.
    pub degenerate: usize,
    pub fallbacks: usize,
    pub redesign_fraction: Proportion,
    /// `P̂[P_F ≥ p_F★]` over futures, 95% Wilson interval.
    pub exceedance: Proportion,
    /// Pearson correlation of the final margin at `u_cons` with the final
    /// reliability index; `None` when either is constant.
    pub margin_beta_correlation: Option<f64>,
    /// Same, pairing the tested margin of the initial design instead.
    pub test_margin_beta_correlation: Option<f64>,
    pub mean_mpp_uhat: Vec<f64>,
    pub summaries: Vec<GroupSummary>,
    pub histograms: Vec<NamedHistogram>,
}

fn group(name: &str, recs: &[&FutureRecord]) -> GroupSummary {
    let f: Vec<f64> = recs.iter().map(|r| r.outcome.f_final).collect();
    let df: Vec<f64> = recs.iter().map(|r| r.outcome.f_final / r.outcome.f_ini - 1.0).collect();
    let g: Vec<f64> = recs.iter().map(|r| r.outcome.margin_final).collect();
    let b: Vec<f64> = recs.iter().map(|r| r.beta_final).filter(|b| b.is_finite()).collect();
    GroupSummary {
        group: name.to_string(),
        futures: recs.len(),
        objective: Summary::of(&f),
        objective_change: Summary::of(&df),
        margin: Summary::of(&g),
        beta: Summary::of(&b),
    }
}

/// Aggregate a batch. More than 1% aborted futures is an estimation error.
pub fn assemble_report(
    batch: &FutureBatch,
    problem: &DesignProblem,
    k: &MarginVector,
    master_seed: u64,
) -> Result<UqReport> {
    let m = batch.records.len();
    let mut recs: Vec<&FutureRecord> = Vec::with_capacity(m);
    let mut aborted = Vec::new();
    for r in &batch.records {
        match r {
            Ok(rec) => recs.push(rec),
            Err(e) => aborted.push(e.to_string()),
        }
    }
    if aborted.len() as f64 > 0.01 * m as f64 {
        return Err(Error::Estimation(format!("{} of {m} futures aborted; first: {}", aborted.len(), aborted[0])));
    }
    let n = recs.len();
    let exceed = recs.iter().filter(|r| r.pf_final >= problem.target_pf).count();
    let redesigned = recs.iter().filter(|r| r.outcome.q).count();
    let margins: Vec<f64> = recs.iter().map(|r| r.outcome.margin_final).collect();
    let tests: Vec<f64> = recs.iter().map(|r| r.outcome.test_value).collect();
    let betas: Vec<f64> = recs.iter().map(|r| r.beta_final).collect();
    let finite = betas.iter().all(|b| b.is_finite());
    let (corr, test_corr) = if finite { (pearson(&margins, &betas), pearson(&tests, &betas)) } else { (None, None) };

    let p = problem.aleatory_dim();
    let mut mean_mpp = vec![0.0; p];
    for r in &recs {
        for (acc, v) in mean_mpp.iter_mut().zip(&r.final_realization().mpp_uhat) {
            *acc += v / n as f64;
        }
    }

    let by = |kind: RedesignKind| recs.iter().copied().filter(|r| r.outcome.redesign_kind == kind).collect::<Vec<_>>();
    let summaries = vec![
        group("all", &recs),
        group("none", &by(RedesignKind::None)),
        group("safety", &by(RedesignKind::Safety)),
        group("performance", &by(RedesignKind::Performance)),
    ];
    let finite_betas: Vec<f64> = betas.iter().copied().filter(|b| b.is_finite()).collect();
    let mut series: Vec<(String, Vec<f64>)> = vec![
        ("margin_final".into(), margins.clone()),
        ("beta_final".into(), finite_betas),
        ("pf_final".into(), recs.iter().map(|r| r.pf_final).collect()),
        ("objective_final".into(), recs.iter().map(|r| r.outcome.f_final).collect()),
    ];
    for i in 0..batch.x_ini.x.len() {
        series.push((format!("x_final_{i}"), recs.iter().map(|r| r.outcome.x_final[i]).collect()));
    }
    let histograms = series
        .into_iter()
        .map(|(q, v)| NamedHistogram { quantity: q, histogram: Histogram::new(&v, HISTOGRAM_BINS) })
        .collect();

    Ok(UqReport {
        k: *k,
        m,
        master_seed,
        target_pf: problem.target_pf,
        x_ini: batch.x_ini.x.clone(),
        futures: n,
        aborted,
        degenerate: recs.iter().filter(|r| r.outcome.degenerate).count(),
        fallbacks: recs
            .iter()
            .map(|r| {
                (r.initial.method == PfMethod::McsFallback) as usize
                    + r.redesigned.as_ref().is_some_and(|p| p.method == PfMethod::McsFallback) as usize
            })
            .sum(),
        redesign_fraction: Proportion::wilson(redesigned, n, 0.95),
        exceedance: Proportion::wilson(exceed, n, 0.95),
        margin_beta_correlation: corr,
        test_margin_beta_correlation: test_corr,
        mean_mpp_uhat: mean_mpp,
        summaries,
        histograms,
    })
}

/// Simulate `m ≥ 1000` futures at margin vector `k` and aggregate.
pub fn full_uq(
    model: &ErrorModel,
    problem: &DesignProblem,
    u_cons: &[f64],
    k: &MarginVector,
    m: usize,
    master_seed: u64,
    design: &DesignOptions,
) -> Result<UqReport> {
    if m < 1000 {
        return Err(Error::input(format!("two-level propagation needs at least 1000 futures, got {m}")));
    }
    let batch = simulate_futures(model, problem, u_cons, k, m, master_seed, design)?;
    assemble_report(&batch, problem, k, master_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximationCheck {
    pub analytic: f64,
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub gap: Option<f64>,
    pub analytic_in_ci: Option<bool>,
    pub skipped: Option<String>,
}

/// Compare the simulated exceedance with the closed-form approximation.
pub fn validate_approximation(report: &UqReport, k: &MarginVector) -> ApproximationCheck {
    let analytic = approx_exceedance(k).unwrap_or(f64::NAN);
    let e = &report.exceedance;
    let mut check = ApproximationCheck {
        analytic,
        estimate: e.estimate,
        ci_lower: e.lower,
        ci_upper: e.upper,
        gap: None,
        analytic_in_ci: None,
        skipped: None,
    };
    if report.futures > 0 && report.degenerate == report.futures {
        check.skipped = Some("error model is certain at the initial design; every future is identical".into());
    } else if analytic.is_nan() {
        check.skipped = Some("closed form undefined for this margin vector (empty pass region)".into());
    } else {
        check.gap = Some((e.estimate - analytic).abs());
        check.analytic_in_ci = Some(e.contains(analytic));
    }
    check
}
