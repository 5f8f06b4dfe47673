mod common;

use common::Setup;
use proptest::prelude::*;
use redesign_core::design_cycle::MarginVector;
use redesign_core::gp::ErrorModel;
use redesign_core::margins::{
    approx_exceedance, expected_objective, optimize_margins, probability_of_redesign, tradeoff_sweep, MarginOptProblem,
};
use redesign_core::optim::cmaes::CmaesOptions;
use statrs::distribution::{ContinuousCDF, Normal};

/// statrs' normal CDF carries errors up to a few 1e-11.
const STATRS_TOL: f64 = 1e-9;

fn phi(z: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

fn truncated_oracle(z: f64, a: f64, b: f64) -> f64 {
    let zc = z.clamp(a, b);
    (phi(zc) - phi(a)) / (phi(b) - phi(a))
}

fn k(a: f64, b: f64, c: f64, d: f64) -> MarginVector {
    MarginVector::new(a, b, c, d).unwrap()
}

#[test]
fn redesign_probability_examples() {
    let oracle = phi(-0.89) + 1.0 - phi(2.25);
    let v = probability_of_redesign(&k(0.71, 0.89, 2.25, 3.0));
    assert!((v - oracle).abs() < STATRS_TOL);
    assert!((v - 0.1989).abs() < 1e-4);
    assert!((probability_of_redesign(&k(1.0, 0.0, f64::INFINITY, 1.0)) - 0.5).abs() < 1e-15);
    assert!((probability_of_redesign(&k(1.0, 0.0, 0.0, 1.0)) - 1.0).abs() < 1e-15);
}

#[test]
fn closed_form_exceedance_examples() {
    let kp = k(0.71, 0.89, 2.25, 3.0);
    let p = phi(-0.89) + 1.0 - phi(2.25);
    let oracle = (1.0 - p) * truncated_oracle(-0.71, -0.89, 2.25) + p * phi(-3.0);
    let v = approx_exceedance(&kp).unwrap();
    assert!((v - oracle).abs() < STATRS_TOL);
    assert!((v - 0.0525).abs() < 1e-3);

    let never_fails = approx_exceedance(&k(0.71, 0.89, 2.25, f64::INFINITY)).unwrap();
    assert!((never_fails - (1.0 - p) * truncated_oracle(-0.71, -0.89, 2.25)).abs() < STATRS_TOL);

    let no_redesign = approx_exceedance(&k(0.71, f64::INFINITY, f64::INFINITY, 1.0)).unwrap();
    assert!((no_redesign - phi(-0.71)).abs() < STATRS_TOL);

    // an empty pass band leaves the truncated branch undefined
    assert!(approx_exceedance(&k(0.5, 0.0, 0.0, 1.0)).is_err());
}

proptest! {
    #[test]
    fn exceedance_nonincreasing_in_initial_and_redesign_margins(
        ki in 0.0f64..4.0, dk in 0.0f64..1.0, lb in 0.05f64..4.0, ub in 0.05f64..4.0, kr in 0.0f64..4.0,
    ) {
        let base = approx_exceedance(&k(ki, lb, ub, kr)).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!(approx_exceedance(&k(ki + dk, lb, ub, kr)).unwrap() <= base + 1e-15);
        prop_assert!(approx_exceedance(&k(ki, lb, ub, kr + dk)).unwrap() <= base + 1e-15);
    }

    #[test]
    fn redesign_probability_nonincreasing_in_band(lb in 0.0f64..4.0, ub in 0.0f64..4.0, d in 0.0f64..1.0) {
        let p = probability_of_redesign(&k(1.0, lb, ub, 1.0));
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(probability_of_redesign(&k(1.0, lb + d, ub, 1.0)) <= p + 1e-15);
        prop_assert!(probability_of_redesign(&k(1.0, lb, ub + d, 1.0)) <= p + 1e-15);
    }
}

#[test]
fn problem_validation() {
    let s = Setup::toy();
    assert!(MarginOptProblem::new(&s.problem, &s.model, &s.cons, 0.2, 99, 1).is_err());
    assert!(MarginOptProblem::new(&s.problem, &s.model, &s.cons, 1.5, 100, 1).is_err());
    assert!(MarginOptProblem::new(&s.problem, &s.model, &s.cons, 0.2, 100, 1).is_ok());
}

#[test]
fn expected_objective_is_deterministic_and_consistent() {
    let s = Setup::toy();
    let kv = k(0.8, 1.0, 2.0, 2.5);
    let small = MarginOptProblem::new(&s.problem, &s.model, &s.cons, 0.2, 400, 11).unwrap();
    let a = expected_objective(&small, &kv).unwrap();
    assert_eq!(a, expected_objective(&small, &kv).unwrap());
    assert_eq!(a.futures, 400);
    assert!(a.cov > 0.0);
    assert!((a.cov - a.std_err / a.mean.abs()).abs() < 1e-15);

    let large = MarginOptProblem { m: 800, ..small.clone() };
    let b = expected_objective(&large, &kv).unwrap();
    let combined = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 3.0 * combined, "{} vs {}", a.mean, b.mean);
}

#[test]
fn certain_model_has_no_spread() {
    let s = Setup::toy();
    let certain = ErrorModel::certain(2, 0.0);
    let ctx = MarginOptProblem::new(&s.problem, &certain, &s.cons, 0.2, 100, 2).unwrap();
    let e = expected_objective(&ctx, &k(1.0, 1.0, 1.0, 1.0)).unwrap();
    assert_eq!(e.mean, e.f_ini);
    assert_eq!(e.std_err, 0.0);
    assert_eq!(e.cov, 0.0);
    assert_eq!(e.redesigned, 0);
}

fn quick(ctx: &mut MarginOptProblem<'_>) {
    ctx.cmaes = CmaesOptions { max_generations: 60, restarts: 0, seed: ctx.master_seed, ..CmaesOptions::default() };
}

#[test]
fn returned_point_satisfies_its_constraints() {
    let s = Setup::toy();
    let mut ctx = MarginOptProblem::new(&s.problem, &s.model, &s.cons, 0.2, 200, 5).unwrap();
    quick(&mut ctx);
    let t = optimize_margins(&ctx).unwrap();
    assert!(t.k.within_bounds());
    let p = probability_of_redesign(&t.k);
    let e = approx_exceedance(&t.k).unwrap();
    assert!(p <= 0.2 + 1e-9, "p_re = {p}");
    assert!(e <= ctx.alpha + 1e-9, "exceedance = {e}");
    assert_eq!(t.p_re, p);
    assert_eq!(t.neg_margin_prob, e);
    let again = expected_objective(&ctx, &t.k).unwrap();
    assert_eq!(again.mean, t.expected_f);
}

#[test]
fn unconstrained_limit_drives_initial_margin_down() {
    let s = Setup::toy();
    let mut ctx = MarginOptProblem::new(&s.problem, &s.model, &s.cons, 1.0, 100, 6).unwrap();
    ctx.alpha = 1.0;
    quick(&mut ctx);
    let t = optimize_margins(&ctx).unwrap();
    assert!(t.k.k_ini < 0.25, "k_ini = {}", t.k.k_ini);
}

#[test]
fn sweep_is_monotone_and_reproducible() {
    let s = Setup::toy();
    let mut ctx = MarginOptProblem::new(&s.problem, &s.model, &s.cons, 0.05, 200, 8).unwrap();
    quick(&mut ctx);
    let caps = [0.05, 0.1, 0.2, 0.3];
    let sweep = tradeoff_sweep(&ctx, &caps).unwrap();
    assert_eq!(sweep.len(), 4);
    let pts: Vec<_> = sweep.iter().map(|(_, r)| r.as_ref().unwrap().clone()).collect();
    for w in pts.windows(2) {
        let se = (w[0].expected_f_std_err.powi(2) + w[1].expected_f_std_err.powi(2)).sqrt();
        assert!(w[1].expected_f <= w[0].expected_f + 2.0 * se, "{} then {}", w[0].expected_f, w[1].expected_f);
    }

    let single = tradeoff_sweep(&ctx, &[0.2]).unwrap();
    assert_eq!(single[0].1.as_ref().unwrap(), &optimize_margins(&ctx.with_cap(0.2)).unwrap());
    let dup = tradeoff_sweep(&ctx, &[0.2, 0.2]).unwrap();
    assert_eq!(dup[0].1.as_ref().unwrap(), dup[1].1.as_ref().unwrap());
    assert_eq!(dup[0].1.as_ref().unwrap(), &pts[2]);
}
