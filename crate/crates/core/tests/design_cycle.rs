mod common;

use common::{ks_p_value, within_binomial, Setup};
use redesign_core::design_cycle::{
    corrected_margin, decide_redesign, future_seed, initial_design, redesign, run_cycle, simulate_test, DesignOptions,
    MarginVector, RedesignKind,
};
use redesign_core::gp::{ErrorModel, ErrorTrajectory};
use redesign_core::margins::probability_of_redesign;
use redesign_core::uq::pf_realization;
use statrs::distribution::{ContinuousCDF, Normal};

fn phi(z: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(z)
}

fn reference_margins() -> MarginVector {
    MarginVector::new(0.71, 0.89, 2.25, 3.0).unwrap()
}

fn joint(x: &[f64], u: &[f64]) -> Vec<f64> {
    x.iter().chain(u).copied().collect()
}

#[test]
fn decision_examples() {
    let k = reference_margins();
    assert_eq!(decide_redesign(-1.0, &k), (true, RedesignKind::Safety));
    assert_eq!(decide_redesign(0.0, &k), (false, RedesignKind::None));
    assert_eq!(decide_redesign(2.5, &k), (true, RedesignKind::Performance));
    assert_eq!(decide_redesign(-0.89, &k), (false, RedesignKind::None));
    assert_eq!(decide_redesign(2.25, &k), (false, RedesignKind::None));
}

#[test]
fn margin_vector_bounds() {
    assert!(MarginVector::new(-0.1, 1.0, 1.0, 1.0).is_err());
    assert!(MarginVector::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    assert!(reference_margins().within_bounds());
    assert!(!MarginVector::new(4.5, 1.0, 1.0, 1.0).unwrap().within_bounds());
}

#[test]
fn beam_initial_design_constraint_is_active() {
    let s = Setup::beam();
    let opts = DesignOptions::default();
    let x = initial_design(&s.model, &s.problem, s.u_cons(), 0.71, &opts).unwrap();
    let scale = s.problem.limit_state_scale;
    let (m, sd) = corrected_margin(&s.model, &s.problem, &x.x, s.u_cons());
    let c = (m - 0.71 * sd) / scale;
    assert!((-1e-6..=1e-4).contains(&c), "scaled constraint {c:e}");
    assert!(sd > 0.0);

    let wider = initial_design(&s.model, &s.problem, s.u_cons(), 2.0, &opts).unwrap();
    assert!(wider.objective >= x.objective);
}

/// Smallest root of `x − u + ē(x) − k σ(x)` found by scanning and bisection.
fn toy_root(model: &ErrorModel, lower: f64, upper: f64, u: f64, k: f64) -> f64 {
    let h = |x: f64| {
        let p = model.predict(&[x, u]).unwrap();
        x - u + p.mean - k * p.sd
    };
    let n = 20_000;
    let mut a = lower;
    assert!(h(a) < 0.0);
    for i in 1..=n {
        let b = lower + (upper - lower) * i as f64 / n as f64;
        if h(b) >= 0.0 {
            let (mut lo, mut hi) = (a, b);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if h(mid) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return hi;
        }
        a = b;
    }
    panic!("no root in the design range");
}

#[test]
fn toy_initial_design_matches_root_finder() {
    let s = Setup::toy();
    let u = s.u_cons()[0];
    assert!((u - 3.0).abs() < 1e-6, "toy u_cons = {u}");
    for k in [0.0, 1.0, 3.0] {
        let x = initial_design(&s.model, &s.problem, s.u_cons(), k, &DesignOptions::default()).unwrap();
        let root = toy_root(&s.model, s.problem.lower[0], s.problem.upper[0], u, k);
        assert!((x.x[0] - root).abs() < 1e-5, "k = {k}: {} vs {root}", x.x[0]);
    }
}

#[test]
fn certain_model_gives_deterministic_optimum() {
    let s = Setup::toy();
    let certain = ErrorModel::certain(2, 0.0);
    let x = initial_design(&certain, &s.problem, s.u_cons(), 2.0, &DesignOptions::default()).unwrap();
    assert!((x.x[0] - s.u_cons()[0]).abs() < 1e-6);
    assert_eq!(x.sigma, 0.0);
    let mut t = ErrorTrajectory::new(&certain, 1);
    assert!(simulate_test(&mut t, &certain, &s.problem, &x.x, s.u_cons()).is_err());
}

#[test]
fn test_statistic_is_standard_normal() {
    let s = Setup::beam();
    let x = initial_design(&s.model, &s.problem, s.u_cons(), 0.71, &DesignOptions::default()).unwrap();
    let mut zs = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        let mut t = ErrorTrajectory::new(&s.model, future_seed(31, i));
        let r = simulate_test(&mut t, &s.model, &s.problem, &x.x, s.u_cons()).unwrap();
        let back = r.mean_margin + r.z * r.sigma;
        assert!((back - r.test_value).abs() <= 1e-10 * s.problem.limit_state_scale);
        zs.push(r.z);
    }
    let p = ks_p_value(&zs, phi);
    assert!(p > 0.01, "KS p = {p}");
}

#[test]
fn empirical_redesign_fraction_matches_closed_form() {
    let s = Setup::beam();
    let k = reference_margins();
    let x = initial_design(&s.model, &s.problem, s.u_cons(), k.k_ini, &DesignOptions::default()).unwrap();
    let n = 10_000;
    let (mut safety, mut perf) = (0, 0);
    for i in 0..n {
        let mut t = ErrorTrajectory::new(&s.model, future_seed(77, i));
        let r = simulate_test(&mut t, &s.model, &s.problem, &x.x, s.u_cons()).unwrap();
        match decide_redesign(r.z, &k).1 {
            RedesignKind::Safety => safety += 1,
            RedesignKind::Performance => perf += 1,
            RedesignKind::None => {}
        }
    }
    let p_re = phi(-0.89) + 1.0 - phi(2.25);
    assert!((probability_of_redesign(&k) - p_re).abs() < 1e-9);
    assert!(within_binomial(safety + perf, n as usize, p_re, 3.0), "{} redesigns", safety + perf);
    assert!(within_binomial(safety, n as usize, phi(-0.89), 3.0));
    assert!(within_binomial(perf, n as usize, 1.0 - phi(2.25), 3.0));
}

#[test]
fn redesign_calibrates_on_the_test() {
    let s = Setup::beam();
    let opts = DesignOptions::default();
    let x = initial_design(&s.model, &s.problem, s.u_cons(), 0.71, &opts).unwrap();
    let mut t = ErrorTrajectory::new(&s.model, 5);
    let r = simulate_test(&mut t, &s.model, &s.problem, &x.x, s.u_cons()).unwrap();
    let (xr, cal) = redesign(&s.model, &s.problem, &x.x, s.u_cons(), r.discrepancy, 3.0, &opts).unwrap();
    let (m, sd) = corrected_margin(&cal, &s.problem, &x.x, s.u_cons());
    let scale = s.problem.limit_state_scale;
    assert!(sd <= 1e-6 * scale, "calibrated sd {sd:e}");
    assert!((m - r.test_value).abs() <= 1e-8 * scale);
    let (mr, sr) = corrected_margin(&cal, &s.problem, &xr.x, s.u_cons());
    assert!(mr - 3.0 * sr >= -1e-6 * scale);
}

#[test]
fn cycle_invariants_hold_for_every_future() {
    let s = Setup::beam();
    let k = reference_margins();
    let opts = DesignOptions::default();
    let x = initial_design(&s.model, &s.problem, s.u_cons(), k.k_ini, &opts).unwrap();
    let scale = s.problem.limit_state_scale;
    let mut kinds = [0; 3];
    for i in 0..150 {
        let seed = future_seed(3, i);
        let mut t = ErrorTrajectory::new(&s.model, seed);
        let o = run_cycle(&s.model, &mut t, &s.problem, s.u_cons(), &k, &x, &opts).unwrap();
        assert_eq!(o.seed, seed);
        let (q, kind) = decide_redesign(o.z_ini, &k);
        assert_eq!((o.q, o.redesign_kind), (q, kind));
        match &o.x_re {
            Some(xr) => {
                assert!(o.q);
                assert_eq!(&o.x_final, xr);
                let obs = o.test_value - s.problem.lofi(&o.x_ini, s.u_cons());
                let cal = s.model.condition_on(&joint(&o.x_ini, s.u_cons()), obs).unwrap();
                let (m, sd) = corrected_margin(&cal, &s.problem, xr, s.u_cons());
                assert!(m - k.k_re * sd >= -1e-6 * scale);
            }
            None => {
                assert!(!o.q);
                assert_eq!(o.x_final, o.x_ini);
                assert_eq!(o.f_final, o.f_ini);
                assert_eq!(o.margin_final, o.test_value);
            }
        }
        let (m, sd) = corrected_margin(&s.model, &s.problem, &o.x_ini, s.u_cons());
        assert!(((o.test_value - m) / sd - o.z_ini).abs() <= 1e-10);
        kinds[o.redesign_kind as usize] += 1;

        let mut again = ErrorTrajectory::new(&s.model, seed);
        assert_eq!(run_cycle(&s.model, &mut again, &s.problem, s.u_cons(), &k, &x, &opts).unwrap(), o);
    }
    assert!(kinds[1] > 0, "no safety redesigns in the sample");
}

#[test]
fn loops_never_touch_high_fidelity() {
    let s = Setup::toy();
    let k = MarginVector::new(1.0, 1.0, 1.0, 2.0).unwrap();
    let before = s.problem.hifi_calls();
    let opts = DesignOptions::default();
    let x = initial_design(&s.model, &s.problem, s.u_cons(), k.k_ini, &opts).unwrap();
    for i in 0..50 {
        let mut t = ErrorTrajectory::new(&s.model, i);
        let o = run_cycle(&s.model, &mut t, &s.problem, s.u_cons(), &k, &x, &opts).unwrap();
        pf_realization(&mut t, &s.problem, &o.x_final).unwrap();
    }
    assert_eq!(s.problem.hifi_calls(), before);
}
