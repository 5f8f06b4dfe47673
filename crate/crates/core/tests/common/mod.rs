#![allow(dead_code)]

use std::sync::OnceLock;

use redesign_core::config::RunConfig;
use redesign_core::gp::ErrorModel;
use redesign_core::problems::DesignProblem;
use redesign_core::rbdo::ConservativeValues;

/// Fitted model and conservative values for a shipped configuration.
pub struct Setup {
    pub cfg: RunConfig,
    pub problem: DesignProblem,
    pub model: ErrorModel,
    pub cons: ConservativeValues,
}

impl Setup {
    pub fn from_config(cfg: RunConfig) -> Setup {
        let problem = cfg.problem().unwrap();
        let model = cfg.fit_model(&problem).unwrap();
        let cons = cfg.conservative.compute(&problem, Some(&model)).unwrap();
        Setup { cfg, problem, model, cons }
    }

    /// Shared across the tests of one binary.
    pub fn beam() -> &'static Setup {
        static BEAM: OnceLock<Setup> = OnceLock::new();
        BEAM.get_or_init(|| Setup::from_config(RunConfig::beam()))
    }

    pub fn toy() -> &'static Setup {
        static TOY: OnceLock<Setup> = OnceLock::new();
        TOY.get_or_init(|| Setup::from_config(RunConfig::toy()))
    }

    pub fn u_cons(&self) -> &[f64] {
        &self.cons.u_cons
    }
}

/// Kolmogorov–Smirnov p-value of a sample against `cdf` (asymptotic
/// distribution with the Stephens correction).
pub fn ks_p_value(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Three-sigma binomial check.
pub fn within_binomial(successes: usize, trials: usize, p: f64, sigmas: f64) -> bool {
    let n = trials as f64;
    (successes as f64 / n - p).abs() <= sigmas * (p * (1.0 - p) / n).sqrt()
}
