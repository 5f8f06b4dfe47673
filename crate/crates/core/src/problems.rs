//! Design problems: the cantilever beam and a one-dimensional analytic toy.
//!
//! A [`DesignProblem`] pairs bounds, aleatory distributions and targets with a
//! [`ProblemModel`] that supplies the objective and the two fidelity levels of
//! the limit state. The high-fidelity limit state is only reachable through a
//! counter so callers can check it is never used inside the design loops.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reliability::AleatoryDistribution;

pub trait ProblemModel: Send + Sync {
    fn objective(&self, x: &[f64], u: &[f64]) -> f64;
    fn lofi(&self, x: &[f64], u: &[f64]) -> f64;
    fn hifi(&self, x: &[f64], u: &[f64]) -> f64;
}

/// `c(x) = upper − aᵀx ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConstraint {
    pub coefficients: Vec<f64>,
    pub upper: f64,
}

impl LinearConstraint {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.upper - self.coefficients.iter().zip(x).map(|(a, x)| a * x).sum::<f64>()
    }
}

#[derive(Clone)]
pub struct DesignProblem {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub aleatory: Vec<AleatoryDistribution>,
    pub target_pf: f64,
    pub alpha: f64,
    /// Typical magnitude of the limit state, used to normalize constraints.
    pub limit_state_scale: f64,
    /// When false the objective is evaluated at any aleatory vector without
    /// averaging.
    pub objective_uses_aleatory: bool,
    pub constraints: Vec<LinearConstraint>,
    model: Arc<dyn ProblemModel>,
    hifi_calls: Arc<AtomicU64>,
}

impl fmt::Debug for DesignProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DesignProblem")
            .field("name", &self.name)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("aleatory", &self.aleatory)
            .field("target_pf", &self.target_pf)
            .field("alpha", &self.alpha)
            .finish_non_exhaustive()
    }
}

impl DesignProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        aleatory: Vec<AleatoryDistribution>,
        target_pf: f64,
        alpha: f64,
        limit_state_scale: f64,
        model: Arc<dyn ProblemModel>,
    ) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::input("design bounds must be nonempty and of equal length"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::input(format!("design bound [{l}, {u}] is invalid")));
            }
        }
        for d in &aleatory {
            d.validate()?;
        }
        if !(target_pf > 0.0 && target_pf < 1.0) {
            return Err(Error::input(format!("target failure probability {target_pf} not in (0,1)")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::input(format!("alpha {alpha} not in (0,1]")));
        }
        if !(limit_state_scale > 0.0 && limit_state_scale.is_finite()) {
            return Err(Error::input("limit-state scale must be positive"));
        }
        Ok(DesignProblem {
            name: name.into(),
            lower,
            upper,
            aleatory,
            target_pf,
            alpha,
            limit_state_scale,
            objective_uses_aleatory: false,
            constraints: Vec::new(),
            model,
            hifi_calls: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn with_constraints(mut self, constraints: Vec<LinearConstraint>) -> Result<Self> {
        for c in &constraints {
            if c.coefficients.len() != self.design_dim() {
                return Err(Error::input("constraint coefficient count differs from the design dimension"));
            }
        }
        self.constraints = constraints;
        Ok(self)
    }

    pub fn design_dim(&self) -> usize {
        self.lower.len()
    }

    pub fn aleatory_dim(&self) -> usize {
        self.aleatory.len()
    }

    pub fn aleatory_means(&self) -> Vec<f64> {
        self.aleatory.iter().map(|d| d.mean()).collect()
    }

    /// Reliability index matching the target failure probability.
    pub fn target_beta(&self) -> f64 {
        -crate::stats::norm_ppf(self.target_pf)
    }

    pub fn objective(&self, x: &[f64], u: &[f64]) -> f64 {
        self.model.objective(x, u)
    }

    pub fn lofi(&self, x: &[f64], u: &[f64]) -> f64 {
        self.model.lofi(x, u)
    }

    /// High-fidelity limit state. Every call is counted.
    pub fn hifi(&self, x: &[f64], u: &[f64]) -> f64 {
        self.hifi_calls.fetch_add(1, Ordering::Relaxed);
        self.model.hifi(x, u)
    }

    pub fn hifi_calls(&self) -> u64 {
        self.hifi_calls.load(Ordering::Relaxed)
    }

    /// Deterministic design constraints, each `≥ 0` when satisfied.
    pub fn deterministic_constraints(&self, x: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|c| c.value(x)).collect()
    }

    pub fn check_design(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.design_dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("design {x:?} does not fit the problem")));
        }
        Ok(())
    }
}

/// `Φ(−3)`, the target failure probability of the bundled problems.
pub const PHI_MINUS_THREE: f64 = 1.349_898_031_630_093_3e-3;

/// Constants of the cantilever beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamParameters {
    /// Length, in.
    pub length: f64,
    /// Young's modulus, psi.
    pub elastic_modulus: f64,
    /// Shear modulus, psi.
    pub shear_modulus: f64,
    /// Allowable tip displacement, in.
    pub max_displacement: f64,
    pub width_bounds: [f64; 2],
    pub thickness_bounds: [f64; 2],
    /// Horizontal load, lbs.
    pub load_x: AleatoryDistribution,
    /// Vertical load, lbs.
    pub load_y: AleatoryDistribution,
    pub target_pf: f64,
    pub alpha: f64,
}

impl Default for BeamParameters {
    fn default() -> Self {
        BeamParameters {
            length: 10.0,
            elastic_modulus: 29e6,
            shear_modulus: 11.2e6,
            max_displacement: 2.25e-3,
            width_bounds: [2.5, 5.5],
            thickness_bounds: [1.5, 4.5],
            load_x: AleatoryDistribution::Normal { mean: 500.0, sd: 100.0 },
            load_y: AleatoryDistribution::Normal { mean: 1000.0, sd: 100.0 },
            target_pf: PHI_MINUS_THREE,
            alpha: 0.05,
        }
    }
}

fn positive(x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != 2 || u.len() != 2 {
        return Err(Error::input("beam takes x = (w, t) and u = (F_X, F_Y)"));
    }
    if !(x[0] > 0.0 && x[1] > 0.0) {
        return Err(Error::input(format!("beam dimensions must be positive, got {x:?}")));
    }
    Ok(())
}

impl BeamParameters {
    /// Euler–Bernoulli tip displacement limit state.
    pub fn lofi(&self, x: &[f64], u: &[f64]) -> f64 {
        let (w, t) = (x[0], x[1]);
        let (fx, fy) = (u[0], u[1]);
        let c = 4.0 * self.length.powi(3) / (self.elastic_modulus * w * t);
        self.max_displacement - c * ((fy / (t * t)).powi(2) + (fx / (w * w)).powi(2)).sqrt()
    }

    /// Timoshenko tip displacement limit state: bending plus shear.
    ///
    /// Each bending term uses the second moment about the axis its load bends,
    /// so the bending part is the low-fidelity displacement exactly.
    pub fn hifi(&self, x: &[f64], u: &[f64]) -> f64 {
        let (dx, dy) = self.displacements(x, u);
        self.max_displacement - (dx * dx + dy * dy).sqrt()
    }

    /// Horizontal and vertical tip displacement.
    pub fn displacements(&self, x: &[f64], u: &[f64]) -> (f64, f64) {
        let (w, t) = (x[0], x[1]);
        let (fx, fy) = (u[0], u[1]);
        let l = self.length;
        let shear = 3.0 * l / (2.0 * self.shear_modulus * w * t);
        let bend = 4.0 * l.powi(3) / self.elastic_modulus;
        let dx = shear * fx + bend * fx / (t * w.powi(3));
        let dy = shear * fy + bend * fy / (w * t.powi(3));
        (dx, dy)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x[0] * x[1]
    }
}

pub fn beam_g_lofi(p: &BeamParameters, x: &[f64], u: &[f64]) -> Result<f64> {
    positive(x, u)?;
    Ok(p.lofi(x, u))
}

pub fn beam_g_hifi(p: &BeamParameters, x: &[f64], u: &[f64]) -> Result<f64> {
    positive(x, u)?;
    Ok(p.hifi(x, u))
}

pub fn beam_objective(x: &[f64]) -> Result<f64> {
    if x.len() != 2 || !(x[0] > 0.0 && x[1] > 0.0) {
        return Err(Error::input(format!("beam dimensions must be positive, got {x:?}")));
    }
    Ok(x[0] * x[1])
}

impl ProblemModel for BeamParameters {
    fn objective(&self, x: &[f64], _u: &[f64]) -> f64 {
        BeamParameters::objective(self, x)
    }
    fn lofi(&self, x: &[f64], u: &[f64]) -> f64 {
        BeamParameters::lofi(self, x, u)
    }
    fn hifi(&self, x: &[f64], u: &[f64]) -> f64 {
        BeamParameters::hifi(self, x, u)
    }
}

pub fn beam_problem(p: &BeamParameters) -> Result<DesignProblem> {
    DesignProblem::new(
        "cantilever-beam",
        vec![p.width_bounds[0], p.thickness_bounds[0]],
        vec![p.width_bounds[1], p.thickness_bounds[1]],
        vec![p.load_x, p.load_y],
        p.target_pf,
        p.alpha,
        p.max_displacement,
        Arc::new(p.clone()),
    )
}

/// `g_L = x − u`, `u ~ N(0,1)`, `f = x`; the high-fidelity model adds a smooth
/// discrepancy in `x` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyParameters {
    pub bounds: [f64; 2],
    /// Discrepancy `amplitude · sin(frequency · x) + slope · x`.
    pub amplitude: f64,
    pub frequency: f64,
    pub slope: f64,
    pub target_pf: f64,
    pub alpha: f64,
}

impl Default for ToyParameters {
    fn default() -> Self {
        ToyParameters { bounds: [0.0, 10.0], amplitude: 0.3, frequency: 0.8, slope: 0.05, target_pf: PHI_MINUS_THREE, alpha: 0.05 }
    }
}

impl ToyParameters {
    pub fn discrepancy(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x).sin() + self.slope * x
    }
}

impl ProblemModel for ToyParameters {
    fn objective(&self, x: &[f64], _u: &[f64]) -> f64 {
        x[0]
    }
    fn lofi(&self, x: &[f64], u: &[f64]) -> f64 {
        x[0] - u[0]
    }
    fn hifi(&self, x: &[f64], u: &[f64]) -> f64 {
        x[0] - u[0] + self.discrepancy(x[0])
    }
}

pub fn toy_problem(p: &ToyParameters) -> Result<DesignProblem> {
    DesignProblem::new(
        "linear-toy",
        vec![p.bounds[0]],
        vec![p.bounds[1]],
        vec![AleatoryDistribution::Normal { mean: 0.0, sd: 1.0 }],
        p.target_pf,
        p.alpha,
        1.0,
        Arc::new(p.clone()),
    )
}

/// Design of experiments over the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoeConfig {
    /// Evenly spaced levels per design variable, including both bounds.
    /// Two levels give the bound-box corners.
    pub design_levels: usize,
    /// Aleatory levels at `mean ± offset·sd`.
    pub aleatory_offset: f64,
}

impl Default for DoeConfig {
    fn default() -> Self {
        DoeConfig { design_levels: 2, aleatory_offset: 3.0 }
    }
}

/// Full-factorial DOE with discrepancies `g_H − g_L`. Returns joint points
/// `(x, u)` and discrepancies.
pub fn build_doe(problem: &DesignProblem, cfg: &DoeConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if cfg.design_levels < 2 {
        return Err(Error::Config("design_levels must be at least 2".into()));
    }
    if !(cfg.aleatory_offset > 0.0 && cfg.aleatory_offset.is_finite()) {
        return Err(Error::Config("aleatory_offset must be positive".into()));
    }
    let levels: Vec<Vec<f64>> = problem
        .lower
        .iter()
        .zip(&problem.upper)
        .map(|(l, u)| (0..cfg.design_levels).map(|i| l + (u - l) * i as f64 / (cfg.design_levels - 1) as f64).collect())
        .collect();
    let aleatory: Vec<Vec<f64>> = problem
        .aleatory
        .iter()
        .map(|d| match d {
            AleatoryDistribution::Normal { mean, sd } => Ok(vec![mean - cfg.aleatory_offset * sd, mean + cfg.aleatory_offset * sd]),
            AleatoryDistribution::Uniform { lower, upper } => Ok(vec![*lower, *upper]),
        })
        .collect::<Result<_>>()?;
    let designs = cartesian(&levels);
    let loads = cartesian(&aleatory);
    let mut points = Vec::with_capacity(designs.len() * loads.len());
    let mut values = Vec::with_capacity(points.capacity());
    for x in &designs {
        for u in &loads {
            let e = problem.hifi(x, u) - problem.lofi(x, u);
            if !e.is_finite() {
                return Err(Error::input(format!("discrepancy not finite at x={x:?}, u={u:?}")));
            }
            let mut p = x.clone();
            p.extend_from_slice(u);
            points.push(p);
            values.push(e);
        }
    }
    Ok((points, values))
}

/// The beam's corner DOE: 4 designs × 4 load pairs at `mean ± offset·sd`.
pub fn build_beam_doe(p: &BeamParameters, aleatory_offset: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    build_doe(&beam_problem(p)?, &DoeConfig { design_levels: 2, aleatory_offset })
}

fn cartesian(levels: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for lv in levels {
        let mut next = Vec::with_capacity(out.len() * lv.len());
        for prefix in &out {
            for v in lv {
                let mut p = prefix.clone();
                p.push(*v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beam_lofi_worked_values() {
        let p = BeamParameters::default();
        assert_eq!(beam_g_lofi(&p, &[3.0, 3.0], &[0.0, 0.0]).unwrap(), 2.25e-3);
        // 4·10³/(29e6·3.75) · √((1000/2.25)² + (500/6.25)²)
        let disp = 4000.0 / (29e6 * 3.75) * ((1000.0_f64 / 2.25).powi(2) + (500.0_f64 / 6.25).powi(2)).sqrt();
        let g = beam_g_lofi(&p, &[2.5, 1.5], &[500.0, 1000.0]).unwrap();
        assert!((g - (2.25e-3 - disp)).abs() < 1e-15);
        assert!((disp - 1.661_009_840_993_828e-2).abs() < 1e-12);
        assert!(beam_g_lofi(&p, &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn beam_hifi_vertical_load() {
        let p = BeamParameters::default();
        let (dx, dy) = p.displacements(&[2.5, 1.5], &[0.0, 1000.0]);
        assert_eq!(dx, 0.0);
        let shear = 30.0 * 1000.0 / (2.0 * 11.2e6 * 3.75);
        let bend = 4000.0 * 1000.0 / (29e6 * 2.5 * 3.375);
        assert!((dy - (shear + bend)).abs() < 1e-15);
        assert!((shear - 3.571e-4).abs() < 1e-7);
        assert_eq!(beam_g_hifi(&p, &[3.0, 2.0], &[0.0, 0.0]).unwrap(), 2.25e-3);
    }

    #[test]
    fn stiff_shear_recovers_lofi() {
        let p = BeamParameters { shear_modulus: 11.2e12, ..Default::default() };
        for (x, u) in [([2.5, 1.5], [500.0, 1000.0]), ([5.0, 3.0], [300.0, 1400.0])] {
            let rel = (p.hifi(&x, &u) - p.lofi(&x, &u)).abs() / p.max_displacement;
            assert!(rel < 1e-5, "{rel}");
        }
    }

    #[test]
    fn objective_is_area() {
        assert_eq!(beam_objective(&[2.5, 1.5]).unwrap(), 3.75);
        assert_eq!(beam_objective(&[5.5, 4.5]).unwrap(), 24.75);
        assert_eq!(beam_objective(&[5.0, 1.5]).unwrap(), 2.0 * 3.75);
    }

    #[test]
    fn beam_doe_has_sixteen_distinct_points() {
        let p = BeamParameters::default();
        let prob = beam_problem(&p).unwrap();
        let (pts, vals) = build_doe(&prob, &DoeConfig::default()).unwrap();
        assert_eq!(pts.len(), 16);
        assert_eq!(prob.hifi_calls(), 16);
        assert!(vals.iter().all(|v| v.is_finite() && *v < 0.0));
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(pts[i], pts[j]);
                assert_ne!(vals[i], vals[j]);
            }
        }
        assert_eq!(pts[0], vec![2.5, 1.5, 200.0, 700.0]);
    }

    #[test]
    fn toy_is_linear() {
        let t = ToyParameters::default();
        let prob = toy_problem(&t).unwrap();
        assert_eq!(prob.lofi(&[3.0], &[1.0]), 2.0);
        assert_eq!(prob.objective(&[3.0], &[1.0]), 3.0);
        assert!((prob.hifi(&[3.0], &[1.0]) - 2.0 - t.discrepancy(3.0)).abs() < 1e-15);
        assert!((prob.target_beta() - 3.0).abs() < 1e-12);
    }
}
