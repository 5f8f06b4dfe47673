//! Kriging model of the discrepancy `g_H − g_L` over the joint design-aleatory
//! space, and conditional simulations drawn from it.
//!
//! Inputs are mapped to `[0,1]` per dimension using the training box and
//! outputs are standardized before the kernel is applied; everything crossing
//! the public interface is in physical and limit-state units.
//!
//! With [`TrendMode::Estimated`] (ordinary kriging) the constant trend is
//! integrated out under a flat prior, so the predictive variance includes the
//! trend uncertainty. [`TrendMode::Known`] treats the GLS estimate as exact.
//! Trajectories sample the same posterior the model predicts.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{latin_hypercube, nelder_mead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    SquaredExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMode {
    /// Ordinary kriging: the trend is estimated and its uncertainty propagated.
    #[default]
    Estimated,
    /// Simple kriging around the GLS trend estimate.
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub kernel: Kernel,
    pub trend: TrendMode,
    /// Multi-start count for the likelihood search.
    pub starts: usize,
    /// Length-scale box, in units of the normalized input range.
    pub length_scale_bounds: [f64; 2],
    /// Diagonal jitter relative to the process variance.
    pub nugget: f64,
    pub max_nugget: f64,
    pub max_evals_per_start: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            kernel: Kernel::SquaredExponential,
            trend: TrendMode::Estimated,
            starts: 8,
            length_scale_bounds: [1e-2, 1e2],
            nugget: 1e-10,
            max_nugget: 1e-6,
            max_evals_per_start: 2000,
            seed: 0,
        }
    }
}

/// Kernel parameters in the model's internal units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Per-dimension length-scales on the normalized inputs.
    pub length_scales: Vec<f64>,
    /// Process variance of the standardized output.
    pub process_variance: f64,
    /// Constant trend of the standardized output. Re-estimated from the data
    /// in [`TrendMode::Estimated`].
    pub trend: f64,
    pub nugget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub neg_log_likelihood: f64,
    pub starts: usize,
    pub evaluations: usize,
    /// How many times the jitter had to grow for the final factorization.
    pub nugget_escalations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub sd: f64,
}

/// Everything needed to rebuild a model; this is what gets written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    kernel: Kernel,
    trend_mode: TrendMode,
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    input_lower: Vec<f64>,
    input_range: Vec<f64>,
    output_mean: f64,
    output_scale: f64,
    hyperparameters: Hyperparameters,
    fit: Option<FitDiagnostics>,
}

const FORMAT: &str = "kriging-discrepancy-model/1";

/// Cholesky factor and the solves that depend only on the training data.
#[derive(Debug, Clone)]
struct Factor {
    xn: Vec<Vec<f64>>,
    chol: DMatrix<f64>,
    /// R⁻¹(y − μ1)
    alpha: DVector<f64>,
    /// L⁻¹1
    w_one: DVector<f64>,
    /// 1ᵀR⁻¹1
    gamma: f64,
    trend: f64,
    nugget: f64,
    escalations: usize,
}

#[derive(Debug, Clone)]
pub struct ErrorModel {
    file: ModelFile,
    factor: Factor,
}

impl Serialize for ErrorModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.file.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ErrorModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = ModelFile::deserialize(d)?;
        ErrorModel::from_file(file).map_err(serde::de::Error::custom)
    }
}

fn correlation(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / ls[i];
        s += d * d;
    }
    (-0.5 * s).exp()
}

fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("cholesky factor has a positive diagonal")
}

/// Factor `R + nugget·I`, growing the nugget tenfold on failure.
fn factorize(
    xn: &[Vec<f64>],
    ls: &[f64],
    nugget: f64,
    max_nugget: f64,
) -> Option<(DMatrix<f64>, f64, usize)> {
    let n = xn.len();
    let r = DMatrix::from_fn(n, n, |i, j| correlation(&xn[i], &xn[j], ls));
    let mut nug = nugget;
    let mut escalations = 0;
    loop {
        let mut m = r.clone();
        for i in 0..n {
            m[(i, i)] += nug;
        }
        if let Some(c) = m.cholesky() {
            return Some((c.unpack(), nug, escalations));
        }
        nug *= 10.0;
        escalations += 1;
        if nug > max_nugget * (1.0 + 1e-9) {
            return None;
        }
    }
}

/// Profile negative log-likelihood with the trend and variance concentrated out.
fn profile_nll(xn: &[Vec<f64>], y: &DVector<f64>, ls: &[f64], cfg: &GpConfig) -> f64 {
    let Some((l, _, _)) = factorize(xn, ls, cfg.nugget, cfg.max_nugget) else {
        return f64::INFINITY;
    };
    let n = y.len();
    let w1 = forward_solve(&l, &DVector::from_element(n, 1.0));
    let wy = forward_solve(&l, y);
    let mu = w1.dot(&wy) / w1.dot(&w1);
    let resid = &wy - &w1 * mu;
    let s2 = resid.dot(&resid) / n as f64;
    let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    0.5 * n as f64 * s2.max(1e-300).ln() + logdet
}

fn validate_point(p: &[f64], dim: usize) -> Result<()> {
    if p.len() != dim {
        return Err(Error::input(format!("point has {} coordinates, model has {dim}", p.len())));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("point has a non-finite coordinate"));
    }
    Ok(())
}

impl ErrorModel {
    /// Fit by maximizing the profile likelihood over the length-scales.
    pub fn fit(points: &[Vec<f64>], values: &[f64], cfg: &GpConfig) -> Result<Self> {
        let (points, values) = dedupe(points, values)?;
        if points.len() < 2 {
            return Err(Error::input("need at least two distinct training points"));
        }
        let dim = points[0].len();
        let (lower, range) = input_box(&points);
        let (ym, ys) = output_scaling(&values);
        let xn: Vec<Vec<f64>> = points.iter().map(|p| normalize(p, &lower, &range)).collect();
        let y = DVector::from_iterator(values.len(), values.iter().map(|v| (v - ym) / ys));

        let [lb, ub] = cfg.length_scale_bounds;
        if !(lb > 0.0 && lb < ub) {
            return Err(Error::Config(format!("length-scale bounds [{lb}, {ub}] are invalid")));
        }
        let (llo, lhi) = (lb.ln(), ub.ln());
        let lo = vec![llo; dim];
        let hi = vec![lhi; dim];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let starts = latin_hypercube(cfg.starts.max(1), dim, &mut rng);
        let opts = nelder_mead::NelderMeadOptions {
            max_evals: cfg.max_evals_per_start,
            f_tol: 1e-12,
            x_tol: 1e-9,
            initial_step: 0.1,
        };
        let mut best: Option<nelder_mead::NelderMeadResult> = None;
        let mut evaluations = 0;
        for s in &starts {
            let x0: Vec<f64> = s.iter().map(|t| llo + t * (lhi - llo)).collect();
            let r = nelder_mead::minimize(
                |theta| {
                    let ls: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
                    profile_nll(&xn, &y, &ls, cfg)
                },
                &x0,
                &lo,
                &hi,
                &opts,
            );
            evaluations += r.evals;
            if best.as_ref().is_none_or(|b| r.f < b.f) {
                best = Some(r);
            }
        }
        let best = best.expect("at least one start");
        if !best.f.is_finite() {
            return Err(Error::Fit("no length-scales in the search box give a positive definite covariance".into()));
        }
        let ls: Vec<f64> = best.x.iter().map(|t| t.exp()).collect();

        let (l, nugget, escalations) = factorize(&xn, &ls, cfg.nugget, cfg.max_nugget)
            .ok_or_else(|| Error::Fit("covariance singular after maximum jitter".into()))?;
        let n = y.len();
        let w1 = forward_solve(&l, &DVector::from_element(n, 1.0));
        let wy = forward_solve(&l, &y);
        let mu = w1.dot(&wy) / w1.dot(&w1);
        let resid = &wy - &w1 * mu;
        // constant data leaves no variance to estimate; keep it strictly positive
        let s2 = (resid.dot(&resid) / n as f64).max(1e-12);

        let file = ModelFile {
            format: FORMAT.into(),
            kernel: cfg.kernel,
            trend_mode: cfg.trend,
            points,
            values,
            input_lower: lower,
            input_range: range,
            output_mean: ym,
            output_scale: ys,
            hyperparameters: Hyperparameters { length_scales: ls, process_variance: s2, trend: mu, nugget },
            fit: Some(FitDiagnostics {
                neg_log_likelihood: best.f,
                starts: starts.len(),
                evaluations,
                nugget_escalations: escalations,
                seed: cfg.seed,
            }),
        };
        ErrorModel::from_file(file)
    }

    /// Build a model with given hyperparameters, skipping the likelihood search.
    pub fn with_hyperparameters(
        points: &[Vec<f64>],
        values: &[f64],
        hyper: Hyperparameters,
        trend_mode: TrendMode,
    ) -> Result<Self> {
        let (points, values) = dedupe(points, values)?;
        if points.is_empty() {
            return Err(Error::input("need at least one training point"));
        }
        let (lower, range) = input_box(&points);
        let (ym, ys) = output_scaling(&values);
        ErrorModel::from_file(ModelFile {
            format: FORMAT.into(),
            kernel: Kernel::SquaredExponential,
            trend_mode,
            points,
            values,
            input_lower: lower,
            input_range: range,
            output_mean: ym,
            output_scale: ys,
            hyperparameters: hyper,
            fit: None,
        })
    }

    /// A model with no epistemic uncertainty: the discrepancy is `value`
    /// everywhere.
    pub fn certain(dim: usize, value: f64) -> Self {
        let file = ModelFile {
            format: FORMAT.into(),
            kernel: Kernel::SquaredExponential,
            trend_mode: TrendMode::Known,
            points: Vec::new(),
            values: Vec::new(),
            input_lower: vec![0.0; dim],
            input_range: vec![1.0; dim],
            output_mean: value,
            output_scale: 1.0,
            hyperparameters: Hyperparameters {
                length_scales: vec![1.0; dim],
                process_variance: 0.0,
                trend: 0.0,
                nugget: 0.0,
            },
            fit: None,
        };
        ErrorModel::from_file(file).expect("empty model always builds")
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != FORMAT {
            return Err(Error::input(format!("unknown model format '{}'", file.format)));
        }
        let dim = file.input_lower.len();
        let h = &file.hyperparameters;
        if file.input_range.len() != dim || h.length_scales.len() != dim {
            return Err(Error::input("model dimensions are inconsistent"));
        }
        if file.points.len() != file.values.len() {
            return Err(Error::input("points and values differ in length"));
        }
        for p in &file.points {
            validate_point(p, dim)?;
        }
        if file.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("training value is not finite"));
        }
        if h.length_scales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::input("length-scales must be positive and finite"));
        }
        if !(h.process_variance >= 0.0 && h.process_variance.is_finite()) {
            return Err(Error::input("process variance must be nonnegative"));
        }
        if !file.points.is_empty() && h.process_variance <= 0.0 {
            return Err(Error::input("process variance must be positive for a model with data"));
        }
        if !(file.output_scale > 0.0) || file.input_range.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::input("scaling factors must be positive"));
        }
        let xn: Vec<Vec<f64>> = file.points.iter().map(|p| normalize(p, &file.input_lower, &file.input_range)).collect();
        let n = xn.len();
        let factor = if n == 0 {
            Factor {
                xn,
                chol: DMatrix::zeros(0, 0),
                alpha: DVector::zeros(0),
                w_one: DVector::zeros(0),
                gamma: 0.0,
                trend: h.trend,
                nugget: h.nugget,
                escalations: 0,
            }
        } else {
            let (l, nugget, escalations) = factorize(&xn, &h.length_scales, h.nugget, h.nugget.max(1e-6))
                .ok_or_else(|| Error::Fit("covariance singular after maximum jitter".into()))?;
            let y = DVector::from_iterator(
                n,
                file.values.iter().map(|v| (v - file.output_mean) / file.output_scale),
            );
            let w1 = forward_solve(&l, &DVector::from_element(n, 1.0));
            let wy = forward_solve(&l, &y);
            let gamma = w1.dot(&w1);
            let trend = match file.trend_mode {
                TrendMode::Estimated => w1.dot(&wy) / gamma,
                TrendMode::Known => h.trend,
            };
            let resid = &wy - &w1 * trend;
            let alpha = l.transpose().solve_upper_triangular(&resid).expect("positive diagonal");
            Factor { xn, chol: l, alpha, w_one: w1, gamma, trend, nugget, escalations }
        };
        let mut file = file;
        file.hyperparameters.trend = factor.trend;
        file.hyperparameters.nugget = factor.nugget;
        Ok(ErrorModel { file, factor })
    }

    pub fn dim(&self) -> usize {
        self.file.input_lower.len()
    }

    pub fn len(&self) -> usize {
        self.file.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.file.points
    }

    pub fn values(&self) -> &[f64] {
        &self.file.values
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.file.hyperparameters
    }

    pub fn trend_mode(&self) -> TrendMode {
        self.file.trend_mode
    }

    pub fn fit_diagnostics(&self) -> Option<&FitDiagnostics> {
        self.file.fit.as_ref()
    }

    /// Nugget escalations needed when the factor was last built.
    pub fn nugget_escalations(&self) -> usize {
        self.factor.escalations
    }

    /// Length-scales in physical input units.
    pub fn length_scales(&self) -> Vec<f64> {
        self.file.hyperparameters.length_scales.iter().zip(&self.file.input_range).map(|(l, r)| l * r).collect()
    }

    /// Process variance in squared limit-state units.
    pub fn process_variance(&self) -> f64 {
        self.file.hyperparameters.process_variance * self.file.output_scale.powi(2)
    }

    /// Constant trend in limit-state units.
    pub fn trend(&self) -> f64 {
        self.file.output_mean + self.file.output_scale * self.factor.trend
    }

    /// True when the model carries no epistemic uncertainty.
    pub fn is_certain(&self) -> bool {
        self.file.hyperparameters.process_variance == 0.0
    }

    fn training_index(&self, p: &[f64]) -> Option<usize> {
        self.file.points.iter().position(|q| q.as_slice() == p)
    }

    /// Posterior quantities at one point in internal units: the standardized
    /// mean, `L⁻¹r`, and the trend-weight `1 − 1ᵀR⁻¹r`.
    fn local(&self, xn: &[f64]) -> (f64, DVector<f64>, f64) {
        let f = &self.factor;
        let n = f.xn.len();
        if n == 0 {
            return (f.trend, DVector::zeros(0), 1.0);
        }
        let ls = &self.file.hyperparameters.length_scales;
        let r = DVector::from_iterator(n, f.xn.iter().map(|t| correlation(xn, t, ls)));
        let mean = f.trend + r.dot(&f.alpha);
        let v = forward_solve(&f.chol, &r);
        let a = 1.0 - f.w_one.dot(&v);
        (mean, v, a)
    }

    /// Posterior correlation between two points, given their local quantities.
    fn posterior_corr(&self, xa: &[f64], va: &DVector<f64>, aa: f64, xb: &[f64], vb: &DVector<f64>, ab: f64) -> f64 {
        let ls = &self.file.hyperparameters.length_scales;
        let mut c = correlation(xa, xb, ls) - va.dot(vb);
        if self.file.trend_mode == TrendMode::Estimated && self.factor.gamma > 0.0 {
            c += aa * ab / self.factor.gamma;
        }
        c
    }

    pub fn predict(&self, point: &[f64]) -> Result<Prediction> {
        validate_point(point, self.dim())?;
        Ok(self.predict_unchecked(point))
    }

    pub(crate) fn predict_unchecked(&self, point: &[f64]) -> Prediction {
        if let Some(i) = self.training_index(point) {
            return Prediction { mean: self.file.values[i], sd: 0.0 };
        }
        let xn = normalize(point, &self.file.input_lower, &self.file.input_range);
        let (m, v, a) = self.local(&xn);
        let var = self.posterior_corr(&xn, &v, a, &xn, &v, a).max(0.0);
        let s2 = self.file.hyperparameters.process_variance;
        Prediction {
            mean: self.file.output_mean + self.file.output_scale * m,
            sd: self.file.output_scale * (s2 * var).sqrt(),
        }
    }

    /// Posterior mean only; linear in the training size.
    pub(crate) fn predict_mean_unchecked(&self, point: &[f64]) -> f64 {
        if let Some(i) = self.training_index(point) {
            return self.file.values[i];
        }
        let xn = normalize(point, &self.file.input_lower, &self.file.input_range);
        let f = &self.factor;
        let ls = &self.file.hyperparameters.length_scales;
        let m = f.trend + f.xn.iter().zip(f.alpha.iter()).map(|(t, a)| correlation(&xn, t, ls) * a).sum::<f64>();
        self.file.output_mean + self.file.output_scale * m
    }

    /// Joint predictive mean and covariance at several points.
    pub fn predict_joint(&self, points: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        for p in points {
            validate_point(p, self.dim())?;
        }
        let locals: Vec<_> = points
            .iter()
            .map(|p| {
                let xn = normalize(p, &self.file.input_lower, &self.file.input_range);
                let (m, v, a) = self.local(&xn);
                (xn, m, v, a, self.training_index(p).is_some())
            })
            .collect();
        let ys = self.file.output_scale;
        let scale = ys * ys * self.file.hyperparameters.process_variance;
        let k = points.len();
        let mut cov = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let (xa, _, va, aa, ta) = &locals[i];
                let (xb, _, vb, ab, tb) = &locals[j];
                let c = if *ta || *tb { 0.0 } else { scale * self.posterior_corr(xa, va, *aa, xb, vb, *ab) };
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let means = points
            .iter()
            .zip(&locals)
            .map(|(p, (_, m, ..))| match self.training_index(p) {
                Some(i) => self.file.values[i],
                None => self.file.output_mean + ys * m,
            })
            .collect();
        Ok((means, cov))
    }

    /// Add one observation without re-estimating the hyperparameters.
    pub fn condition_on(&self, point: &[f64], observed: f64) -> Result<Self> {
        validate_point(point, self.dim())?;
        if !observed.is_finite() {
            return Err(Error::input("observation is not finite"));
        }
        if let Some(i) = self.training_index(point) {
            let v = self.file.values[i];
            if (v - observed).abs() <= duplicate_tol(v, self.file.output_scale) {
                return Ok(self.clone());
            }
            return Err(Error::input(format!(
                "point duplicates a training point with value {v:e}, observed {observed:e}"
            )));
        }
        if self.is_certain() {
            let p = self.predict_unchecked(point);
            if (p.mean - observed).abs() <= duplicate_tol(p.mean, self.file.output_scale) {
                return Ok(self.clone());
            }
            return Err(Error::input("cannot condition a certain model on a conflicting observation"));
        }
        let mut file = self.file.clone();
        file.points.push(point.to_vec());
        file.values.push(observed);
        file.fit = None;
        ErrorModel::from_file(file)
    }

    /// Conditions on several observations with a single refactorization.
    /// Points that repeat training data are checked like `condition_on` and
    /// then skipped.
    pub fn condition_on_many(&self, points: &[Vec<f64>], observed: &[f64]) -> Result<Self> {
        if points.len() != observed.len() {
            return Err(Error::input(format!("{} points but {} observations", points.len(), observed.len())));
        }
        let mut fresh = Vec::new();
        for (p, &v) in points.iter().zip(observed) {
            validate_point(p, self.dim())?;
            if !v.is_finite() {
                return Err(Error::input("observation is not finite"));
            }
            match self.training_index(p) {
                Some(i) => {
                    let t = self.file.values[i];
                    if (t - v).abs() > duplicate_tol(t, self.file.output_scale) {
                        return Err(Error::input(format!(
                            "point duplicates a training point with value {t:e}, observed {v:e}"
                        )));
                    }
                }
                None => fresh.push((p, v)),
            }
        }
        if fresh.is_empty() {
            return Ok(self.clone());
        }
        if self.is_certain() {
            return Err(Error::input("cannot condition a certain model on new observations"));
        }
        let mut file = self.file.clone();
        for (p, v) in fresh {
            file.points.push(p.clone());
            file.values.push(v);
        }
        file.fit = None;
        ErrorModel::from_file(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        ErrorModel::from_file(file)
    }
}

fn duplicate_tol(v: f64, scale: f64) -> f64 {
    1e-9 * (v.abs() + scale)
}

fn normalize(p: &[f64], lower: &[f64], range: &[f64]) -> Vec<f64> {
    p.iter().zip(lower).zip(range).map(|((x, l), r)| (x - l) / r).collect()
}

fn input_box(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = points[0].len();
    let mut lower = vec![f64::INFINITY; dim];
    let mut upper = vec![f64::NEG_INFINITY; dim];
    for p in points {
        for i in 0..dim {
            lower[i] = lower[i].min(p[i]);
            upper[i] = upper[i].max(p[i]);
        }
    }
    let range = lower.iter().zip(&upper).map(|(l, u)| if u > l { u - l } else { 1.0 }).collect();
    (lower, range)
}

fn output_scaling(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    // constant data: fall back to the magnitude of the level itself
    let scale = if sd > 1e-300 { sd } else if mean.abs() > 0.0 { mean.abs() } else { 1.0 };
    (mean, scale)
}

/// Validate and merge exact duplicates; conflicting duplicates are an error.
fn dedupe(points: &[Vec<f64>], values: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if points.len() != values.len() {
        return Err(Error::input(format!("{} points but {} values", points.len(), values.len())));
    }
    if points.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::input("points have no coordinates"));
    }
    let spread = {
        let (_, s) = output_scaling(values);
        s
    };
    let mut out_p: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    let mut out_v: Vec<f64> = Vec::with_capacity(points.len());
    for (p, &v) in points.iter().zip(values) {
        validate_point(p, dim)?;
        if !v.is_finite() {
            return Err(Error::input("training value is not finite"));
        }
        if let Some(i) = out_p.iter().position(|q| q == p) {
            if (out_v[i] - v).abs() > duplicate_tol(v, spread) {
                return Err(Error::input(format!("duplicate point {p:?} has conflicting values")));
            }
            continue;
        }
        out_p.push(p.clone());
        out_v.push(v);
    }
    Ok((out_p, out_v))
}

/// One conditional simulation of the discrepancy, evaluated lazily.
///
/// Each new query is drawn from the model posterior conditioned on every value
/// this trajectory has already produced, then cached. Queries whose
/// conditional variance is negligible take the conditional mean and are not
/// added to the conditioning set, which keeps finite-difference stencils
/// around a sampled point smooth.
#[derive(Debug, Clone)]
pub struct ErrorTrajectory<'a> {
    model: &'a ErrorModel,
    seed: u64,
    rng: ChaCha8Rng,
    cache: Vec<(Vec<f64>, f64)>,
    index: HashMap<Vec<u64>, usize>,
    accepted: Vec<Accepted>,
    /// Packed lower-triangular factor of the posterior correlation among
    /// accepted points, row by row.
    chol: Vec<f64>,
    /// chol⁻¹ applied to the accepted standardized residuals.
    resid: Vec<f64>,
    clamped: usize,
    resolved: usize,
}

#[derive(Debug, Clone)]
struct Accepted {
    xn: Vec<f64>,
    v: DVector<f64>,
    a: f64,
}

/// Conditional variances below this fraction of the process variance are
/// treated as zero.
const RESOLVED_VARIANCE: f64 = 1e-8;
/// More negative than this counts as a numerical clamp.
const CLAMP_TOLERANCE: f64 = 1e-6;

impl<'a> ErrorTrajectory<'a> {
    pub fn new(model: &'a ErrorModel, seed: u64) -> Self {
        ErrorTrajectory {
            model,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: Vec::new(),
            index: HashMap::new(),
            accepted: Vec::new(),
            chol: Vec::new(),
            resid: Vec::new(),
            clamped: 0,
            resolved: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model(&self) -> &'a ErrorModel {
        self.model
    }

    /// Every (point, value) pair produced so far, in query order.
    pub fn cache(&self) -> &[(Vec<f64>, f64)] {
        &self.cache
    }

    /// Queries whose conditional variance came out below `−1e-6` relative and
    /// was clamped to zero.
    pub fn clamped_variances(&self) -> usize {
        self.clamped
    }

    /// Queries answered by the conditional mean alone.
    pub fn resolved_queries(&self) -> usize {
        self.resolved
    }

    /// Discrepancy value at a joint point.
    pub fn value(&mut self, point: &[f64]) -> Result<f64> {
        validate_point(point, self.model.dim())?;
        Ok(self.value_unchecked(point))
    }

    /// Discrepancy value at `(x, u)`.
    pub fn eval(&mut self, x: &[f64], u: &[f64]) -> f64 {
        let mut p = Vec::with_capacity(x.len() + u.len());
        p.extend_from_slice(x);
        p.extend_from_slice(u);
        debug_assert_eq!(p.len(), self.model.dim());
        self.value_unchecked(&p)
    }

    pub(crate) fn value_unchecked(&mut self, point: &[f64]) -> f64 {
        let key: Vec<u64> = point.iter().map(|v| (v + 0.0).to_bits()).collect();
        if let Some(&i) = self.index.get(&key) {
            return self.cache[i].1;
        }
        // one draw per new point keeps the stream aligned across query kinds
        let xi: f64 = StandardNormal.sample(&mut self.rng);
        let value = self.draw(point, xi);
        self.index.insert(key, self.cache.len());
        self.cache.push((point.to_vec(), value));
        value
    }

    fn draw(&mut self, point: &[f64], xi: f64) -> f64 {
        let m = self.model;
        if let Some(i) = m.training_index(point) {
            return m.file.values[i];
        }
        let xn = normalize(point, &m.file.input_lower, &m.file.input_range);
        let (mean0, v, a) = m.local(&xn);
        let s = m.file.hyperparameters.process_variance.sqrt();
        let to_units = |z: f64| m.file.output_mean + m.file.output_scale * (mean0 + s * z);
        if s == 0.0 {
            return to_units(0.0);
        }

        let k = self.accepted.len();
        let mut l = vec![0.0; k];
        for j in 0..k {
            let acc = &self.accepted[j];
            let mut c = m.posterior_corr(&xn, &v, a, &acc.xn, &acc.v, acc.a);
            let row = j * (j + 1) / 2;
            for (t, lt) in l.iter().enumerate().take(j) {
                c -= self.chol[row + t] * lt;
            }
            l[j] = c / self.chol[row + j];
        }
        let cmean: f64 = l.iter().zip(&self.resid).map(|(a, b)| a * b).sum();
        let var = m.posterior_corr(&xn, &v, a, &xn, &v, a) - l.iter().map(|t| t * t).sum::<f64>();

        if var > RESOLVED_VARIANCE {
            let d = var.sqrt();
            self.chol.extend_from_slice(&l);
            self.chol.push(d);
            self.resid.push(xi);
            self.accepted.push(Accepted { xn, v, a });
            to_units(cmean + d * xi)
        } else {
            if var < -CLAMP_TOLERANCE {
                self.clamped += 1;
            }
            self.resolved += 1;
            to_units(cmean)
        }
    }
}

/// Shorthand for [`ErrorTrajectory::new`].
pub fn sample_trajectory(model: &ErrorModel, seed: u64) -> ErrorTrajectory<'_> {
    ErrorTrajectory::new(model, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(mode: TrendMode) -> ErrorModel {
        ErrorModel::with_hyperparameters(
            &[vec![0.0], vec![1.0]],
            &[1.0, 3.0],
            Hyperparameters { length_scales: vec![0.5], process_variance: 2.0, trend: 0.0, nugget: 1e-10 },
            mode,
        )
        .unwrap()
    }

    #[test]
    fn two_point_kriging_matches_hand_solution() {
        // values standardize to ∓1; ρ = exp(−½(1/0.5)²) = e⁻²
        let rho = (-2.0_f64).exp();
        let rho_m = (-0.5_f64 * (0.5 / 0.5_f64).powi(2)).exp();
        let det = (1.0 + 1e-10) * (1.0 + 1e-10) - rho * rho;
        let inv = [[(1.0 + 1e-10) / det, -rho / det], [-rho / det, (1.0 + 1e-10) / det]];
        let y = [-1.0, 1.0];
        let r = [rho_m, rho_m];
        let kr = [inv[0][0] * r[0] + inv[0][1] * r[1], inv[1][0] * r[0] + inv[1][1] * r[1]];
        let one_k_one = inv[0][0] + inv[0][1] + inv[1][0] + inv[1][1];
        let one_k_y = (inv[0][0] + inv[1][0]) * y[0] + (inv[0][1] + inv[1][1]) * y[1];
        let mu = one_k_y / one_k_one;
        let mean_s = mu + kr[0] * (y[0] - mu) + kr[1] * (y[1] - mu);
        let rkr = r[0] * kr[0] + r[1] * kr[1];
        let a = 1.0 - kr[0] - kr[1];
        for (mode, var_s) in [
            (TrendMode::Known, 2.0 * (1.0 - rkr)),
            (TrendMode::Estimated, 2.0 * (1.0 - rkr + a * a / one_k_one)),
        ] {
            let m = two_point(mode);
            let p = m.predict(&[0.5]).unwrap();
            assert!((p.mean - (2.0 + mean_s)).abs() < 1e-12, "{mode:?} {p:?}");
            assert!((p.sd - var_s.sqrt()).abs() < 1e-12, "{mode:?} {p:?}");
        }
    }

    #[test]
    fn interpolates_training_points() {
        for mode in [TrendMode::Known, TrendMode::Estimated] {
            let m = two_point(mode);
            let p = m.predict(&[1.0]).unwrap();
            assert_eq!(p.mean, 3.0);
            assert_eq!(p.sd, 0.0);
            // an infinitesimally perturbed query is still nugget-accurate
            let q = m.predict(&[1.0 + 1e-12]).unwrap();
            assert!((q.mean - 3.0).abs() < 1e-8 && q.sd < 1e-4);
        }
    }

    #[test]
    fn identical_values_predict_that_value() {
        let m = ErrorModel::fit(&[vec![0.0, 0.0], vec![1.0, 2.0]], &[0.25, 0.25], &GpConfig::default()).unwrap();
        assert!((m.predict(&[0.0, 0.0]).unwrap().mean - 0.25).abs() < 1e-15);
        assert!((m.predict(&[1.0, 2.0]).unwrap().mean - 0.25).abs() < 1e-15);
        assert!(m.process_variance() > 0.0);
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let m = two_point(TrendMode::Known);
        let p = m.predict(&[40.0]).unwrap();
        assert!((p.mean - m.trend()).abs() < 1e-12);
        assert!((p.sd - m.process_variance().sqrt()).abs() < 1e-12);
        // with an estimated trend the far-field variance also carries the
        // trend uncertainty s²/(1ᵀR⁻¹1)
        let e = two_point(TrendMode::Estimated);
        let p = e.predict(&[40.0]).unwrap();
        let rho = (-2.0_f64).exp();
        let gamma = 2.0 / (1.0 + 1e-10 + rho);
        assert!((p.sd - (e.process_variance() * (1.0 + 1.0 / gamma)).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = GpConfig::default();
        assert!(ErrorModel::fit(&[vec![0.0]], &[1.0], &cfg).is_err());
        assert!(ErrorModel::fit(&[vec![0.0], vec![0.0]], &[1.0, 2.0], &cfg).is_err());
        assert!(ErrorModel::fit(&[vec![0.0], vec![f64::NAN]], &[1.0, 2.0], &cfg).is_err());
        assert!(ErrorModel::fit(&[vec![0.0], vec![1.0, 2.0]], &[1.0, 2.0], &cfg).is_err());
        let m = two_point(TrendMode::Estimated);
        assert!(m.predict(&[0.0, 1.0]).is_err());
        assert!(m.condition_on(&[0.0], 5.0).is_err());
        assert!(m.condition_on(&[0.0], 1.0).is_ok());
    }

    #[test]
    fn conditioning_pins_the_new_point() {
        let m = two_point(TrendMode::Estimated);
        let prior = m.predict(&[0.3]).unwrap();
        let c = m.condition_on(&[0.3], prior.mean).unwrap();
        let post = c.predict(&[0.3]).unwrap();
        assert_eq!(post.mean, prior.mean);
        assert_eq!(post.sd, 0.0);
        assert!((c.predict(&[0.31]).unwrap().mean - m.predict(&[0.31]).unwrap().mean).abs() < 1e-6);
        assert_eq!(c.hyperparameters().length_scales, m.hyperparameters().length_scales);
    }

    #[test]
    fn certain_model() {
        let m = ErrorModel::certain(3, 0.5);
        let p = m.predict(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((p.mean, p.sd), (0.5, 0.0));
        let mut t = sample_trajectory(&m, 9);
        assert_eq!(t.value(&[4.0, 5.0, 6.0]).unwrap(), 0.5);
        assert!(m.is_certain());
    }

    #[test]
    fn trajectory_replays_and_hits_data() {
        let m = two_point(TrendMode::Estimated);
        let mut t = sample_trajectory(&m, 5);
        let a = t.value(&[0.4]).unwrap();
        let _ = t.value(&[0.7]).unwrap();
        assert_eq!(t.value(&[0.4]).unwrap(), a);
        assert_eq!(t.value(&[0.0]).unwrap(), 1.0);
        let mut u = sample_trajectory(&m, 5);
        assert_eq!(u.value(&[0.4]).unwrap(), a);
        assert_eq!(t.cache().len(), 3);
    }

    #[test]
    fn close_queries_are_smooth() {
        let m = two_point(TrendMode::Estimated);
        let mut t = sample_trajectory(&m, 1);
        let base = t.value(&[0.4]).unwrap();
        let near = t.value(&[0.4 + 1e-7]).unwrap();
        assert!((near - base).abs() < 1e-5);
        assert_eq!(t.resolved_queries(), 1);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.37, (i * i) as f64 * 0.11]).collect();
        let vals: Vec<f64> = pts.iter().map(|p| (3.0 * p[0]).sin() + 0.2 * p[1]).collect();
        let m = ErrorModel::fit(&pts, &vals, &GpConfig::default()).unwrap();
        let text = m.to_json().unwrap();
        let back = ErrorModel::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        for q in [[0.2, 0.1], [1.1, 2.0], [5.0, -1.0]] {
            let a = m.predict(&q).unwrap();
            let b = back.predict(&q).unwrap();
            assert_eq!(a.mean.to_bits(), b.mean.to_bits());
            assert_eq!(a.sd.to_bits(), b.sd.to_bits());
        }
    }
}
