//! Aleatory distributions, standard-normal transforms, FORM and a brute-force
//! Monte Carlo reference.
//!
//! Failure is `g < 0`. All aleatory variables are independent, so the
//! standard-normal transform is a componentwise probability integral
//! transform `û = Φ⁻¹(F(u))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{norm_cdf, norm_ppf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AleatoryDistribution {
    Normal { mean: f64, sd: f64 },
    Uniform { lower: f64, upper: f64 },
}

impl AleatoryDistribution {
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        let d = AleatoryDistribution::Normal { mean, sd };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        let d = AleatoryDistribution::Uniform { lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AleatoryDistribution::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd > 0.0) || !sd.is_finite() {
                    return Err(Error::input(format!("normal({mean}, {sd}) needs finite mean, sd > 0")));
                }
            }
            AleatoryDistribution::Uniform { lower, upper } => {
                if !lower.is_finite() || !upper.is_finite() || !(lower < upper) {
                    return Err(Error::input(format!("uniform({lower}, {upper}) needs lower < upper")));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            AleatoryDistribution::Normal { mean, .. } => mean,
            AleatoryDistribution::Uniform { lower, upper } => 0.5 * (lower + upper),
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            AleatoryDistribution::Normal { sd, .. } => sd,
            AleatoryDistribution::Uniform { lower, upper } => (upper - lower) / 12f64.sqrt(),
        }
    }

    pub fn cdf(&self, u: f64) -> f64 {
        match *self {
            AleatoryDistribution::Normal { mean, sd } => norm_cdf((u - mean) / sd),
            AleatoryDistribution::Uniform { lower, upper } => ((u - lower) / (upper - lower)).clamp(0.0, 1.0),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            AleatoryDistribution::Normal { mean, sd } => mean + sd * norm_ppf(p),
            AleatoryDistribution::Uniform { lower, upper } => lower + p * (upper - lower),
        }
    }

    /// `Φ⁻¹(F(u))`. Uniform values must lie strictly inside the support.
    pub fn to_standard(&self, u: f64) -> Result<f64> {
        match *self {
            AleatoryDistribution::Normal { mean, sd } => Ok((u - mean) / sd),
            AleatoryDistribution::Uniform { lower, upper } => {
                if !(u > lower && u < upper) {
                    return Err(Error::input(format!(
                        "{u} outside the open support ({lower}, {upper})"
                    )));
                }
                Ok(norm_ppf((u - lower) / (upper - lower)))
            }
        }
    }

    pub fn from_standard(&self, z: f64) -> f64 {
        match *self {
            AleatoryDistribution::Normal { mean, sd } => mean + sd * z,
            AleatoryDistribution::Uniform { lower, upper } => lower + (upper - lower) * norm_cdf(z),
        }
    }
}

pub fn to_standard_normal(u: &[f64], dists: &[AleatoryDistribution]) -> Result<Vec<f64>> {
    if u.len() != dists.len() {
        return Err(Error::input(format!(
            "aleatory vector has {} components, expected {}",
            u.len(),
            dists.len()
        )));
    }
    u.iter().zip(dists).map(|(&v, d)| d.to_standard(v)).collect()
}

pub fn from_standard_normal(z: &[f64], dists: &[AleatoryDistribution]) -> Vec<f64> {
    z.iter().zip(dists).map(|(&v, d)| d.from_standard(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormOptions {
    /// Convergence tolerance on the standard-normal iterate.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative central-difference step in standard-normal space.
    pub fd_step: f64,
}

impl Default for FormOptions {
    fn default() -> Self {
        FormOptions { tol: 1e-6, max_iter: 100, fd_step: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormResult {
    /// Signed reliability index; negative when the mean point already fails.
    pub beta: f64,
    pub pf: f64,
    pub mpp_u: Vec<f64>,
    pub mpp_uhat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Limit-state value at the returned point.
    pub g_at_mpp: f64,
    /// Limit-state value at the origin of standard-normal space.
    pub g_at_mean: f64,
}

/// FORM by improved HL-RF: the HL-RF direction with Armijo step halving on
/// the merit `½‖û‖² + c·|g|`.
///
/// `limit_state(x, u)` is evaluated at physical aleatory values. Gradients
/// are central differences in standard-normal space. A non-converged result
/// carries the last iterate and `converged = false`.
pub fn form_pf<G>(
    mut limit_state: G,
    dists: &[AleatoryDistribution],
    x: &[f64],
    opts: &FormOptions,
) -> FormResult
where
    G: FnMut(&[f64], &[f64]) -> f64,
{
    let p = dists.len();
    let mut eval = |z: &[f64]| {
        let u = from_standard_normal(z, dists);
        limit_state(x, &u)
    };

    let mut z = vec![0.0; p];
    let g0 = eval(&z);
    let mut g = g0;
    let scale = if g0.abs() > 0.0 { g0.abs() } else { 1.0 };
    let mut grad = vec![0.0; p];
    let mut converged = false;
    let mut flat = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        fd_gradient(&mut eval, &z, opts.fd_step, &mut grad);
        let gn2: f64 = grad.iter().map(|v| v * v).sum();
        if !(gn2 > 0.0) || !gn2.is_finite() {
            flat = true;
            break;
        }
        let gz: f64 = grad.iter().zip(&z).map(|(a, b)| a * b).sum();
        let coef = (gz - g) / gn2;
        let dir: Vec<f64> = grad.iter().zip(&z).map(|(gi, zi)| coef * gi - zi).collect();

        // merit weight: keeps the HL-RF direction a descent direction
        let c = (2.0 * l2(&z) + 10.0) / gn2.sqrt();
        let merit = |zz: &[f64], gg: f64| 0.5 * zz.iter().map(|v| v * v).sum::<f64>() + c * gg.abs();
        let m0 = merit(&z, g);
        let slope = {
            // directional derivative of the merit along `dir`
            let dz: f64 = z.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let dg: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            dz + c * g.signum() * dg
        };
        let mut step = 1.0;
        let mut z_new;
        let mut g_new;
        loop {
            z_new = z.iter().zip(&dir).map(|(a, b)| a + step * b).collect::<Vec<_>>();
            g_new = eval(&z_new);
            if g_new.is_finite() && merit(&z_new, g_new) <= m0 + 1e-4 * step * slope.min(0.0) {
                break;
            }
            if step < 1e-6 {
                break;
            }
            step *= 0.5;
        }
        let moved = l2(&z_new.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>());
        z = z_new;
        g = g_new;
        if moved <= opts.tol * (1.0 + l2(&z)) && g.abs() <= 1e-6 * scale {
            converged = true;
            break;
        }
    }

    let norm = l2(&z);
    let beta = match (flat, g0 >= 0.0) {
        // no direction towards the limit surface: it is never reached
        (true, true) => f64::INFINITY,
        (true, false) => f64::NEG_INFINITY,
        (false, true) => norm,
        (false, false) => -norm,
    };
    FormResult {
        beta,
        pf: norm_cdf(-beta),
        mpp_u: from_standard_normal(&z, dists),
        mpp_uhat: z,
        converged,
        iterations,
        g_at_mpp: g,
        g_at_mean: g0,
    }
}

pub(crate) fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, z: &[f64], rel: f64, out: &mut [f64]) {
    let mut zz = z.to_vec();
    for i in 0..z.len() {
        let h = rel * z[i].abs().max(1.0);
        zz[i] = z[i] + h;
        let fp = f(&zz);
        zz[i] = z[i] - h;
        let fm = f(&zz);
        zz[i] = z[i];
        out[i] = (fp - fm) / (2.0 * h);
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEstimate {
    pub pf: f64,
    pub std_err: f64,
    pub failures: usize,
    pub samples: usize,
}

/// Crude Monte Carlo estimate of `P[g(x, U) < 0]`.
pub fn mcs_pf<G>(
    mut limit_state: G,
    dists: &[AleatoryDistribution],
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> McsEstimate
where
    G: FnMut(&[f64], &[f64]) -> f64,
{
    let n = n_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; dists.len()];
    let mut failures = 0usize;
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let u = from_standard_normal(&z, dists);
        if limit_state(x, &u) < 0.0 {
            failures += 1;
        }
    }
    let pf = failures as f64 / n as f64;
    McsEstimate {
        pf,
        std_err: (pf * (1.0 - pf) / n as f64).sqrt(),
        failures,
        samples: n,
    }
}
