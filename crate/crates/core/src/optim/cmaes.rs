//! (μ/μ_w, λ)-CMA-ES on a box.
//!
//! Candidates falling outside the box are resampled; after a fixed number of
//! attempts the last draw is clamped. Each generation is handed to the caller
//! as one batch so it can be evaluated in parallel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaesOptions {
    /// `None` uses 4 + ⌊3 ln n⌋.
    pub population: Option<usize>,
    pub sigma0: f64,
    pub max_generations: usize,
    /// Additional runs after the first, each from the best point so far with
    /// twice the population.
    pub restarts: usize,
    pub seed: u64,
    /// Stop a run when the best value over the last 20 generations moves less
    /// than this.
    pub f_tol: f64,
    /// Stop a run when σ times the largest axis falls below this.
    pub x_tol: f64,
}

impl Default for CmaesOptions {
    fn default() -> Self {
        CmaesOptions { population: None, sigma0: 0.5, max_generations: 200, restarts: 1, seed: 0, f_tol: 1e-12, x_tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct CmaesResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub generations: usize,
    pub evaluations: usize,
}

/// `eval` maps a batch of candidates to their objective values.
pub fn minimize<F>(mut eval: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &CmaesOptions) -> CmaesResult
where
    F: FnMut(&[Vec<f64>]) -> Vec<f64>,
{
    let n = x0.len();
    let base_lambda = opts.population.unwrap_or(4 + (3.0 * (n as f64).ln()).floor() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best_x = x0.iter().zip(lower.iter().zip(upper)).map(|(x, (l, u))| x.clamp(*l, *u)).collect::<Vec<_>>();
    let mut best_f = f64::INFINITY;
    let mut generations = 0;
    let mut evaluations = 0;

    for run in 0..=opts.restarts {
        let lambda = base_lambda << run;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu).map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln()).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
        let cs = (mueff + 2.0) / (nf + mueff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (0.0_f64).max(((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

        let mut mean = DVector::from_column_slice(&best_x);
        let mut sigma = opts.sigma0;
        let mut pc = DVector::zeros(n);
        let mut ps = DVector::zeros(n);
        let mut cov = DMatrix::<f64>::identity(n, n);
        let mut bmat = DMatrix::<f64>::identity(n, n);
        let mut dvec = DVector::from_element(n, 1.0);
        let mut history: Vec<f64> = Vec::new();

        for gen in 0..opts.max_generations {
            generations += 1;
            let mut zs = Vec::with_capacity(lambda);
            let mut xs = Vec::with_capacity(lambda);
            for _ in 0..lambda {
                let mut tries = 0;
                loop {
                    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                    let y = &bmat * z.component_mul(&dvec);
                    let mut x = &mean + &y * sigma;
                    let inside = (0..n).all(|i| x[i] >= lower[i] && x[i] <= upper[i]);
                    tries += 1;
                    if inside || tries >= 100 {
                        for i in 0..n {
                            x[i] = x[i].clamp(lower[i], upper[i]);
                        }
                        zs.push((x.clone() - &mean) / sigma);
                        xs.push(x.iter().copied().collect::<Vec<f64>>());
                        break;
                    }
                }
            }
            let fs = eval(&xs);
            evaluations += xs.len();
            let mut order: Vec<usize> = (0..lambda).collect();
            order.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]).then(a.cmp(&b)));
            if fs[order[0]] < best_f {
                best_f = fs[order[0]];
                best_x = xs[order[0]].clone();
            }
            history.push(fs[order[0]]);

            let old_mean = mean.clone();
            mean = DVector::zeros(n);
            for (w, &i) in weights.iter().zip(&order) {
                mean += DVector::from_column_slice(&xs[i]) * *w;
            }
            let y_w = (&mean - &old_mean) / sigma;
            // C^{-1/2} y_w
            let inv_sqrt = &bmat * DMatrix::from_diagonal(&dvec.map(|d| 1.0 / d)) * bmat.transpose();
            ps = &ps * (1.0 - cs) + &inv_sqrt * &y_w * (cs * (2.0 - cs) * mueff).sqrt();
            let ps_norm = ps.norm();
            let hsig = ps_norm / (1.0 - (1.0 - cs).powi(2 * (gen as i32 + 1))).sqrt() / chi_n < 1.4 + 2.0 / (nf + 1.0);
            let hs = if hsig { 1.0 } else { 0.0 };
            pc = &pc * (1.0 - cc) + &y_w * (hs * (cc * (2.0 - cc) * mueff).sqrt());
            let mut rank_mu = DMatrix::zeros(n, n);
            for (w, &i) in weights.iter().zip(&order) {
                let yi = &zs[i];
                rank_mu += yi * yi.transpose() * *w;
            }
            cov = &cov * (1.0 - c1 - cmu)
                + (&pc * pc.transpose() + &cov * ((1.0 - hs) * cc * (2.0 - cc))) * c1
                + rank_mu * cmu;
            sigma *= ((cs / damps) * (ps_norm / chi_n - 1.0)).exp();
            // the box caps useful step sizes
            let width = lower.iter().zip(upper).map(|(l, u)| u - l).fold(0.0, f64::max);
            sigma = sigma.min(width);

            cov = (&cov + cov.transpose()) * 0.5;
            let eig = SymmetricEigen::new(cov.clone());
            bmat = eig.eigenvectors;
            dvec = eig.eigenvalues.map(|v| v.max(1e-20).sqrt());

            if sigma * dvec.max() < opts.x_tol {
                break;
            }
            if history.len() >= 20 {
                let recent = &history[history.len() - 20..];
                let hi = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = recent.iter().copied().fold(f64::INFINITY, f64::min);
                if hi - lo <= opts.f_tol * (1.0 + lo.abs()) {
                    break;
                }
            }
            if dvec.max() > 1e7 * dvec.min() {
                break;
            }
        }
    }
    CmaesResult { x: best_x, f: best_f, generations, evaluations }
}
