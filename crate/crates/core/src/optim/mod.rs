//! Optimizers used by the design loops.

pub mod cmaes;
pub mod nelder_mead;
pub mod qp;
pub mod sqp;

use rand::Rng;

/// Latin hypercube sample of `n` points in `[0,1]^dim`.
pub fn latin_hypercube<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            strata.swap(i, j);
        }
        for (i, s) in strata.into_iter().enumerate() {
            points[i][d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}
