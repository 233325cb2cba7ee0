//! Gaussian-process surrogate with an RBF kernel and expected improvement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of pairwise Euclidean distances; 1.0 when there are no
/// distinct pairs.
pub fn median_length_scale(xs: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let v = sq_dist(&xs[i], &xs[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Posterior over a standardized objective.
pub struct GaussianProcess {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    length_scale: f64,
    y_mean: f64,
    y_scale: f64,
}

impl GaussianProcess {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], noise: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Search(
                "GP needs matching, non-empty observations".into(),
            ));
        }
        let n = xs.len();
        let length_scale = median_length_scale(xs);
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_scale));

        let kern =
            |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * length_scale * length_scale)).exp();
        let mut jitter = noise;
        for _ in 0..8 {
            let k = DMatrix::from_fn(n, n, |i, j| {
                kern(&xs[i], &xs[j]) + if i == j { jitter } else { 0.0 }
            });
            if let Some(chol) = k.cholesky() {
                let alpha = chol.solve(&y);
                return Ok(Self {
                    xs: xs.to_vec(),
                    chol,
                    alpha,
                    length_scale,
                    y_mean,
                    y_scale,
                });
            }
            jitter *= 10.0;
        }
        Err(Error::Numeric(
            "kernel matrix is not positive definite".into(),
        ))
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Mean and standard deviation in standardized units.
    pub fn predict_std(&self, x: &[f64]) -> (f64, f64) {
        let l2 = 2.0 * self.length_scale * self.length_scale;
        let ks = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| (-sq_dist(xi, x) / l2).exp()),
        );
        let mu = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).unwrap_or(ks);
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (mu, var.sqrt())
    }

    /// Mean and standard deviation in objective units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (mu, sd) = self.predict_std(x);
        (mu * self.y_scale + self.y_mean, sd * self.y_scale)
    }

    /// Expected improvement over `best` (objective units) for maximization.
    pub fn expected_improvement(&self, x: &[f64], best: f64, xi: f64) -> f64 {
        let (mu, sd) = self.predict_std(x);
        let best = (best - self.y_mean) / self.y_scale;
        expected_improvement(mu, sd, best, xi)
    }
}

pub fn expected_improvement(mu: f64, sd: f64, best: f64, xi: f64) -> f64 {
    let n = Normal::standard();
    let gap = mu - best - xi;
    if sd <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    (gap * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}
