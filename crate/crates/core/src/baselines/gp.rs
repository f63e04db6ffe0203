//! Gaussian-process regression with a squared-exponential kernel and the
//! expected-improvement acquisition for minimization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::erf::erfc;

use crate::error::{CoreError, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;
/// Jitter multiplier applied on the single retry after a failed factorization.
pub const JITTER_RETRY: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpHyper {
    pub mean: f64,
    pub signal_var: f64,
    pub length_scale: f64,
    pub jitter: f64,
}

impl GpHyper {
    /// Empirical defaults: sample mean and variance of `y`, median pairwise
    /// distance of `x` as the length scale.
    pub fn from_data(x: &[Vec<f64>], y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut dists = Vec::new();
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                dists.push(dist2(&x[i], &x[j]).sqrt());
            }
        }
        dists.sort_by(f64::total_cmp);
        let median = dists.get(dists.len() / 2).copied().unwrap_or(1.0);
        Self {
            mean,
            signal_var: if var > 0.0 { var } else { 1.0 },
            length_scale: if median > 0.0 { median } else { 1.0 },
            jitter: DEFAULT_JITTER,
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum()
}

#[derive(Clone, Debug)]
pub struct GaussianProcess {
    hyper: GpHyper,
    x: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GaussianProcess {
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        Self::fit_with(x, y, GpHyper::from_data(x, y))
    }

    pub fn fit_with(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(CoreError::invalid("GP needs matching, nonempty inputs and targets"));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(CoreError::invalid("GP inputs have inconsistent dimension"));
        }
        if !(hyper.signal_var > 0.0 && hyper.length_scale > 0.0 && hyper.jitter >= 0.0) {
            return Err(CoreError::invalid("GP hyperparameters must be positive"));
        }
        let n = x.len();
        let kernel = DMatrix::from_fn(n, n, |i, j| kernel(&hyper, &x[i], &x[j]));
        let factor = |jitter: f64| {
            let mut k = kernel.clone();
            for i in 0..n {
                k[(i, i)] += jitter * hyper.signal_var;
            }
            Cholesky::new(k)
        };
        let chol = factor(hyper.jitter)
            .or_else(|| factor(hyper.jitter * JITTER_RETRY))
            .ok_or_else(|| CoreError::numerical("GP covariance is not positive definite after jitter retry"))?;
        let resid = DVector::from_iterator(n, y.iter().map(|v| v - hyper.mean));
        let alpha = chol.solve(&resid);
        Ok(Self {
            hyper,
            x: x.to_vec(),
            chol,
            alpha,
        })
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    /// Posterior mean and variance at `q`.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|x| kernel(&self.hyper, x, q)));
        let mean = self.hyper.mean + ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).unwrap_or_else(|| ks.clone());
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
        (mean, var)
    }
}

pub fn kernel(h: &GpHyper, a: &[f64], b: &[f64]) -> f64 {
    h.signal_var * (-dist2(a, b) / (2.0 * h.length_scale * h.length_scale)).exp()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `best` for a Gaussian posterior.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let gain = best - mean;
    let sd = var.max(0.0).sqrt();
    if sd == 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    (gain * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}
