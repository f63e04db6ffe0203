//! Principal component analysis of flattened images.
//!
//! With `n` centered samples of dimension `D`, the top directions come from a
//! full symmetric eigendecomposition of whichever of `XᵀX` (D×D) or `XXᵀ`
//! (n×n) is smaller. When both exceed [`DENSE_LIMIT`] a block subspace
//! iteration on `XᵀX` followed by a Rayleigh–Ritz step is used instead.

use std::path::Path;

use invdes_tensor::checkpoint;
use invdes_tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CoreError, Result};

pub const DENSE_LIMIT: usize = 512;
const OVERSAMPLE: usize = 8;
const MAX_SUBSPACE_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `M×D`, orthonormal rows.
    pub components: Vec<f64>,
    /// Sample variances along each component, nonincreasing.
    pub variances: Vec<f64>,
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Eigen-pairs of `XᵀX` for the `want` largest eigenvalues, as (values, D×want).
fn top_eigen(x: &DMatrix<f64>, want: usize) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    if n.min(d) > DENSE_LIMIT {
        return subspace_iteration(x, want);
    }
    if d <= n {
        let (vals, vecs) = sorted_eigen(x.transpose() * x);
        return (vals[..want].to_vec(), vecs.columns(0, want).into_owned());
    }
    // XXᵀ u = λ u  ⇒  XᵀX (Xᵀu) = λ (Xᵀu), with ‖Xᵀu‖ = √λ.
    let (vals, u) = sorted_eigen(x * x.transpose());
    let mut v = x.transpose() * u.columns(0, want);
    for (c, &l) in vals[..want].iter().enumerate() {
        let norm = v.column(c).norm();
        if l > 0.0 && norm > 0.0 {
            v.column_mut(c).scale_mut(1.0 / norm);
        }
    }
    (vals[..want].to_vec(), v)
}

fn orthonormalize(q: DMatrix<f64>) -> DMatrix<f64> {
    q.qr().q()
}

fn subspace_iteration(x: &DMatrix<f64>, want: usize) -> (Vec<f64>, DMatrix<f64>) {
    let d = x.ncols();
    let block = (want + OVERSAMPLE).min(d);
    // Deterministic, generic start: a smooth but non-degenerate pattern.
    let start = DMatrix::from_fn(d, block, |r, c| ((r as f64 + 1.0) * (c as f64 + 1.0) * 0.618_034).sin() + 1e-3 * c as f64);
    let mut q = orthonormalize(start);
    let mut prev = vec![f64::INFINITY; want];
    for _ in 0..MAX_SUBSPACE_ITERS {
        q = orthonormalize(x.transpose() * (x * &q));
        let small = (x * &q).transpose() * (x * &q);
        let (vals, _) = sorted_eigen(small);
        let converged = vals[..want]
            .iter()
            .zip(&prev)
            .all(|(a, b)| (a - b).abs() <= 1e-13 * a.abs().max(1e-300));
        prev = vals[..want].to_vec();
        if converged {
            break;
        }
    }
    let xq = x * &q;
    let (vals, w) = sorted_eigen(xq.transpose() * &xq);
    let v = &q * w.columns(0, want);
    (vals[..want].to_vec(), v)
}

impl PcaModel {
    /// Fits `m` components to row-major samples `data` (`n×d`).
    pub fn fit(data: &[f64], n: usize, d: usize, m: usize) -> Result<Self> {
        if data.len() != n * d || d == 0 {
            return Err(CoreError::invalid("PCA data length does not match n×d"));
        }
        if m == 0 || n < m + 1 {
            return Err(CoreError::invalid(format!("PCA with {m} components needs at least {} samples", m + 1)));
        }
        if m > d {
            return Err(CoreError::invalid(format!("cannot extract {m} components from {d} dimensions")));
        }
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let x = DMatrix::from_fn(n, d, |r, c| data[r * d + c] - mean[c]);
        let (vals, vecs) = top_eigen(&x, m);
        let top = vals.first().copied().unwrap_or(0.0);
        let tol = 1e-10 * top.max(f64::MIN_POSITIVE) * (n.max(d) as f64);
        if vals.iter().any(|&l| !(l > tol)) {
            return Err(CoreError::invalid(format!(
                "requested {m} components but the data has rank below {m}"
            )));
        }
        let mut components = vec![0.0; m * d];
        for c in 0..m {
            for j in 0..d {
                components[c * d + j] = vecs[(j, c)];
            }
        }
        Ok(Self {
            mean,
            components,
            variances: vals.iter().map(|l| l / (n - 1) as f64).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.variances.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(CoreError::invalid(format!("sample has {} values, model expects {d}", x.len())));
        }
        Ok(self
            .components
            .chunks(d)
            .map(|row| row.iter().zip(x.iter().zip(&self.mean)).map(|(v, (a, m))| v * (a - m)).sum())
            .collect())
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.n_components() {
            return Err(CoreError::invalid(format!(
                "{} coefficients for a {}-component model",
                coeffs.len(),
                self.n_components()
            )));
        }
        let d = self.dim();
        let mut out = self.mean.clone();
        for (c, row) in coeffs.iter().zip(self.components.chunks(d)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += c * v);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (m, d) = (self.n_components(), self.dim());
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let mean = Tensor::new(&[d], f(&self.mean))?;
        let comps = Tensor::new(&[m, d], f(&self.components))?;
        let vars = Tensor::new(&[m], f(&self.variances))?;
        checkpoint::save(path, &[("mean", &mean), ("components", &comps), ("variances", &vars)])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = checkpoint::load(path)?;
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
                .ok_or_else(|| CoreError::Format {
                    path: path.to_path_buf(),
                    reason: format!("missing tensor `{name}`"),
                })
        };
        Ok(Self {
            mean: get("mean")?,
            components: get("components")?,
            variances: get("variances")?,
        })
    }
}
