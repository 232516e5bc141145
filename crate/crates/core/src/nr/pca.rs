use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection onto the top-`d` principal axes of a descriptor pool.
///
/// No whitening: projected coordinates keep their natural variances, which
/// are stored in `variances` (descending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `output_dim x input_dim`; rows are orthonormal.
    pub components: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "descriptor of length {} for a PCA over {}",
                v.len(),
                self.input_dim
            )));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.output_dim)
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(&centered)
                    .map(|(c, x)| c * x)
                    .sum()
            })
            .collect())
    }

    /// Maps projected coordinates back to the centered input space.
    pub fn back_project(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim];
        for (i, &coef) in p.iter().enumerate().take(self.output_dim) {
            for (o, c) in out.iter_mut().zip(self.component(i)) {
                *o += coef * c;
            }
        }
        out
    }

    /// Checks shapes, orthonormality within `tol`, and variance ordering.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (d, dd) = (self.output_dim, self.input_dim);
        if self.mean.len() != dd || self.components.len() != d * dd || self.variances.len() != d {
            return Err(Error::CorruptModel("PCA block sizes disagree with header".into()));
        }
        if self.components.iter().chain(&self.mean).chain(&self.variances).any(|v| !v.is_finite()) {
            return Err(Error::CorruptModel("non-finite PCA parameter".into()));
        }
        for i in 0..d {
            for j in i..d {
                let g: f64 = self
                    .component(i)
                    .iter()
                    .zip(self.component(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (g - want).abs() > tol {
                    return Err(Error::CorruptModel(format!(
                        "PCA rows {i},{j} not orthonormal (dot {g})"
                    )));
                }
            }
        }
        if self.variances.iter().any(|&v| v < 0.0)
            || self.variances.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::CorruptModel("PCA variances not nonincreasing".into()));
        }
        Ok(())
    }
}

/// Fits PCA from the sample covariance (denominator `N - 1`) by symmetric
/// eigendecomposition. Each component's largest-magnitude entry is made
/// positive so the basis is deterministic.
pub fn fit_pca(data: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    let n = data.len();
    if d == 0 {
        return Err(Error::Parameter("PCA dimension must be at least 1".into()));
    }
    if n < d {
        return Err(Error::InsufficientData(format!(
            "PCA to {d} dimensions needs at least {d} samples, got {n}"
        )));
    }
    let dim = data[0].len();
    if data.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("ragged descriptor matrix".into()));
    }
    if d > dim {
        return Err(Error::Parameter(format!(
            "PCA dimension {d} exceeds input dimension {dim}"
        )));
    }
    let mut mean = vec![0.0; dim];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| data[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(d * dim);
    let mut variances = Vec::with_capacity(d);
    for &k in order.iter().take(d) {
        let col = eig.eigenvectors.column(k);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| {
                if v.abs() > best.1.abs() {
                    (i, *v)
                } else {
                    best
                }
            });
        let sign = if col[pivot.0] < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| v * sign));
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        input_dim: dim,
        output_dim: d,
        mean,
        components,
        variances,
    })
}
