use serde::{Deserialize, Serialize};

use super::RepError;

/// Fitted principal-component projection: mean-centering followed by
/// multiplication with a row-orthonormal component matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaProjector {
    mean: Vec<f64>,
    /// One row per component, each of the input dimension.
    components: Vec<Vec<f64>>,
    explained_variance_ratio: Vec<f64>,
}

impl PcaProjector {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Projects one embedding: (x − mean) · componentsᵀ.
    pub fn apply(&self, embedding: &[f64]) -> Result<Vec<f64>, RepError> {
        if embedding.len() != self.mean.len() {
            return Err(RepError::DimensionMismatch {
                expected: self.mean.len(),
                got: embedding.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|row| {
                row.iter()
                    .zip(embedding)
                    .zip(&self.mean)
                    .map(|((c, x), m)| c * (x - m))
                    .sum()
            })
            .collect())
    }
}

/// Fits a PCA projector on the given points via eigendecomposition of the
/// population covariance. Components are sorted by descending eigenvalue and
/// signed so each one's largest-magnitude entry is positive.
pub fn fit_pca(points: &[Vec<f64>], n_components: usize) -> Result<PcaProjector, RepError> {
    if n_components == 0 {
        return Err(RepError::InvalidComponents("n_components must be positive".into()));
    }
    if points.len() < n_components + 1 {
        return Err(RepError::TooFewPoints { points: points.len(), needed: n_components + 1 });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(RepError::MixedDims);
    }
    if n_components > dim {
        return Err(RepError::InvalidComponents(format!(
            "n_components {n_components} exceeds dimension {dim}"
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RepError::NonFinite);
    }

    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    // population covariance (divide by n), matching the population std used
    // for district summaries
    let mut cov = vec![vec![0.0; dim]; dim];
    for p in points {
        let centered: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }

    let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
    let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
    // covariance indistinguishable from rounding error of identical points
    if trace <= f64::EPSILON * f64::EPSILON * (1.0 + mean_sq) {
        return Err(RepError::DegenerateCovariance);
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());

    let mut components = Vec::with_capacity(n_components);
    let mut explained_variance_ratio = Vec::with_capacity(n_components);
    for &k in order.iter().take(n_components) {
        let mut row: Vec<f64> = (0..dim).map(|i| eigenvectors[i][k]).collect();
        let lead = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if row[lead] < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.push(row);
        explained_variance_ratio.push((eigenvalues[k].max(0.0) / trace).min(1.0));
    }

    Ok(PcaProjector { mean, components, explained_variance_ratio })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the matrix whose k-th column is the k-th eigenvector.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= tol / (d * d) as f64 {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p][j];
                    let aqj = a[q][j];
                    a[p][j] = c * apj - s * aqj;
                    a[q][j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i][i]).collect(), v)
}
