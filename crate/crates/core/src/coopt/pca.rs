//! Principal component projection via symmetric eigendecomposition of the
//! sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub projected: Vec<Vec<f64>>,
    pub retained_variance: f64,
    pub mean: Vec<f64>,
    /// `target_dim` unit-norm principal axes, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    /// Map a reduced-space point back to the original space.
    pub fn back_project(&self, point: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (coef, axis) in point.iter().zip(&self.components) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += coef * a;
            }
        }
        out
    }
}

/// Covariance eigenpairs sorted by descending eigenvalue, with each
/// eigenvector's largest-magnitude entry made positive.
pub fn covariance_eigen(vectors: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    if vectors.len() < 2 {
        return Err(invalid("PCA needs at least two vectors"));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(invalid("PCA vectors must share a positive dimension"));
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for v in vectors {
        for i in 0..dim {
            let di = v[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let c = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors_out: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((mean, values, vectors_out))
}

pub fn pca_project(vectors: &[Vec<f64>], target_dim: usize) -> Result<PcaProjection> {
    if target_dim == 0 {
        return Err(invalid("target dimension must be positive"));
    }
    let (mean, eigenvalues, axes) = covariance_eigen(vectors)?;
    let dim = mean.len();
    if target_dim > dim {
        return Err(invalid(format!("target dimension {target_dim} exceeds input dimension {dim}")));
    }
    let components: Vec<Vec<f64>> = axes.into_iter().take(target_dim).collect();
    let projected = vectors
        .iter()
        .map(|v| {
            components
                .iter()
                .map(|axis| axis.iter().zip(v.iter().zip(&mean)).map(|(a, (x, m))| a * (x - m)).sum())
                .collect()
        })
        .collect();
    let total: f64 = eigenvalues.iter().map(|e| e.max(0.0)).sum();
    let kept: f64 = eigenvalues.iter().take(target_dim).map(|e| e.max(0.0)).sum();
    let retained_variance = if total > 0.0 { kept / total } else { 1.0 };
    Ok(PcaProjection { projected, retained_variance, mean, components, eigenvalues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_plane_keeps_all_variance() {
        let mut rng = rng_for(1, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let u = [1.0, 2.0, 0.0, -1.0, 0.5];
        let v = [0.0, 1.0, 1.0, 1.0, -2.0];
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let (a, b): (f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng));
                (0..5).map(|i| 3.0 + a * u[i] + b * v[i]).collect()
            })
            .collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!((p.retained_variance - 1.0).abs() < 1e-9);
        for (orig, red) in pts.iter().zip(&p.projected) {
            let back = p.back_project(red);
            assert!(orig.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn isotropic_half_variance() {
        let mut rng = rng_for(2, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..20_000).map(|_| (0..32).map(|_| normal.sample(&mut rng)).collect()).collect();
        let p = pca_project(&pts, 16).unwrap();
        // top half of the sample spectrum sits slightly above 0.5 from eigenvalue spread
        assert!((p.retained_variance - 0.5).abs() < 0.03, "{}", p.retained_variance);
    }

    #[test]
    fn argument_errors() {
        assert!(pca_project(&[vec![1.0, 2.0]], 1).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]], 0).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]], 2).is_err());
    }
}
