//! Principal components of velocity fields via the sample Gram matrix.

use crate::error::{Error, Result};
use crate::grid::VectorField;

/// Eigenvalues below this fraction of the total variance are treated as
/// zero and their components flagged undefined.
const RELATIVE_FLOOR: f64 = 1e-12;

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major,
/// `n × n`). Returns eigenvalues in descending order with matching
/// eigenvectors as columns of the returned row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::DimMismatch("matrix is not n x n".into()));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + col] = v[r * n + src];
        }
    }
    Ok((values, vecs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityPCA {
    pub mean: VectorField,
    /// Unit-norm flattened components; zero fields where undefined.
    pub components: Vec<VectorField>,
    /// Sample variances (divisor `n − 1`), non-increasing.
    pub variances: Vec<f64>,
    /// False for components of a zero-variance direction.
    pub defined: Vec<bool>,
    pub total_variance: f64,
}

impl VelocityPCA {
    pub fn explained_ratio(&self, k: usize) -> f64 {
        if self.total_variance > 0.0 {
            self.variances[k] / self.total_variance
        } else {
            0.0
        }
    }
}

/// Top `n_components` directions of variation among `fields`.
pub fn pca_fields(fields: &[VectorField], n_components: usize) -> Result<VelocityPCA> {
    let n = fields.len();
    if n <= n_components {
        return Err(Error::invalid(format!(
            "need more than {n_components} fields for {n_components} components, got {n}"
        )));
    }
    let mean = VectorField::mean_of(fields)?;
    let (h, w) = mean.dims();
    let centered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| f.data().iter().zip(mean.data()).map(|(a, b)| a - b).collect())
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = d;
            gram[j * n + i] = d;
        }
    }
    let (vals, vecs) = symmetric_eigen(&gram, n)?;
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let dim = 2 * h * w;
    let mut components = Vec::with_capacity(n_components);
    let mut variances = Vec::with_capacity(n_components);
    let mut defined = Vec::with_capacity(n_components);
    for k in 0..n_components {
        let lambda = vals[k].max(0.0);
        variances.push(lambda / (n - 1) as f64);
        if trace <= 0.0 || lambda <= RELATIVE_FLOOR * trace {
            components.push(VectorField::zeros(h, w));
            defined.push(false);
            continue;
        }
        let mut c = vec![0.0; dim];
        for (i, row) in centered.iter().enumerate() {
            let coef = vecs[i * n + k];
            for (cv, x) in c.iter_mut().zip(row) {
                *cv += coef * x;
            }
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.iter_mut().for_each(|x| *x /= norm);
        components.push(VectorField::new(h, w, c)?);
        defined.push(true);
    }
    Ok(VelocityPCA {
        mean,
        components,
        variances,
        defined,
        total_variance: trace / (n - 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes_small_matrix() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 3).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for k in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r * 3 + c] * vecs[c * 3 + k]).sum();
                assert!((av - vals[k] * vecs[r * 3 + k]).abs() < 1e-12);
            }
        }
        assert!((vals.iter().sum::<f64>() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_fields_give_zero_variance() {
        let fields = vec![VectorField::zeros(4, 4); 5];
        let p = pca_fields(&fields, 2).unwrap();
        assert_eq!(p.variances, vec![0.0, 0.0]);
        assert_eq!(p.defined, vec![false, false]);
        assert!(pca_fields(&fields, 5).is_err());
    }
}
