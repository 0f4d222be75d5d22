//! Two-component principal-component projection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit-norm principal axes, largest variance first.
    pub axes: [Vec<f64>; 2],
}

impl Pca2 {
    /// Fits on the rows of `data`. Each axis's largest-magnitude component
    /// is made positive so the result does not depend on eigen-solver sign.
    pub fn fit(data: &Matrix) -> Result<Self> {
        let (n, d) = data.shape();
        if n < 3 {
            return Err(Error::Validation(format!("projection needs at least 3 points, got {n}")));
        }
        if d < 2 {
            return Err(Error::Validation("projection needs at least 2 dimensions".into()));
        }
        let mean: Vec<f64> = data.sum_rows().data().iter().map(|v| v / n as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in 0..n {
            let c: Vec<f64> = data.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| {
            let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if pivot < 0.0 {
                col.iter().map(|v| -v).collect()
            } else {
                col
            }
        };
        Ok(Self {
            mean,
            axes: [axis(0), axis(1)],
        })
    }

    pub fn transform(&self, data: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(data.rows(), 2);
        for r in 0..data.rows() {
            for (k, axis) in self.axes.iter().enumerate() {
                let v: f64 = data.row(r).iter().zip(&self.mean).zip(axis).map(|((x, m), a)| (x - m) * a).sum();
                out.set(r, k, v);
            }
        }
        out
    }

    pub fn inverse(&self, coords: &Matrix) -> Matrix {
        let d = self.mean.len();
        let mut out = Matrix::zeros(coords.rows(), d);
        for r in 0..coords.rows() {
            for c in 0..d {
                out.set(r, c, self.mean[c] + coords.get(r, 0) * self.axes[0][c] + coords.get(r, 1) * self.axes[1][c]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_a_planar_subspace() {
        let u = [0.5, 0.5, 0.5, 0.5];
        let v = [0.5, -0.5, 0.5, -0.5];
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let (a, b) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos());
                (0..4).map(|c| 0.2 + a * u[c] + b * v[c]).collect()
            })
            .collect();
        let data = Matrix::from_rows(&rows);
        let pca = Pca2::fit(&data).unwrap();
        let back = pca.inverse(&pca.transform(&data));
        let err: f64 = back.data().iter().zip(data.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn too_few_points() {
        assert!(Pca2::fit(&Matrix::zeros(2, 3)).is_err());
    }
}
