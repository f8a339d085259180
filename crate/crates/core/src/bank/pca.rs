use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Default number of retained components.
pub const DEFAULT_PCA_DIM: usize = 64;

/// Linear projection onto the leading principal directions of a bank.
///
/// `components` holds `output_dim` orthonormal rows of length `input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f32>,
    pub components: Vec<f32>,
}

impl PcaModel {
    /// Fits on row-major `vectors` (each `mean.len()` long) around `mean`.
    pub fn fit(vectors: &[f32], mean: &[f32], output_dim: usize) -> Result<Self> {
        let dim = mean.len();
        if output_dim == 0 || output_dim > dim {
            return Err(Error::invalid(format!(
                "pca output dim {output_dim} must be in 1..={dim}"
            )));
        }
        if vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return Err(Error::invalid("pca needs at least one vector"));
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut centered = vec![0.0f64; dim];
        for row in vectors.chunks_exact(dim) {
            for ((c, &v), &m) in centered.iter_mut().zip(row).zip(mean) {
                *c = f64::from(v) - f64::from(m);
            }
            for i in 0..dim {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..dim {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        // Descending variance; ties by column index keep this deterministic.
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });

        let mut components = Vec::with_capacity(output_dim * dim);
        for &col in order.iter().take(output_dim) {
            let v = eig.eigenvectors.column(col);
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            components.extend(v.iter().map(|x| (sign * x) as f32));
        }

        Ok(Self {
            input_dim: dim,
            output_dim,
            mean: mean.to_vec(),
            components,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.components[r * self.input_dim..(r + 1) * self.input_dim]
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.input_dim);
        (0..self.output_dim)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .zip(&self.mean)
                    .map(|((&w, &x), &m)| f64::from(w) * (x - f64::from(m)))
                    .sum()
            })
            .collect()
    }

    /// Projects a vector that is already centered on `mean`.
    pub fn project_centered(&self, centered: &[f64]) -> Vec<f64> {
        (0..self.output_dim)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(centered)
                    .map(|(&w, &x)| f64::from(w) * x)
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.mean.iter().map(|&m| f64::from(m)).collect();
        for (r, &p) in projected.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += p * f64::from(w);
            }
        }
        out
    }
}
