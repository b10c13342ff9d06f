use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::model::Sample;

/// Leading principal directions of the covariance of `{y_n x_n}`, as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    pub fn fit(ds: &LabeledDataset, target_dim: usize) -> Result<Self> {
        let d = ds.dim();
        let n = ds.len();
        if target_dim == 0 || target_dim > d {
            return Err(Error::arg(format!("target dimension {target_dim} must lie in 1..={d}")));
        }
        if n < target_dim {
            return Err(Error::arg(format!("{n} samples cannot span {target_dim} dimensions")));
        }

        let mut yx = DMatrix::<f64>::zeros(n, d);
        for (r, s) in ds.samples.iter().enumerate() {
            let yv = s.y.value();
            for (c, v) in s.x.iter().enumerate() {
                yx[(r, c)] = yv * v;
            }
        }
        let mean = yx.row_mean();
        for mut row in yx.row_iter_mut() {
            row -= &mean;
        }
        let denom = (n.max(2) - 1) as f64;
        let cov = (yx.transpose() * &yx) / denom;

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * d as f64 * f64::EPSILON * 16.0;
        let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
        if rank < target_dim {
            return Err(Error::RankDeficient {
                rank,
                requested: target_dim,
            });
        }

        let mut components = DMatrix::<f64>::zeros(d, target_dim);
        let mut eigenvalues = Vec::with_capacity(target_dim);
        for (k, &i) in order.iter().take(target_dim).enumerate() {
            let v = eig.eigenvectors.column(i);
            let score: f64 = ds
                .samples
                .iter()
                .map(|s| s.y.value() * s.x.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let sign = if score < 0.0 { -1.0 } else { 1.0 };
            components.set_column(k, &(v * sign));
            eigenvalues.push(eig.eigenvalues[i]);
        }
        Ok(PcaBasis {
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.components.nrows() {
            return Err(Error::shape(format!(
                "sample has dimension {}, basis expects {}",
                x.len(),
                self.components.nrows()
            )));
        }
        let x = DVector::from_column_slice(x);
        Ok((self.components.transpose() * x).iter().copied().collect())
    }

    pub fn transform(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        let samples = ds
            .samples
            .iter()
            .map(|s| Ok(Sample::new(self.project(&s.x)?, s.y)))
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(
            samples,
            Provenance::Derived(format!("pca-{} of {:?}", self.components.ncols(), ds.provenance)),
        )
    }
}

/// Coefficients of each sample in the leading `target_dim` principal directions.
pub fn pca_align(ds: &LabeledDataset, target_dim: usize) -> Result<LabeledDataset> {
    PcaBasis::fit(ds, target_dim)?.transform(ds)
}
