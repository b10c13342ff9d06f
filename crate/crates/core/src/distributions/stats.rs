use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// Per-dimension mean of `y x`.
    pub mean_yx: Vec<f64>,
    /// Per-dimension `Σ_j Cov(x_i, x_j)`, unbiased.
    pub total_cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn nonnegative_cov_fraction(&self) -> f64 {
        if self.total_cov.is_empty() {
            return 0.0;
        }
        self.total_cov.iter().filter(|&&c| c >= 0.0).count() as f64 / self.total_cov.len() as f64
    }
}

/// `Σ_j Cov(x_i, x_j) = Cov(x_i, Σ_j x_j)`, so one pass over the row sums suffices.
pub fn feature_stats(ds: &LabeledDataset) -> Result<FeatureStats> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::arg(format!("feature statistics need at least 2 samples, got {n}")));
    }
    let d = ds.dim();
    let nf = n as f64;
    let mut mean_x = vec![0.0; d];
    let mut mean_yx = vec![0.0; d];
    let mut mean_sum = 0.0;
    for s in &ds.samples {
        let yv = s.y.value();
        for i in 0..d {
            mean_x[i] += s.x[i];
            mean_yx[i] += yv * s.x[i];
        }
        mean_sum += s.x.iter().sum::<f64>();
    }
    mean_x.iter_mut().for_each(|m| *m /= nf);
    mean_yx.iter_mut().for_each(|m| *m /= nf);
    mean_sum /= nf;

    let mut total_cov = vec![0.0; d];
    for s in &ds.samples {
        let centred_sum = s.x.iter().sum::<f64>() - mean_sum;
        for i in 0..d {
            total_cov[i] += (s.x[i] - mean_x[i]) * centred_sum;
        }
    }
    total_cov.iter_mut().for_each(|c| *c /= nf - 1.0);
    Ok(FeatureStats {
        mean_yx,
        total_cov,
        count: n,
    })
}
