use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::model::{sign_nonneg, Label, Sample};

/// Centring and label alignment fitted on one split and reusable on another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub mean: Vec<f64>,
    pub signs: Vec<f64>,
}

fn check_classes(class0: &[Vec<f64>], class1: &[Vec<f64>]) -> Result<usize> {
    if class0.is_empty() || class1.is_empty() {
        return Err(Error::arg(format!(
            "both classes must be nonempty (got {} and {} samples)",
            class0.len(),
            class1.len()
        )));
    }
    let d = class0[0].len();
    if let Some(bad) = class0.iter().chain(class1).find(|x| x.len() != d) {
        return Err(Error::shape(format!("sample of dimension {} among dimension {d}", bad.len())));
    }
    Ok(d)
}

fn labelled<'a>(class0: &'a [Vec<f64>], class1: &'a [Vec<f64>]) -> impl Iterator<Item = (&'a Vec<f64>, Label)> {
    class0
        .iter()
        .map(|x| (x, Label::Pos))
        .chain(class1.iter().map(|x| (x, Label::Neg)))
}

impl Preprocessor {
    /// `class0` is labelled +1 and `class1` −1.
    pub fn fit(class0: &[Vec<f64>], class1: &[Vec<f64>]) -> Result<Self> {
        let d = check_classes(class0, class1)?;
        let total = (class0.len() + class1.len()) as f64;
        let mut mean = vec![0.0; d];
        for (x, _) in labelled(class0, class1) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);

        let mut corr = vec![0.0; d];
        for (x, y) in labelled(class0, class1) {
            let yv = y.value();
            for i in 0..d {
                corr[i] += yv * (x[i] - mean[i]);
            }
        }
        let signs = corr.into_iter().map(sign_nonneg).collect();
        Ok(Preprocessor { mean, signs })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "sample has dimension {}, preprocessor expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.signs)
            .map(|((v, m), s)| s * (v - m))
            .collect())
    }

    pub fn apply_pair(&self, class0: &[Vec<f64>], class1: &[Vec<f64>], provenance: Provenance) -> Result<LabeledDataset> {
        let mut samples = Vec::with_capacity(class0.len() + class1.len());
        for (x, y) in labelled(class0, class1) {
            samples.push(Sample::new(self.apply(x)?, y));
        }
        LabeledDataset::new(samples, provenance)
    }
}

/// Fits on the pair itself and returns the transformed samples, class0 first.
pub fn preprocess_binary(class0: &[Vec<f64>], class1: &[Vec<f64>]) -> Result<LabeledDataset> {
    let pre = Preprocessor::fit(class0, class1)?;
    pre.apply_pair(class0, class1, Provenance::Derived("centred and label-aligned pair".into()))
}

/// Flips each dimension so that `Σ_n y_n x_{n,i} ≥ 0`; returns the dataset and the signs used.
pub fn align_signs(ds: &LabeledDataset) -> (LabeledDataset, Vec<f64>) {
    let d = ds.dim();
    let mut corr = vec![0.0; d];
    for s in &ds.samples {
        let yv = s.y.value();
        for (c, v) in corr.iter_mut().zip(&s.x) {
            *c += yv * v;
        }
    }
    let signs: Vec<f64> = corr.into_iter().map(sign_nonneg).collect();
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample::new(s.x.iter().zip(&signs).map(|(v, g)| v * g).collect(), s.y))
        .collect();
    (
        LabeledDataset {
            samples,
            provenance: ds.provenance.clone(),
        },
        signs,
    )
}
