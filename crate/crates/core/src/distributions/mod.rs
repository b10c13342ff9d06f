//! Synthetic data distributions, real-dataset ingestion and feature statistics.

mod cifar;
mod export;
mod idx;
mod pca;
mod preprocess;
mod stats;

pub use cifar::load_cifar;
pub use export::{write_csv, DatasetManifest};
pub use idx::load_idx;
pub use pca::{pca_align, PcaBasis};
pub use preprocess::{align_signs, preprocess_binary, Preprocessor};
pub use stats::{feature_stats, FeatureStats};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Episode, Label, PromptMatrix, Sample};

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for parallel unit `index` of a run seeded with `seed` (splitmix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Anything that can draw labelled feature vectors of a fixed dimension.
pub trait SampleSource {
    fn dim(&self) -> usize;

    /// Writes one feature vector into `x` and returns its label.
    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) -> Label;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let mut x = vec![0.0; self.dim()];
        let y = self.draw_into(rng, &mut x);
        Sample { x, y }
    }
}

/// Draws `n` demonstrations and one query straight into a prompt matrix.
pub fn sample_episode<S: SampleSource + ?Sized, R: Rng + ?Sized>(src: &S, n: usize, rng: &mut R) -> Episode {
    let d = src.dim();
    let mut data = DMatrix::<f64>::zeros(d + 1, n + 1);
    let mut buf = vec![0.0; d];
    for col in 0..n {
        let y = src.draw_into(rng, &mut buf);
        let mut c = data.column_mut(col);
        c.rows_mut(0, d).copy_from_slice(&buf);
        c[d] = y.value();
    }
    let label = src.draw_into(rng, &mut buf);
    data.column_mut(n).rows_mut(0, d).copy_from_slice(&buf);
    Episode {
        prompt: PromptMatrix::from_raw(data),
        label,
    }
}

fn random_label<R: Rng + ?Sized>(rng: &mut R) -> Label {
    if rng.random::<bool>() {
        Label::Pos
    } else {
        Label::Neg
    }
}

/// Training distribution: `x_c = y` and `y x_i ~ U[0, λ]` otherwise.
///
/// `robust_index` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainDistSpec {
    pub d: usize,
    pub lambda: f64,
    pub robust_index: usize,
}

impl TrainDistSpec {
    pub fn new(d: usize, lambda: f64, robust_index: usize) -> Result<Self> {
        let spec = TrainDistSpec {
            d,
            lambda,
            robust_index,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::arg("d must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::arg(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if self.robust_index >= self.d {
            return Err(Error::arg(format!(
                "robust index {} out of range for d = {}",
                self.robust_index, self.d
            )));
        }
        Ok(())
    }

    /// `E[y x_i]`: 1 on the robust coordinate, `λ/2` elsewhere.
    pub fn mean_yx(&self) -> Vec<f64> {
        (0..self.d)
            .map(|i| if i == self.robust_index { 1.0 } else { self.lambda / 2.0 })
            .collect()
    }
}

impl SampleSource for TrainDistSpec {
    fn dim(&self) -> usize {
        self.d
    }

    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) -> Label {
        let y = random_label(rng);
        let yv = y.value();
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if i == self.robust_index {
                yv
            } else {
                yv * self.lambda * rng.random::<f64>()
            };
        }
        y
    }
}

/// Mixture over the robust index `c ~ U([d])`, one `c` per dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMixture {
    pub d: usize,
    pub lambda: f64,
}

impl TrainMixture {
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainDistSpec {
        TrainDistSpec {
            d: self.d,
            lambda: self.lambda,
            robust_index: rng.random_range(0..self.d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Robust,
    Vulnerable,
    Irrelevant,
}

/// Test distribution built from independent normals, `y x_i ~ N(s, s²)` with
/// `s = α` on robust and `s = β` on vulnerable coordinates, `N(0, γ²)` on irrelevant ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDistSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub s_rob: Vec<usize>,
    pub s_vul: Vec<usize>,
    pub s_irr: Vec<usize>,
}

impl TestDistSpec {
    /// Contiguous blocks: robust first, then vulnerable, then irrelevant.
    pub fn blocks(d_rob: usize, d_vul: usize, d_irr: usize, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let spec = TestDistSpec {
            alpha,
            beta,
            gamma,
            s_rob: (0..d_rob).collect(),
            s_vul: (d_rob..d_rob + d_vul).collect(),
            s_irr: (d_rob + d_vul..d_rob + d_vul + d_irr).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn d(&self) -> usize {
        self.s_rob.len() + self.s_vul.len() + self.s_irr.len()
    }

    pub fn d_rob(&self) -> usize {
        self.s_rob.len()
    }

    pub fn d_vul(&self) -> usize {
        self.s_vul.len()
    }

    pub fn d_irr(&self) -> usize {
        self.s_irr.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::arg(format!(
                "scales must satisfy alpha > 0, beta > 0, gamma >= 0; got ({}, {}, {})",
                self.alpha, self.beta, self.gamma
            )));
        }
        let d = self.d();
        if d == 0 {
            return Err(Error::arg("test distribution needs at least one feature"));
        }
        let mut seen = vec![false; d];
        for &i in self.s_rob.iter().chain(&self.s_vul).chain(&self.s_irr) {
            if i >= d || seen[i] {
                return Err(Error::arg(format!(
                    "index sets must partition 0..{d}; index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        let mut out = vec![FeatureKind::Irrelevant; self.d()];
        for &i in &self.s_rob {
            out[i] = FeatureKind::Robust;
        }
        for &i in &self.s_vul {
            out[i] = FeatureKind::Vulnerable;
        }
        out
    }
}

/// Pre-resolved per-coordinate `(mean, sd)` of `y x_i`.
#[derive(Debug, Clone)]
pub struct NormalSource {
    coords: Vec<(f64, f64)>,
}

impl NormalSource {
    pub fn new(spec: &TestDistSpec) -> Result<Self> {
        spec.validate()?;
        let coords = spec
            .kinds()
            .into_iter()
            .map(|k| match k {
                FeatureKind::Robust => (spec.alpha, spec.alpha),
                FeatureKind::Vulnerable => (spec.beta, spec.beta),
                FeatureKind::Irrelevant => (0.0, spec.gamma),
            })
            .collect();
        Ok(NormalSource { coords })
    }
}

impl SampleSource for NormalSource {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) -> Label {
        let y = random_label(rng);
        let yv = y.value();
        for (xi, &(mean, sd)) in x.iter_mut().zip(&self.coords) {
            let v = if sd == 0.0 {
                mean
            } else {
                mean + sd * rng.sample::<f64, _>(StandardNormal)
            };
            *xi = yv * v;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Train(TrainDistSpec),
    TestNormal(TestDistSpec),
    RealPair {
        source: String,
        positive_class: u8,
        negative_class: u8,
    },
    Derived(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = samples.first() {
            let d = first.dim();
            if let Some(i) = samples.iter().position(|s| s.dim() != d) {
                return Err(Error::shape(format!(
                    "sample {i} has dimension {} but sample 0 has {d}",
                    samples[i].dim()
                )));
            }
        }
        Ok(LabeledDataset { samples, provenance })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Sample::dim)
    }
}

pub fn sample_train(spec: &TrainDistSpec, count: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let samples = (0..count).map(|_| spec.draw(&mut rng)).collect();
    LabeledDataset::new(samples, Provenance::Train(*spec))
}

pub fn sample_test_normal(spec: &TestDistSpec, count: usize, seed: u64) -> Result<LabeledDataset> {
    let src = NormalSource::new(spec)?;
    if count == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let samples = (0..count).map(|_| src.draw(&mut rng)).collect();
    LabeledDataset::new(samples, Provenance::TestNormal(spec.clone()))
}

/// Raw images of one split, pixels kept as bytes and scaled to `[0, 1]` on access.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub dim: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, i: usize) -> Vec<f64> {
        self.pixels[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect()
    }

    /// All samples whose label byte equals `class`, as scaled feature vectors.
    pub fn class_samples(&self, class: u8) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| self.features(i))
            .collect()
    }

    pub fn class_counts(&self) -> [usize; 256] {
        let mut out = [0usize; 256];
        for &l in &self.labels {
            out[l as usize] += 1;
        }
        out
    }
}

/// The 45 unordered class pairs of ten classes in lexicographic order.
pub fn class_pairs(num_classes: u8) -> Vec<(u8, u8)> {
    let mut out = Vec::new();
    for a in 0..num_classes {
        for b in a + 1..num_classes {
            out.push((a, b));
        }
    }
    out
}
