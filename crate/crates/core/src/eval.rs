//! Clean and robust accuracy, the Table-1 grid, sweeps, and the trade-off studies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    class_pairs, derive_seed, load_cifar, load_idx, rng_from_seed, LabeledDataset, NormalSource, Preprocessor,
    Provenance, RawDataset, SampleSource, TestDistSpec, TrainDistSpec, TrainMixture,
};
use crate::error::{Error, Result};
use crate::model::{sign_nonneg, Label, Sample, TransformerParams};
use crate::theory::{closed_form_params, Regime};
use crate::training::worker_pool;

/// Running `Σ_n z_n (z_nᵀ b)` over demonstrations `z_n = (x_n, y_n)`.
struct GramAccum<'a> {
    b: &'a [f64],
    sum: Vec<f64>,
    count: usize,
}

impl<'a> GramAccum<'a> {
    fn new(b: &'a [f64]) -> Self {
        GramAccum {
            b,
            sum: vec![0.0; b.len()],
            count: 0,
        }
    }

    fn push(&mut self, x: &[f64], y: f64) {
        let d = x.len();
        let t = x.iter().zip(self.b).map(|(v, b)| v * b).sum::<f64>() + y * self.b[d];
        for (s, v) in self.sum.iter_mut().zip(x) {
            *s += t * v;
        }
        self.sum[d] += t * y;
        self.count += 1;
    }

    fn weights(&self, params: &TransformerParams) -> DVector<f64> {
        let d = params.d();
        let gb = DVector::from_iterator(d + 1, self.sum.iter().map(|s| s / self.count as f64));
        params.q.columns(0, d).tr_mul(&gb)
    }
}

fn last_row(params: &TransformerParams) -> Vec<f64> {
    params.p.row(params.d()).iter().copied().collect()
}

/// Effective query weights for a context given as samples, in one pass over the context.
pub fn context_weights_from_samples(params: &TransformerParams, demos: &[Sample]) -> Result<DVector<f64>> {
    if demos.is_empty() {
        return Err(Error::arg("a context needs at least one demonstration"));
    }
    if let Some(s) = demos.iter().find(|s| s.dim() != params.d()) {
        return Err(Error::shape(format!(
            "demonstration has dimension {} but parameters are for d = {}",
            s.dim(),
            params.d()
        )));
    }
    let b = last_row(params);
    let mut acc = GramAccum::new(&b);
    for s in demos {
        acc.push(&s.x, s.y.value());
    }
    Ok(acc.weights(params))
}

/// One class pair of a real dataset, centred and aligned with statistics of its training split.
#[derive(Debug, Clone)]
pub struct RealPair {
    pub source: String,
    pub classes: (u8, u8),
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl RealPair {
    /// `classes.0` is labelled +1.
    pub fn build(source: &str, train: &RawDataset, test: &RawDataset, classes: (u8, u8)) -> Result<Self> {
        if train.dim != test.dim {
            return Err(Error::shape(format!(
                "train images have {} features, test images {}",
                train.dim, test.dim
            )));
        }
        let (tr0, tr1) = (train.class_samples(classes.0), train.class_samples(classes.1));
        let (te0, te1) = (test.class_samples(classes.0), test.class_samples(classes.1));
        if te0.is_empty() || te1.is_empty() {
            return Err(Error::arg(format!(
                "{source}: test split has no samples of class {} or {}",
                classes.0, classes.1
            )));
        }
        let pre = Preprocessor::fit(&tr0, &tr1)?;
        let provenance = Provenance::RealPair {
            source: source.to_string(),
            positive_class: classes.0,
            negative_class: classes.1,
        };
        Ok(RealPair {
            source: source.to_string(),
            classes,
            train: pre.apply_pair(&tr0, &tr1, provenance.clone())?,
            test: pre.apply_pair(&te0, &te1, provenance)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

#[derive(Debug, Clone)]
pub enum EvalSource {
    /// A fresh robust index per batch.
    TrainMixture { d: usize, lambda: f64 },
    Train(TrainDistSpec),
    TestNormal(TestDistSpec),
    RealPair(Box<RealPair>),
}

impl EvalSource {
    pub fn dim(&self) -> usize {
        match self {
            EvalSource::TrainMixture { d, .. } => *d,
            EvalSource::Train(s) => s.d,
            EvalSource::TestNormal(s) => s.d(),
            EvalSource::RealPair(p) => p.dim(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            EvalSource::TrainMixture { d, lambda } => format!("train mixture d={d} lambda={lambda}"),
            EvalSource::Train(s) => format!("train d={} lambda={} robust_index={}", s.d, s.lambda, s.robust_index),
            EvalSource::TestNormal(s) => format!(
                "test normal rob={} vul={} irr={} alpha={} beta={} gamma={}",
                s.d_rob(),
                s.d_vul(),
                s.d_irr(),
                s.alpha,
                s.beta,
                s.gamma
            ),
            EvalSource::RealPair(p) => format!("{} pair {}-{}", p.source, p.classes.0, p.classes.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalTask {
    pub source: EvalSource,
    /// Demonstrations per context; `None` uses the whole training split of a real pair.
    pub n_demos: Option<usize>,
    pub eps: f64,
    /// Budget of the context shift `x_n ← x_n − ε y_n 1`; zero leaves the context clean.
    pub context_eps: f64,
    pub batches: usize,
    /// Ignored for real pairs, which always query the whole test split.
    pub queries_per_batch: usize,
    pub seed: u64,
    pub workers: usize,
}

impl EvalTask {
    /// Desk-scale defaults: 100 batches of 200 demonstrations and 200 queries.
    pub fn new(source: EvalSource, eps: f64) -> Self {
        let n_demos = match source {
            EvalSource::RealPair(_) => None,
            _ => Some(200),
        };
        EvalTask {
            source,
            n_demos,
            eps,
            context_eps: 0.0,
            batches: 100,
            queries_per_batch: 200,
            seed: 0,
            workers: 1,
        }
    }

    /// 1000 batches of 1000 demonstrations and 1000 queries.
    pub fn full_scale(mut self) -> Self {
        if !matches!(self.source, EvalSource::RealPair(_)) {
            self.n_demos = Some(1000);
        }
        self.batches = 1000;
        self.queries_per_batch = 1000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps", self.eps), ("context eps", self.context_eps)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batches == 0 {
            return Err(Error::arg("at least one batch is required"));
        }
        match &self.source {
            EvalSource::RealPair(p) => {
                if p.train.is_empty() || p.test.is_empty() {
                    return Err(Error::arg("real pair has an empty split"));
                }
            }
            EvalSource::TrainMixture { d, lambda } => TrainDistSpec::new(*d, *lambda, 0).map(|_| ())?,
            EvalSource::Train(s) => s.validate()?,
            EvalSource::TestNormal(s) => s.validate()?,
        }
        if !matches!(self.source, EvalSource::RealPair(_)) {
            if self.n_demos.unwrap_or(0) == 0 {
                return Err(Error::arg("synthetic tasks need at least one demonstration"));
            }
            if self.queries_per_batch == 0 {
                return Err(Error::arg("at least one query per batch is required"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub clean: f64,
    pub robust: f64,
    pub mean_robust_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub classes: (u8, u8),
    pub clean: f64,
    pub robust: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub regime: Option<String>,
    pub task: String,
    pub seed: u64,
    pub eps: f64,
    pub context_eps: f64,
    pub n_demos: Option<usize>,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// Unbiased SD across batches, or across pairs for a multi-pair report.
    pub clean_sd: f64,
    pub robust_sd: f64,
    pub mean_robust_margin: f64,
    pub batches: Vec<BatchResult>,
    pub pairs: Vec<PairResult>,
    pub meta: EvalMeta,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Tallies one query against fixed weights; a zero prediction is wrong for either label.
#[derive(Default)]
struct Tally {
    clean: usize,
    robust: usize,
    margin: f64,
    count: usize,
}

impl Tally {
    fn query(&mut self, w: &DVector<f64>, x: &[f64], y: Label, eps: f64) {
        let yv = y.value();
        let clean: f64 = w.iter().zip(x).map(|(w, v)| w * v).sum();
        let shift = -eps * yv;
        let attacked: f64 = w
            .iter()
            .zip(x)
            .map(|(w, v)| w * (v + if eps == 0.0 { 0.0 } else { shift * sign_nonneg(*w) }))
            .sum();
        self.clean += (yv * clean > 0.0) as usize;
        self.robust += (yv * attacked > 0.0) as usize;
        self.margin += yv * attacked;
        self.count += 1;
    }

    fn result(&self) -> BatchResult {
        let n = self.count as f64;
        BatchResult {
            clean: self.clean as f64 / n,
            robust: self.robust as f64 / n,
            mean_robust_margin: self.margin / n,
        }
    }
}

fn synthetic_batch<S: SampleSource>(
    params: &TransformerParams,
    src: &S,
    task: &EvalTask,
    rng: &mut impl Rng,
) -> BatchResult {
    let d = src.dim();
    let b = last_row(params);
    let mut acc = GramAccum::new(&b);
    let mut x = vec![0.0; d];
    for _ in 0..task.n_demos.unwrap_or(0) {
        let y = src.draw_into(rng, &mut x).value();
        if task.context_eps > 0.0 {
            x.iter_mut().for_each(|v| *v -= task.context_eps * y);
        }
        acc.push(&x, y);
    }
    let w = acc.weights(params);
    let mut tally = Tally::default();
    for _ in 0..task.queries_per_batch {
        let y = src.draw_into(rng, &mut x);
        tally.query(&w, &x, y, task.eps);
    }
    tally.result()
}

fn real_batch(params: &TransformerParams, pair: &RealPair, task: &EvalTask, rng: &mut impl Rng) -> BatchResult {
    let b = last_row(params);
    let mut acc = GramAccum::new(&b);
    let train = &pair.train.samples;
    let mut push = |s: &Sample| {
        if task.context_eps > 0.0 {
            let y = s.y.value();
            let x: Vec<f64> = s.x.iter().map(|v| v - task.context_eps * y).collect();
            acc.push(&x, y);
        } else {
            acc.push(&s.x, s.y.value());
        }
    };
    match task.n_demos {
        None => train.iter().for_each(&mut push),
        Some(n) if n > train.len() => (0..n).for_each(|_| push(&train[rng.random_range(0..train.len())])),
        Some(n) => index::sample(rng, train.len(), n).iter().for_each(|i| push(&train[i])),
    }
    let w = acc.weights(params);
    let mut tally = Tally::default();
    for s in &pair.test.samples {
        tally.query(&w, &s.x, s.y, task.eps);
    }
    tally.result()
}

/// Accuracy of `params` on `task`; batch `i` draws from its own seed, so results do not
/// depend on the worker count.
pub fn evaluate(params: &TransformerParams, task: &EvalTask) -> Result<EvalReport> {
    task.validate()?;
    if params.d() != task.source.dim() {
        return Err(Error::shape(format!(
            "parameters are for d = {} but the task has d = {}",
            params.d(),
            task.source.dim()
        )));
    }
    let normal = match &task.source {
        EvalSource::TestNormal(spec) => Some(NormalSource::new(spec)?),
        _ => None,
    };
    let one = |i: usize| {
        let mut rng = rng_from_seed(derive_seed(task.seed, i as u64));
        match &task.source {
            EvalSource::TrainMixture { d, lambda } => {
                let spec = TrainMixture { d: *d, lambda: *lambda }.pick(&mut rng);
                synthetic_batch(params, &spec, task, &mut rng)
            }
            EvalSource::Train(spec) => synthetic_batch(params, spec, task, &mut rng),
            EvalSource::TestNormal(_) => synthetic_batch(params, normal.as_ref().unwrap(), task, &mut rng),
            EvalSource::RealPair(pair) => real_batch(params, pair, task, &mut rng),
        }
    };
    let batches_needed = match (&task.source, task.n_demos) {
        (EvalSource::RealPair(_), None) => 1,
        _ => task.batches,
    };
    let batches: Vec<BatchResult> = if task.workers > 1 {
        worker_pool(task.workers)?.install(|| (0..batches_needed).into_par_iter().map(one).collect())
    } else {
        (0..batches_needed).map(one).collect()
    };
    let pairs = match &task.source {
        EvalSource::RealPair(p) => vec![PairResult {
            classes: p.classes,
            clean: batches.iter().map(|b| b.clean).sum::<f64>() / batches.len() as f64,
            robust: batches.iter().map(|b| b.robust).sum::<f64>() / batches.len() as f64,
        }],
        _ => Vec::new(),
    };
    Ok(summarize(params, task, batches, pairs))
}

fn summarize(params: &TransformerParams, task: &EvalTask, batches: Vec<BatchResult>, pairs: Vec<PairResult>) -> EvalReport {
    let clean: Vec<f64> = batches.iter().map(|b| b.clean).collect();
    let robust: Vec<f64> = batches.iter().map(|b| b.robust).collect();
    let margins: Vec<f64> = batches.iter().map(|b| b.mean_robust_margin).collect();
    let (clean_accuracy, clean_sd) = mean_sd(&clean);
    let (robust_accuracy, robust_sd) = mean_sd(&robust);
    EvalReport {
        clean_accuracy,
        robust_accuracy,
        clean_sd,
        robust_sd,
        mean_robust_margin: mean_sd(&margins).0,
        meta: EvalMeta {
            regime: params.regime.clone(),
            task: task.source.describe(),
            seed: task.seed,
            eps: task.eps,
            context_eps: task.context_eps,
            n_demos: task.n_demos,
            batches: batches.len(),
        },
        batches,
        pairs,
    }
}

/// Averages over class pairs; the SD is taken across pairs.
pub fn evaluate_pairs(params: &TransformerParams, pairs: &[RealPair], template: &EvalTask) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::arg("no class pairs to evaluate"));
    }
    let mut results = Vec::with_capacity(pairs.len());
    let mut margins = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut task = template.clone();
        task.source = EvalSource::RealPair(Box::new(pair.clone()));
        task.seed = derive_seed(template.seed, i as u64);
        let r = evaluate(params, &task)?;
        results.push(r.pairs[0].clone());
        margins.push(BatchResult {
            clean: r.clean_accuracy,
            robust: r.robust_accuracy,
            mean_robust_margin: r.mean_robust_margin,
        });
    }
    let mut report = summarize(params, template, margins, results);
    report.meta.task = format!("{} ({} pairs)", pairs[0].source, pairs.len());
    Ok(report)
}

/// A loaded dataset split in two, ready to be cut into class pairs.
pub struct RealDataset {
    pub name: String,
    pub train: RawDataset,
    pub test: RawDataset,
}

impl RealDataset {
    pub fn pairs(&self) -> Result<Vec<RealPair>> {
        class_pairs(10)
            .into_iter()
            .map(|c| RealPair::build(&self.name, &self.train, &self.test, c))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RealKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl RealKind {
    pub const ALL: [RealKind; 3] = [RealKind::Mnist, RealKind::FashionMnist, RealKind::Cifar10];

    pub fn name(self) -> &'static str {
        match self {
            RealKind::Mnist => "MNIST",
            RealKind::FashionMnist => "FMNIST",
            RealKind::Cifar10 => "CIFAR10",
        }
    }

    pub fn table_eps(self) -> f64 {
        match self {
            RealKind::Mnist => 0.1,
            RealKind::FashionMnist => 0.15,
            RealKind::Cifar10 => 0.1,
        }
    }

    pub fn subdir(self) -> &'static str {
        match self {
            RealKind::Mnist => "mnist",
            RealKind::FashionMnist => "fashion-mnist",
            RealKind::Cifar10 => "cifar-10-batches-bin",
        }
    }

    /// Train files then test files, relative to `root`.
    pub fn files(self, root: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let dir = root.join(self.subdir());
        match self {
            RealKind::Cifar10 => (
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                vec![dir.join("test_batch.bin")],
            ),
            _ => (
                vec![dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")],
                vec![dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")],
            ),
        }
    }

    /// `Ok(None)` when any expected file is absent.
    pub fn load(self, root: &Path) -> Result<Option<RealDataset>> {
        let (train, test) = self.files(root);
        if train.iter().chain(&test).any(|p| !p.exists()) {
            return Ok(None);
        }
        let (train, test) = match self {
            RealKind::Cifar10 => (load_cifar(&train)?, load_cifar(&test)?),
            _ => (load_idx(&train[0], &train[1])?, load_idx(&test[0], &test[1])?),
        };
        Ok(Some(RealDataset {
            name: self.name().to_string(),
            train,
            test,
        }))
    }
}

impl FromStr for RealKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(RealKind::Mnist),
            "fmnist" | "fashion-mnist" | "fashion_mnist" => Ok(RealKind::FashionMnist),
            "cifar" | "cifar10" | "cifar-10" => Ok(RealKind::Cifar10),
            _ => Err(Error::arg(format!("unknown dataset {s:?}; expected mnist, fmnist or cifar10"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Config {
    pub data_dir: PathBuf,
    pub seed: u64,
    pub batches: usize,
    pub queries_per_batch: usize,
    pub n_demos: usize,
    pub workers: usize,
}

impl Table1Config {
    pub fn full_scale(data_dir: PathBuf) -> Self {
        Table1Config {
            data_dir,
            seed: 0,
            batches: 1000,
            queries_per_batch: 1000,
            n_demos: 1000,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Column {
    pub name: String,
    pub eps: f64,
    /// `None` when the column was skipped.
    pub standard: Option<EvalReport>,
    pub adversarial: Option<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Table1Report {
    pub columns: Vec<Table1Column>,
    pub warnings: Vec<String>,
}

pub const TABLE1_TRAIN_EPS: f64 = 0.15;
pub const TABLE1_TEST_EPS: f64 = 0.2;

/// The synthetic test distribution of the table: 10 robust and 90 vulnerable normal features.
pub fn table1_test_spec() -> TestDistSpec {
    TestDistSpec::blocks(10, 90, 0, 1.0, 0.1, 1.0).expect("valid constants")
}

fn column_pair(
    name: &str,
    eps: f64,
    run: impl Fn(&TransformerParams) -> Result<EvalReport>,
    d: usize,
) -> Result<Table1Column> {
    Ok(Table1Column {
        name: name.to_string(),
        eps,
        standard: Some(run(&closed_form_params(Regime::Standard, d)?)?),
        adversarial: Some(run(&closed_form_params(Regime::Adversarial, d)?)?),
    })
}

/// Standard and adversarial closed forms on the two synthetic and three real columns.
pub fn run_table1(cfg: &Table1Config) -> Result<Table1Report> {
    let mut columns = Vec::new();
    let mut warnings = Vec::new();
    let synth = |source: EvalSource, eps: f64| EvalTask {
        source,
        n_demos: Some(cfg.n_demos),
        eps,
        context_eps: 0.0,
        batches: cfg.batches,
        queries_per_batch: cfg.queries_per_batch,
        seed: cfg.seed,
        workers: cfg.workers,
    };

    let tr = synth(EvalSource::TrainMixture { d: 100, lambda: 0.1 }, TABLE1_TRAIN_EPS);
    columns.push(column_pair("D^tr", TABLE1_TRAIN_EPS, |p| evaluate(p, &tr), 100)?);
    let te = synth(EvalSource::TestNormal(table1_test_spec()), TABLE1_TEST_EPS);
    columns.push(column_pair("D^te", TABLE1_TEST_EPS, |p| evaluate(p, &te), 100)?);

    for kind in RealKind::ALL {
        let eps = kind.table_eps();
        let Some(ds) = kind.load(&cfg.data_dir)? else {
            warnings.push(format!(
                "{}: files not found under {}, column skipped",
                kind.name(),
                cfg.data_dir.join(kind.subdir()).display()
            ));
            columns.push(Table1Column {
                name: kind.name().to_string(),
                eps,
                standard: None,
                adversarial: None,
            });
            continue;
        };
        let pairs = ds.pairs()?;
        let mut template = EvalTask::new(EvalSource::RealPair(Box::new(pairs[0].clone())), eps);
        template.seed = cfg.seed;
        template.workers = cfg.workers;
        columns.push(column_pair(kind.name(), eps, |p| evaluate_pairs(p, &pairs, &template), ds.train.dim)?);
    }
    Ok(Table1Report { columns, warnings })
}

impl Table1Report {
    pub fn column(&self, name: &str) -> Option<&Table1Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Two rows, one column per task, cells `clean / robust` in percent.
    pub fn to_text(&self) -> String {
        let cell = |r: &Option<EvalReport>| match r {
            Some(r) => format!("{:.1} / {:.1}", 100.0 * r.clean_accuracy, 100.0 * r.robust_accuracy),
            None => "n/a".to_string(),
        };
        let mut out = format!("{:<12}", "");
        for c in &self.columns {
            let _ = write!(out, "{:>18}", format!("{} (eps={})", c.name, c.eps));
        }
        out.push('\n');
        for (label, pick) in [("Standard", 0), ("Adversarial", 1)] {
            let _ = write!(out, "{label:<12}");
            for c in &self.columns {
                let r = if pick == 0 { &c.standard } else { &c.adversarial };
                let _ = write!(out, "{:>18}", cell(r));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,model,eps,clean,clean_sd,robust,robust_sd,mean_robust_margin,status\n");
        for c in &self.columns {
            for (model, r) in [("standard", &c.standard), ("adversarial", &c.adversarial)] {
                match r {
                    Some(r) => {
                        let _ = writeln!(
                            out,
                            "{},{model},{},{},{},{},{},{},ok",
                            c.name,
                            c.eps,
                            r.clean_accuracy,
                            r.clean_sd,
                            r.robust_accuracy,
                            r.robust_sd,
                            r.mean_robust_margin
                        );
                    }
                    None => {
                        let _ = writeln!(out, "{},{model},{},,,,,,skipped", c.name, c.eps);
                    }
                }
            }
        }
        out
    }

    /// Per-pair rows for the real columns.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("task,model,class_pos,class_neg,clean,robust\n");
        for c in &self.columns {
            for (model, r) in [("standard", &c.standard), ("adversarial", &c.adversarial)] {
                for p in r.iter().flat_map(|r| &r.pairs) {
                    let _ = writeln!(out, "{},{model},{},{},{},{}", c.name, p.classes.0, p.classes.1, p.clean, p.robust);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    DVul,
    DRob,
    DIrr,
    N,
    Eps,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d_vul" | "dvul" => Ok(SweepAxis::DVul),
            "d_rob" | "drob" => Ok(SweepAxis::DRob),
            "d_irr" | "dirr" => Ok(SweepAxis::DIrr),
            "n" => Ok(SweepAxis::N),
            "eps" => Ok(SweepAxis::Eps),
            _ => Err(Error::arg(format!("unknown sweep axis {s:?}; expected d_vul, d_rob, d_irr, N or eps"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub model: String,
    pub clean_mean: f64,
    pub clean_sd: f64,
    pub robust_mean: f64,
    pub robust_sd: f64,
}

fn count_value(axis: SweepAxis, v: f64, min: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < min as f64 || !v.is_finite() {
        return Err(Error::arg(format!("{axis:?} values must be integers >= {min}, got {v}")));
    }
    Ok(v as usize)
}

fn with_axis(base: &EvalTask, axis: SweepAxis, v: f64) -> Result<EvalTask> {
    let mut task = base.clone();
    match axis {
        SweepAxis::Eps => {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("eps values must be finite and >= 0, got {v}")));
            }
            task.eps = v;
        }
        SweepAxis::N => task.n_demos = Some(count_value(axis, v, 1)?),
        SweepAxis::DVul | SweepAxis::DRob | SweepAxis::DIrr => {
            let EvalSource::TestNormal(spec) = &base.source else {
                return Err(Error::arg("dimension sweeps need a normal test-distribution base task"));
            };
            let (mut rob, mut vul, mut irr) = (spec.d_rob(), spec.d_vul(), spec.d_irr());
            match axis {
                SweepAxis::DVul => vul = count_value(axis, v, 0)?,
                SweepAxis::DRob => rob = count_value(axis, v, 0)?,
                _ => irr = count_value(axis, v, 0)?,
            }
            let spec = TestDistSpec::blocks(rob, vul, irr, spec.alpha, spec.beta, spec.gamma)?;
            task.source = EvalSource::TestNormal(spec);
        }
    }
    Ok(task)
}

/// Both closed forms at every axis value, mean and SD across batches.
pub fn sweep(base: &EvalTask, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::arg("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    for &v in values {
        let task = with_axis(base, axis, v)?;
        for regime in [Regime::Standard, Regime::Adversarial] {
            let params = closed_form_params(regime, task.source.dim())?;
            let r = evaluate(&params, &task)?;
            rows.push(SweepRow {
                axis_value: v,
                model: regime.short_name().to_string(),
                clean_mean: r.clean_accuracy,
                clean_sd: r.clean_sd,
                robust_mean: r.robust_accuracy,
                robust_sd: r.robust_sd,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis_value,model,clean_mean,clean_sd,robust_mean,robust_sd\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.axis_value, r.model, r.clean_mean, r.clean_sd, r.robust_mean, r.robust_sd
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Two-point robust feature: `y x_1 = α` with probability `p`, else `−α`; `y x_i = β` for `i ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSpec {
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d: usize,
    pub n_demos: usize,
    pub trials: usize,
}

impl TradeoffSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.5 && self.p <= 1.0) {
            return Err(Error::arg(format!("p must lie in (0.5, 1], got {}", self.p)));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::arg("alpha and beta must be positive"));
        }
        if self.d < 2 || self.n_demos == 0 || self.trials == 0 {
            return Err(Error::arg("need d >= 2, at least one demonstration and one trial"));
        }
        Ok(())
    }

    /// `E[y x] = ((2p − 1)α, β, …, β)`.
    pub fn mean_yx(&self) -> Vec<f64> {
        let mut m = vec![self.beta; self.d];
        m[0] = (2.0 * self.p - 1.0) * self.alpha;
        m
    }
}

impl SampleSource for TradeoffSpec {
    fn dim(&self) -> usize {
        self.d
    }

    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) -> Label {
        let y = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
        let yv = y.value();
        let aligned = rng.random::<f64>() < self.p;
        x[0] = yv * if aligned { self.alpha } else { -self.alpha };
        x[1..].iter_mut().for_each(|v| *v = yv * self.beta);
        y
    }
}

/// `E_query[y · prediction]` for a fixed context, computed from the known mean of `y x`.
pub fn expected_query_margin(params: &TransformerParams, demos: &[Sample], spec: &TradeoffSpec) -> Result<f64> {
    if spec.d != params.d() {
        return Err(Error::shape(format!("spec has d = {} but parameters have d = {}", spec.d, params.d())));
    }
    let w = context_weights_from_samples(params, demos)?;
    Ok(w.iter().zip(spec.mean_yx()).map(|(w, m)| w * m).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    /// `y · prediction` per trial.
    pub margins: Vec<f64>,
    pub accuracy: f64,
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl MarginSummary {
    fn from_margins(margins: Vec<f64>) -> Self {
        let positive = margins.iter().filter(|&&m| m > 0.0).count();
        let negative = margins.iter().filter(|&&m| m < 0.0).count();
        MarginSummary {
            accuracy: positive as f64 / margins.len() as f64,
            zero: margins.len() - positive - negative,
            positive,
            negative,
            margins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub spec: TradeoffSpec,
    pub standard: MarginSummary,
    pub adversarial: MarginSummary,
}

fn draw_demos<S: SampleSource>(src: &S, n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    (0..n).map(|_| src.draw(rng)).collect()
}

/// One fresh context and query per trial, shared by both closed forms.
pub fn tradeoff_experiment(spec: &TradeoffSpec, seed: u64) -> Result<TradeoffReport> {
    spec.validate()?;
    let std = closed_form_params(Regime::Standard, spec.d)?;
    let adv = closed_form_params(Regime::Adversarial, spec.d)?;
    let mut std_m = Vec::with_capacity(spec.trials);
    let mut adv_m = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let demos = draw_demos(spec, spec.n_demos, &mut rng);
        let q = spec.draw(&mut rng);
        for (params, out) in [(&std, &mut std_m), (&adv, &mut adv_m)] {
            let w = context_weights_from_samples(params, &demos)?;
            out.push(q.y.value() * w.iter().zip(&q.x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
    Ok(TradeoffReport {
        spec: *spec,
        standard: MarginSummary::from_margins(std_m),
        adversarial: MarginSummary::from_margins(adv_m),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeRow {
    pub n_demos: usize,
    /// `1 − e^{−pN}`.
    pub bound: f64,
    pub standard_fraction: f64,
    pub adversarial_fraction: f64,
}

/// Fraction of contexts whose expected query margin is positive, per context size.
pub fn sample_size_study(spec: &TradeoffSpec, sizes: &[usize], seed: u64) -> Result<Vec<SampleSizeRow>> {
    let std = closed_form_params(Regime::Standard, spec.d)?;
    let adv = closed_form_params(Regime::Adversarial, spec.d)?;
    let mut rows = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let s = TradeoffSpec { n_demos: n, ..*spec };
        s.validate()?;
        let (mut pos_std, mut pos_adv) = (0usize, 0usize);
        for t in 0..s.trials {
            let mut rng = rng_from_seed(derive_seed(derive_seed(seed, k as u64), t as u64));
            let demos = draw_demos(&s, n, &mut rng);
            pos_std += (expected_query_margin(&std, &demos, &s)? > 0.0) as usize;
            pos_adv += (expected_query_margin(&adv, &demos, &s)? > 0.0) as usize;
        }
        rows.push(SampleSizeRow {
            n_demos: n,
            bound: 1.0 - (-s.p * n as f64).exp(),
            standard_fraction: pos_std as f64 / s.trials as f64,
            adversarial_fraction: pos_adv as f64 / s.trials as f64,
        });
    }
    Ok(rows)
}

/// Every demonstration shifted by `−ε y_n 1` and the query optimally attacked at the same `ε`.
pub fn adversarial_context_eval(
    params: &TransformerParams,
    spec: &TrainDistSpec,
    eps: f64,
    n_demos: usize,
    batches: usize,
    queries_per_batch: usize,
    seed: u64,
) -> Result<EvalReport> {
    let task = EvalTask {
        source: EvalSource::Train(*spec),
        n_demos: Some(n_demos),
        eps,
        context_eps: eps,
        batches,
        queries_per_batch,
        seed,
        workers: 1,
    };
    evaluate(params, &task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{optimal_attack, predict, PromptMatrix};

    fn small_task(source: EvalSource, eps: f64) -> EvalTask {
        let mut t = EvalTask::new(source, eps);
        t.batches = 20;
        t.n_demos = Some(100);
        t.queries_per_batch = 50;
        t
    }

    #[test]
    fn streaming_weights_match_model() {
        let spec = TrainDistSpec::new(4, 0.3, 2).unwrap();
        let mut rng = rng_from_seed(3);
        let demos = draw_demos(&spec, 17, &mut rng);
        let mut params = TransformerParams::zeros(4);
        params.p.iter_mut().chain(params.q.iter_mut()).for_each(|v| *v = rng.random());
        let z = PromptMatrix::build(&demos, &[0.0; 4], &[0.0; 4]).unwrap();
        let want = params.context_weights(&z).unwrap();
        let got = context_weights_from_samples(&params, &demos).unwrap();
        assert!((want - got).amax() < 1e-12);
    }

    #[test]
    fn tally_matches_literal_attack() {
        let spec = TrainDistSpec::new(5, 0.4, 0).unwrap();
        let params = closed_form_params(Regime::Standard, 5).unwrap();
        let mut rng = rng_from_seed(9);
        let demos = draw_demos(&spec, 30, &mut rng);
        let w = context_weights_from_samples(&params, &demos).unwrap();
        for _ in 0..20 {
            let q = spec.draw(&mut rng);
            let z = PromptMatrix::build(&demos, &q.x, &[0.0; 5]).unwrap();
            let delta = optimal_attack(&z, q.y, &params, 0.3).unwrap();
            let attacked = predict(&z.perturb_query(&delta).unwrap(), &params).unwrap();
            let mut t = Tally::default();
            t.query(&w, &q.x, q.y, 0.3);
            assert!((t.margin - q.y.value() * attacked).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_params_score_zero() {
        let task = small_task(EvalSource::TrainMixture { d: 5, lambda: 0.1 }, 0.1);
        let r = evaluate(&TransformerParams::zeros(5), &task).unwrap();
        assert_eq!(r.clean_accuracy, 0.0);
        assert_eq!(r.robust_accuracy, 0.0);
    }

    #[test]
    fn zero_budget_robust_equals_clean() {
        let spec = TestDistSpec::blocks(2, 5, 3, 1.0, 0.1, 1.0).unwrap();
        let task = small_task(EvalSource::TestNormal(spec), 0.0);
        let r = evaluate(&closed_form_params(Regime::Standard, 10).unwrap(), &task).unwrap();
        assert_eq!(r.batches.iter().map(|b| b.clean).collect::<Vec<_>>(), r.batches.iter().map(|b| b.robust).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_across_workers() {
        let mut task = small_task(EvalSource::TrainMixture { d: 8, lambda: 0.2 }, 0.1);
        let params = closed_form_params(Regime::Adversarial, 8).unwrap();
        let one = evaluate(&params, &task).unwrap();
        task.workers = 3;
        assert_eq!(one, evaluate(&params, &task).unwrap());
    }

    #[test]
    fn table1_train_column() {
        let mut task = small_task(EvalSource::TrainMixture { d: 100, lambda: 0.1 }, 0.15);
        task.n_demos = Some(200);
        let std = evaluate(&closed_form_params(Regime::Standard, 100).unwrap(), &task).unwrap();
        let adv = evaluate(&closed_form_params(Regime::Adversarial, 100).unwrap(), &task).unwrap();
        assert!(std.clean_accuracy > 0.98 && std.robust_accuracy < 0.02, "{std:?}");
        assert!(adv.clean_accuracy > 0.98 && adv.robust_accuracy > 0.98, "{adv:?}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let task = small_task(EvalSource::TrainMixture { d: 5, lambda: 0.1 }, 0.1);
        assert!(evaluate(&TransformerParams::zeros(4), &task).unwrap_err().is_validation());
    }

    #[test]
    fn sweep_rows_and_csv() {
        let spec = TestDistSpec::blocks(2, 4, 0, 1.0, 0.1, 1.0).unwrap();
        let base = small_task(EvalSource::TestNormal(spec), 0.0);
        let rows = sweep(&base, SweepAxis::DIrr, &[0.0, 3.0]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(sweep_csv(&rows).starts_with("axis_value,model,clean_mean,clean_sd,robust_mean,robust_sd\n"));
        assert!(sweep(&base, SweepAxis::N, &[2.5]).is_err());
        assert!(sweep(&base, SweepAxis::Eps, &[-0.1]).is_err());
        let eps0 = sweep(&base, SweepAxis::Eps, &[0.0]).unwrap();
        assert!(eps0.iter().all(|r| r.clean_mean == r.robust_mean));
    }

    #[test]
    fn tradeoff_two_query_states() {
        let spec = TradeoffSpec {
            p: 0.8,
            alpha: 1.0,
            beta: 0.1,
            d: 21,
            n_demos: 50,
            trials: 1,
        };
        let mut rng = rng_from_seed(1);
        let demos = draw_demos(&spec, 50, &mut rng);
        let params = closed_form_params(Regime::Standard, 21).unwrap();
        let w = context_weights_from_samples(&params, &demos).unwrap();
        let mut seen: Vec<f64> = Vec::new();
        for _ in 0..200 {
            let q = spec.draw(&mut rng);
            let m = q.y.value() * w.iter().zip(&q.x).map(|(w, v)| w * v).sum::<f64>();
            if !seen.iter().any(|s| (s - m).abs() < 1e-12) {
                seen.push(m);
            }
        }
        assert_eq!(seen.len(), 2);
        let zeros = TransformerParams::zeros(21);
        assert_eq!(expected_query_margin(&zeros, &demos, &spec).unwrap(), 0.0);
    }

    #[test]
    fn tradeoff_degenerate_p_one() {
        let spec = TradeoffSpec {
            p: 1.0,
            alpha: 1.0,
            beta: 0.1,
            d: 21,
            n_demos: 20,
            trials: 200,
        };
        let r = tradeoff_experiment(&spec, 0).unwrap();
        assert_eq!(r.standard.accuracy, 1.0);
        assert_eq!(r.adversarial.accuracy, 1.0);
        assert!(TradeoffSpec { p: 0.5, ..spec }.validate().is_err());
    }

    #[test]
    fn adversarial_context_at_zero_matches_clean() {
        let spec = TrainDistSpec::new(6, 0.1, 2).unwrap();
        let params = closed_form_params(Regime::Standard, 6).unwrap();
        let a = adversarial_context_eval(&params, &spec, 0.0, 50, 5, 20, 4).unwrap();
        let mut task = EvalTask::new(EvalSource::Train(spec), 0.0);
        (task.n_demos, task.batches, task.queries_per_batch, task.seed) = (Some(50), 5, 20, 4);
        assert_eq!(a, evaluate(&params, &task).unwrap());
    }

    fn raw(dim: usize, rows: &[(&[u8], u8)]) -> RawDataset {
        RawDataset {
            dim,
            pixels: rows.iter().flat_map(|(p, _)| p.iter().copied()).collect(),
            labels: rows.iter().map(|(_, l)| *l).collect(),
        }
    }

    #[test]
    fn real_pair_uses_train_statistics() {
        let train = raw(2, &[(&[255, 0], 0), (&[0, 255], 1), (&[200, 0], 0), (&[10, 220], 1)]);
        let test = raw(2, &[(&[230, 10], 0), (&[5, 240], 1)]);
        let pair = RealPair::build("toy", &train, &test, (0, 1)).unwrap();
        assert_eq!(pair.train.len(), 4);
        assert_eq!(pair.test.len(), 2);
        let task = EvalTask::new(EvalSource::RealPair(Box::new(pair.clone())), 0.0);
        let r = evaluate(&closed_form_params(Regime::Adversarial, 2).unwrap(), &task).unwrap();
        assert_eq!(r.clean_accuracy, 1.0);
        assert_eq!(r.batches.len(), 1);
        assert!(RealPair::build("toy", &train, &raw(2, &[(&[1, 1], 0)]), (0, 1)).is_err());
    }

    #[test]
    fn missing_real_files_skip_column() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RealKind::Mnist.load(dir.path()).unwrap().is_none());
        let cfg = Table1Config {
            data_dir: dir.path().to_path_buf(),
            seed: 0,
            batches: 2,
            queries_per_batch: 20,
            n_demos: 50,
            workers: 1,
        };
        let rep = run_table1(&cfg).unwrap();
        assert_eq!(rep.columns.len(), 5);
        assert_eq!(rep.warnings.len(), 3);
        assert!(rep.column("MNIST").unwrap().standard.is_none());
        assert!(rep.to_text().contains("n/a"));
        assert_eq!(rep.to_csv().lines().count(), 11);
    }
}
