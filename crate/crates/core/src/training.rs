//! Projected momentum SGD on the attacked in-context loss.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, rng_from_seed, sample_episode, TrainDistSpec, TrainMixture};
use crate::error::{Error, Result};
use crate::model::{attack_from_weights, predict, Episode, TransformerParams};
use crate::theory::{closed_form_params, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TrainMode {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "P_only")]
    POnly,
    #[serde(rename = "Q_only")]
    QOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "P_only" | "p_only" | "p-only" => Ok(TrainMode::POnly),
            "Q_only" | "q_only" | "q-only" => Ok(TrainMode::QOnly),
            _ => Err(Error::arg(format!("unknown mode {s:?}; expected full, P_only or Q_only"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Every entry equal to the scale.
    #[default]
    Constant,
    /// Entries i.i.d. `U[0, scale]`.
    Uniform,
}

/// Entries that reach the prediction (last row of `P`, first `d` columns of `Q`) are
/// initialised according to `kind` and `active_scale`; the rest start at zero unless
/// `randomize_inert` is set, in which case they are initialised the same way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub kind: InitKind,
    pub active_scale: f64,
    pub randomize_inert: bool,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            kind: InitKind::Constant,
            active_scale: 0.01,
            randomize_inert: false,
        }
    }
}

impl InitSpec {
    pub fn build(&self, d: usize, seed: u64) -> TransformerParams {
        let mut rng = rng_from_seed(seed);
        let mut out = TransformerParams::zeros(d);
        let scale = self.active_scale;
        for i in 0..=d {
            for j in 0..=d {
                let active_p = i == d;
                let active_q = j < d;
                let (vp, vq) = match self.kind {
                    InitKind::Constant => (scale, scale),
                    InitKind::Uniform => (rng.random::<f64>() * scale, rng.random::<f64>() * scale),
                };
                if active_p || self.randomize_inert {
                    out.p[(i, j)] = vp;
                }
                if active_q || self.randomize_inert {
                    out.q[(i, j)] = vq;
                }
            }
        }
        out.clamp_unit();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    pub lambda: f64,
    pub eps: f64,
    #[serde(rename = "N")]
    pub n_demos: usize,
    pub datasets_per_step: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub init: InitSpec,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 20,
            lambda: 0.1,
            eps: 0.0,
            n_demos: 1000,
            datasets_per_step: 1000,
            steps: 100,
            learning_rate: 0.1,
            momentum: 0.9,
            plateau_patience: 10,
            plateau_factor: 0.1,
            plateau_threshold: 1e-4,
            seed: 0,
            mode: TrainMode::Full,
            init: InitSpec::default(),
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        TrainDistSpec::new(self.d, self.lambda, 0)?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.n_demos == 0 || self.datasets_per_step == 0 {
            return Err(Error::arg("N and datasets_per_step must be at least 1"));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::arg(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::arg(format!("plateau factor must lie in (0, 1], got {}", self.plateau_factor)));
        }
        if self.init.active_scale < 0.0 || self.init.active_scale > 1.0 {
            return Err(Error::arg("init scale must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub lr_changes: Vec<(usize, f64)>,
    pub distances: Vec<(Regime, f64)>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn distance_to(&self, regime: Regime) -> Option<f64> {
        self.distances.iter().find(|(r, _)| *r == regime).map(|(_, v)| *v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "step,loss,lr").map_err(io)?;
        for s in &self.steps {
            writeln!(f, "{},{},{}", s.step, s.loss, s.lr).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Batch loss and its gradient with the attack held at the values in `attacks`.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub grad_p: DMatrix<f64>,
    pub grad_q: DMatrix<f64>,
    pub attacks: Vec<Vec<f64>>,
}

struct Accum {
    loss: f64,
    grad_b: DVector<f64>,
    grad_a: DMatrix<f64>,
}

impl Accum {
    fn zeros(d: usize) -> Self {
        Accum {
            loss: 0.0,
            grad_b: DVector::zeros(d + 1),
            grad_a: DMatrix::zeros(d + 1, d),
        }
    }

    fn add(&mut self, other: &Accum) {
        self.loss += other.loss;
        self.grad_b += &other.grad_b;
        self.grad_a += &other.grad_a;
    }
}

/// Adds `−y · prediction` on the attacked query and its gradient; returns the attack.
fn accumulate(params: &TransformerParams, ep: &Episode, eps: f64, acc: &mut Accum) -> Vec<f64> {
    let d = params.d();
    let z = &ep.prompt;
    let b = params.p.row(d).transpose();
    let a = params.q.columns(0, d);
    let gb = z.gram_apply(&b);
    let w = a.tr_mul(&gb);
    let y = ep.label.value();
    let delta = attack_from_weights(&w, ep.label, eps);
    let mut xq = z.query();
    for (v, dv) in xq.iter_mut().zip(&delta) {
        *v += dv;
    }
    acc.loss -= y * w.dot(&xq);
    let ax = a * &xq;
    let gax = z.gram_apply(&ax);
    acc.grad_b.axpy(-y, &gax, 1.0);
    acc.grad_a.ger(-y, &gb, &xq, 1.0);
    delta
}

fn full_gradients(d: usize, acc: &Accum, scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut gp = DMatrix::zeros(d + 1, d + 1);
    gp.row_mut(d).copy_from(&(acc.grad_b.transpose() * scale));
    let mut gq = DMatrix::zeros(d + 1, d + 1);
    gq.columns_mut(0, d).copy_from(&(&acc.grad_a * scale));
    (gp, gq)
}

fn check_batch(params: &TransformerParams, episodes: &[Episode]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if let Some(ep) = episodes.iter().find(|e| e.prompt.d() != params.d()) {
        return Err(Error::shape(format!(
            "episode has d = {} but parameters have d = {}",
            ep.prompt.d(),
            params.d()
        )));
    }
    Ok(())
}

/// Mean over the batch of `−y · prediction` at the optimal attack, with its gradient.
pub fn loss_and_gradient(params: &TransformerParams, episodes: &[Episode], eps: f64) -> Result<BatchEval> {
    check_batch(params, episodes)?;
    if !(eps >= 0.0) {
        return Err(Error::arg(format!("eps must be >= 0, got {eps}")));
    }
    let d = params.d();
    let mut acc = Accum::zeros(d);
    let attacks = episodes.iter().map(|ep| accumulate(params, ep, eps, &mut acc)).collect();
    let scale = 1.0 / episodes.len() as f64;
    let (grad_p, grad_q) = full_gradients(d, &acc, scale);
    Ok(BatchEval {
        loss: acc.loss * scale,
        grad_p,
        grad_q,
        attacks,
    })
}

pub fn in_context_loss(params: &TransformerParams, episodes: &[Episode], eps: f64) -> Result<f64> {
    Ok(loss_and_gradient(params, episodes, eps)?.loss)
}

/// Batch loss with caller-supplied perturbations, evaluated through the full `P Z M Zᵀ Q Z` product.
pub fn loss_with_fixed_attack(params: &TransformerParams, episodes: &[Episode], attacks: &[Vec<f64>]) -> Result<f64> {
    check_batch(params, episodes)?;
    if attacks.len() != episodes.len() {
        return Err(Error::shape(format!("{} attacks for {} episodes", attacks.len(), episodes.len())));
    }
    let mut total = 0.0;
    for (ep, delta) in episodes.iter().zip(attacks) {
        let z = ep.prompt.perturb_query(delta)?;
        total -= ep.label.value() * predict(&z, params)?;
    }
    Ok(total / episodes.len() as f64)
}

pub fn param_distance(a: &TransformerParams, b: &TransformerParams) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::shape(format!("cannot compare d = {} with d = {}", a.d(), b.d())));
    }
    Ok(a.p
        .iter()
        .zip(b.p.iter())
        .chain(a.q.iter().zip(b.q.iter()))
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

pub fn regime_distances(params: &TransformerParams) -> Vec<(Regime, f64)> {
    Regime::ALL
        .iter()
        .map(|&r| {
            let cf = closed_form_params(r, params.d()).expect("d >= 1");
            (r, param_distance(params, &cf).expect("same d"))
        })
        .collect()
}

/// Moving average over `window` steps; `None` if fewer losses than that.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || losses.len() < window {
        return Vec::new();
    }
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// First step index at which the smoothed loss has risen for `max_run` consecutive steps.
pub fn persistent_increase(losses: &[f64], window: usize, max_run: usize) -> Option<usize> {
    let s = smoothed(losses, window);
    let mut run = 0;
    for (i, pair) in s.windows(2).enumerate() {
        if pair[1] > pair[0] {
            run += 1;
            if run >= max_run {
                return Some(i + window);
            }
        } else {
            run = 0;
        }
    }
    None
}

const CHUNK: usize = 25;

#[derive(Debug, Clone, Copy)]
enum Source {
    Mixture(TrainMixture),
    Fixed(TrainDistSpec),
}

impl Source {
    fn spec<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainDistSpec {
        match self {
            Source::Mixture(m) => m.pick(rng),
            Source::Fixed(s) => *s,
        }
    }
}

/// Fresh datasets for one step; each dataset gets its own derived seed so the result does
/// not depend on how chunks are scheduled across threads.
fn step_accum(params: &TransformerParams, source: Source, cfg: &TrainConfig, step: usize) -> Accum {
    let d = params.d();
    let step_seed = derive_seed(cfg.seed, step as u64);
    let chunks = cfg.datasets_per_step.div_ceil(CHUNK);
    let run_chunk = |ci: usize| {
        let mut acc = Accum::zeros(d);
        let end = ((ci + 1) * CHUNK).min(cfg.datasets_per_step);
        for i in ci * CHUNK..end {
            let mut rng = rng_from_seed(derive_seed(step_seed, i as u64));
            let spec = source.spec(&mut rng);
            let ep = sample_episode(&spec, cfg.n_demos, &mut rng);
            accumulate(params, &ep, cfg.eps, &mut acc);
        }
        acc
    };
    let parts: Vec<Accum> = if cfg.workers > 1 {
        (0..chunks).into_par_iter().map(run_chunk).collect()
    } else {
        (0..chunks).map(run_chunk).collect()
    };
    let mut total = Accum::zeros(d);
    for p in &parts {
        total.add(p);
    }
    total
}

pub(crate) fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::arg(format!("cannot start worker pool: {e}")))
}

fn run(start: TransformerParams, cfg: &TrainConfig, source: Source) -> Result<(TransformerParams, TrainHistory)> {
    cfg.validate()?;
    if start.d() != cfg.d {
        return Err(Error::shape(format!("start parameters have d = {}, config has d = {}", start.d(), cfg.d)));
    }
    let pool = worker_pool(cfg.workers)?;

    let d = cfg.d;
    let mut params = start;
    let mut vel_p = DMatrix::zeros(d + 1, d + 1);
    let mut vel_q = DMatrix::zeros(d + 1, d + 1);
    let mut lr = cfg.learning_rate;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut history = TrainHistory::default();

    for step in 0..cfg.steps {
        let acc = pool.install(|| step_accum(&params, source, cfg, step));
        let scale = 1.0 / cfg.datasets_per_step as f64;
        let loss = acc.loss * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        history.steps.push(StepRecord { step, loss, lr });

        let (mut gp, mut gq) = full_gradients(d, &acc, scale);
        match cfg.mode {
            TrainMode::Full => {}
            TrainMode::POnly => gq.fill(0.0),
            TrainMode::QOnly => gp.fill(0.0),
        }
        vel_p = &vel_p * cfg.momentum + &gp;
        vel_q = &vel_q * cfg.momentum + &gq;
        if cfg.mode != TrainMode::QOnly {
            params.p -= &vel_p * lr;
        }
        if cfg.mode != TrainMode::POnly {
            params.q -= &vel_q * lr;
        }
        params.clamp_unit();

        if loss < best - cfg.plateau_threshold {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                stale = 0;
                history.lr_changes.push((step, lr));
            }
        }
    }

    let losses = history.losses();
    let max_run = 3 * cfg.plateau_patience.max(1);
    if let Some(step) = persistent_increase(&losses, 10, max_run) {
        return Err(Error::Diverged {
            step,
            loss: losses[step],
        });
    }
    history.distances = regime_distances(&params);
    Ok((params, history))
}

/// Trains from the configured initialisation on the mixture over robust indices.
pub fn train(cfg: &TrainConfig) -> Result<(TransformerParams, TrainHistory)> {
    cfg.validate()?;
    let start = cfg.init.build(cfg.d, derive_seed(cfg.seed, u64::MAX));
    let mix = TrainMixture {
        d: cfg.d,
        lambda: cfg.lambda,
    };
    run(start, cfg, Source::Mixture(mix))
}

/// Clean training on one downstream distribution, updating only `P` or only `Q`.
pub fn finetune(
    start: &TransformerParams,
    mode: TrainMode,
    downstream: &TrainDistSpec,
    cfg: &TrainConfig,
) -> Result<(TransformerParams, TrainHistory)> {
    if mode == TrainMode::Full {
        return Err(Error::arg("finetuning updates either P or Q, not both"));
    }
    downstream.validate()?;
    let cfg = TrainConfig {
        d: downstream.d,
        lambda: downstream.lambda,
        eps: 0.0,
        mode,
        ..cfg.clone()
    };
    run(start.clone(), &cfg, Source::Fixed(*downstream))
}
