//! Closed-form optima, regime thresholds and the combinatorial score they come from.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ReducedParams, TransformerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Standard,
    Adversarial,
    StrongAdversarial,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Standard, Regime::Adversarial, Regime::StrongAdversarial];

    pub fn short_name(self) -> &'static str {
        match self {
            Regime::Standard => "std",
            Regime::Adversarial => "adv",
            Regime::StrongAdversarial => "strong",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "std" | "standard" => Ok(Regime::Standard),
            "adv" | "adversarial" => Ok(Regime::Adversarial),
            "strong" | "strong-adversarial" | "strongadversarial" => Ok(Regime::StrongAdversarial),
            _ => Err(Error::arg(format!("unknown regime {s:?}; expected std, adv or strong"))),
        }
    }
}

pub fn closed_form_params(regime: Regime, d: usize) -> Result<TransformerParams> {
    if d == 0 {
        return Err(Error::arg("d must be at least 1"));
    }
    let mut out = TransformerParams::zeros(d);
    match regime {
        Regime::Standard => {
            out.p.row_mut(d).fill(1.0);
            out.q.columns_mut(0, d).fill(1.0);
        }
        Regime::Adversarial => {
            out.p.row_mut(d).fill(1.0);
            for i in 0..d {
                out.q[(i, i)] = 1.0;
            }
        }
        Regime::StrongAdversarial => {}
    }
    Ok(out.with_regime(regime.short_name()))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::arg(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

fn check_d(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::arg("d must be at least 1"));
    }
    Ok(())
}

/// Budgets at which each `r` coefficient (and `s5(d, 1)`) changes sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonThresholds {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub eps4: f64,
    pub eps5: f64,
    pub eps6: f64,
    pub eps7: f64,
    pub eps_s5: f64,
}

impl EpsilonThresholds {
    /// In the order they are expected to increase.
    pub fn ordered(&self) -> [(&'static str, f64); 8] {
        [
            ("eps2", self.eps2),
            ("eps6", self.eps6),
            ("eps4", self.eps4),
            ("eps_s5", self.eps_s5),
            ("eps7", self.eps7),
            ("eps5", self.eps5),
            ("eps3", self.eps3),
            ("eps1", self.eps1),
        ]
    }

    pub fn is_ordered(&self) -> bool {
        self.ordered().windows(2).all(|w| w[0].1 <= w[1].1)
    }

    /// The regime whose closed form minimises the adversarial loss at budget `eps`.
    pub fn regime_for(&self, eps: f64) -> Regime {
        if eps < self.eps_s5.min(self.eps7) {
            Regime::Standard
        } else if eps < self.eps1 {
            Regime::Adversarial
        } else {
            Regime::StrongAdversarial
        }
    }
}

pub fn epsilon_thresholds(d: usize, lambda: f64) -> Result<EpsilonThresholds> {
    check_d(d)?;
    check_lambda(lambda)?;
    let l = lambda;
    let l2 = l * l;
    let df = d as f64;
    let eps_s5_num = 3.0 * df * df * l2 - 8.0 * df * l2 + 24.0 * df * l + 4.0 * l2 - 34.0 * l + 48.0;
    let eps_s5_den = 3.0 * df * df * l2 - 5.0 * df * l2 + 18.0 * df * l + 2.0 * l2 - 18.0 * l + 24.0;
    Ok(EpsilonThresholds {
        eps1: (l * l2 * (df - 1.0) + 6.0) / (2.0 * (l2 * (df - 1.0) + 3.0)),
        eps2: l * (l2 * (df - 2.0) + 2.0 * l + 3.0) / (2.0 * (l2 * (df - 1.0) + 3.0)),
        eps3: (l2 * (df - 1.0) + 4.0) / (2.0 * (l * (df - 1.0) + 2.0)),
        eps4: l * (l * (df - 2.0) + 4.0) / (2.0 * (l * (df - 1.0) + 2.0)),
        eps5: (l2 * (df - 2.0) + 2.0 * l + 4.0) / (2.0 * (l * (df - 2.0) + 4.0)),
        eps6: l * (l * (df - 3.0) + 6.0) / (2.0 * (l * (df - 2.0) + 4.0)),
        eps7: (l * (df - 1.0) + 2.0) / (2.0 * df),
        eps_s5: l / 2.0 * eps_s5_num / eps_s5_den,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsCoefficients {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub r5: f64,
    pub r6: f64,
    pub r7: f64,
}

pub fn rs_coefficients(d: usize, lambda: f64, eps: f64) -> Result<RsCoefficients> {
    check_d(d)?;
    check_lambda(lambda)?;
    let l = lambda;
    let df = d as f64;
    let ep = 1.0 - eps;
    let em = l / 2.0 - eps;
    let l2_3 = l * l / 3.0;
    let l2_4 = l * l / 4.0;
    let h = l / 2.0;
    Ok(RsCoefficients {
        r1: ep + l2_3 * (df - 1.0) * em,
        r2: em + l2_3 * ep + l2_3 * (df - 2.0) * em,
        r3: ep + h * (df - 1.0) * em,
        r4: em + h * ep + h * (df - 2.0) * em,
        r5: h * ep + h * em + l2_4 * (df - 2.0) * em,
        r6: l * em + l2_4 * ep + l2_4 * (df - 3.0) * em,
        r7: ep + (df - 1.0) * em,
    })
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Arguments of the hinge for one entry of `A`, given which of its row `j` and
/// column `k` fall inside the selected prefix.
#[derive(Debug, Clone, Copy)]
struct EntryArgs<'a> {
    r: &'a RsCoefficients,
    d_prime: f64,
    b_last: f64,
}

impl EntryArgs<'_> {
    /// Label row of `A`.
    fn label_row(&self, k_in: bool) -> f64 {
        let k = k_in as u8 as f64;
        self.b_last * self.r.r7 + k * self.r.r3 + (self.d_prime - k) * self.r.r4
    }

    fn diagonal(&self, j_in: bool) -> f64 {
        let j = j_in as u8 as f64;
        self.b_last * self.r.r3 + j * self.r.r1 + (self.d_prime - j) * self.r.r5
    }

    fn off_diagonal(&self, j_in: bool, k_in: bool) -> f64 {
        let j = j_in as u8 as f64;
        let k = k_in as u8 as f64;
        self.b_last * self.r.r4 + j * self.r.r2 + k * self.r.r5 + (self.d_prime - j - k) * self.r.r6
    }
}

fn check_selection(d_prime: usize, b_last: u8, d: usize) -> Result<()> {
    if d_prime > d {
        return Err(Error::arg(format!("d' = {d_prime} exceeds d = {d}")));
    }
    if b_last > 1 {
        return Err(Error::arg(format!("b_last must be 0 or 1, got {b_last}")));
    }
    Ok(())
}

/// The eight hinge terms `s1..s8` at `(d', b_last)`.
pub fn s_terms(d_prime: usize, b_last: u8, d: usize, lambda: f64, eps: f64) -> Result<[f64; 8]> {
    check_selection(d_prime, b_last, d)?;
    let r = rs_coefficients(d, lambda, eps)?;
    let e = EntryArgs {
        r: &r,
        d_prime: d_prime as f64,
        b_last: b_last as f64,
    };
    Ok([
        e.label_row(true),
        e.label_row(false),
        e.diagonal(true),
        e.diagonal(false),
        e.off_diagonal(true, true),
        e.off_diagonal(true, false),
        e.off_diagonal(false, true),
        e.off_diagonal(false, false),
    ])
}

pub fn score(d_prime: usize, b_last: u8, d: usize, lambda: f64, eps: f64) -> Result<f64> {
    let s = s_terms(d_prime, b_last, d, lambda, eps)?;
    let dp = d_prime as f64;
    let rest = (d - d_prime) as f64;
    let mult = [
        dp,
        rest,
        dp,
        rest,
        dp * (dp - 1.0).max(0.0),
        dp * rest,
        dp * rest,
        rest * (rest - 1.0).max(0.0),
    ];
    Ok(mult.iter().zip(s).map(|(m, v)| if *m == 0.0 { 0.0 } else { m * relu(v) }).sum())
}

fn activation_tol(d: usize) -> f64 {
    1e-12 * (d as f64 + 1.0)
}

/// `b` is a prefix of `d'` ones plus `b_last`; each entry of `A` is 1 exactly when its hinge
/// argument is strictly positive (beyond rounding), so zero-valued ties map to 0.
pub fn map_to_params(d_prime: usize, b_last: u8, d: usize, lambda: f64, eps: f64) -> Result<(ReducedParams, TransformerParams)> {
    check_selection(d_prime, b_last, d)?;
    let r = rs_coefficients(d, lambda, eps)?;
    let e = EntryArgs {
        r: &r,
        d_prime: d_prime as f64,
        b_last: b_last as f64,
    };
    let tol = activation_tol(d);
    let on = |v: f64| if v > tol { 1.0 } else { 0.0 };

    let mut b = DVector::zeros(d + 1);
    for i in 0..d_prime {
        b[i] = 1.0;
    }
    b[d] = b_last as f64;

    let a = DMatrix::from_fn(d + 1, d, |j, k| {
        let k_in = k < d_prime;
        let j_in = j < d_prime;
        if j == d {
            on(e.label_row(k_in))
        } else if j == k {
            on(e.diagonal(j_in))
        } else {
            on(e.off_diagonal(j_in, k_in))
        }
    });
    let rp = ReducedParams::new(b, a)?;
    let tp = TransformerParams::from_reduced(&rp);
    Ok((rp, tp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub d_prime: usize,
    pub b_last: u8,
    pub score: f64,
    pub reduced: ReducedParams,
    pub params: TransformerParams,
}

/// Maximises the score over `(d', b_last)`; ties go to larger `d'`, then larger `b_last`.
/// When no configuration scores above zero every candidate is the zero predictor and
/// `(0, 0)` is returned.
pub fn brute_force_optimum(d: usize, lambda: f64, eps: f64) -> Result<Optimum> {
    let mut best: Option<(usize, u8, f64)> = None;
    for d_prime in 0..=d {
        for b_last in 0..=1u8 {
            let v = score(d_prime, b_last, d, lambda, eps)?;
            let tol = 1e-12 * (1.0 + v.abs());
            match best {
                Some((_, _, bv)) if v < bv - tol => {}
                Some((_, _, bv)) if v <= bv + tol => best = Some((d_prime, b_last, v.max(bv))),
                _ => best = Some((d_prime, b_last, v)),
            }
        }
    }
    let (mut d_prime, mut b_last, value) = best.expect("nonempty search space");
    if value <= activation_tol(d) * (d as f64 + 1.0) {
        d_prime = 0;
        b_last = 0;
    }
    let (reduced, params) = map_to_params(d_prime, b_last, d, lambda, eps)?;
    Ok(Optimum {
        d_prime,
        b_last,
        score: value.max(0.0),
        reduced,
        params,
    })
}

/// `E[G | c]` for one demonstration (exact for any `N`) and `E[y x | c]`, with `c` zero-based.
pub fn conditional_moments(d: usize, lambda: f64, c: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut mean_yx = DVector::from_element(d, lambda / 2.0);
    mean_yx[c] = 1.0;
    let g = DMatrix::from_fn(d + 1, d + 1, |i, j| match (i == d, j == d) {
        (true, true) => 1.0,
        (true, false) => mean_yx[j],
        (false, true) => mean_yx[i],
        (false, false) if i == j && i == c => 1.0,
        (false, false) if i == j => lambda * lambda / 3.0,
        (false, false) => mean_yx[i] * mean_yx[j],
    });
    (g, mean_yx)
}

/// `H[(i, j)][k] = Σ_c E[G|c]_{ij} (E[y x_k|c] − ε)`, stored as `d+1` matrices over `(j, k)`.
fn population_tensor(d: usize, lambda: f64, eps: f64) -> Vec<DMatrix<f64>> {
    let mut h = vec![DMatrix::zeros(d + 1, d); d + 1];
    for c in 0..d {
        let (g, m) = conditional_moments(d, lambda, c);
        for (i, hi) in h.iter_mut().enumerate() {
            for j in 0..=d {
                for k in 0..d {
                    hi[(j, k)] += g[(i, j)] * (m[k] - eps);
                }
            }
        }
    }
    h
}

/// `Σ_{j,k} φ(Σ_i b_i H_ijk)` for an arbitrary 0/1 vector `b` of length `d+1`.
pub fn population_objective(b: &[u8], d: usize, lambda: f64, eps: f64) -> Result<f64> {
    check_d(d)?;
    check_lambda(lambda)?;
    if b.len() != d + 1 {
        return Err(Error::shape(format!("b must have length {}, got {}", d + 1, b.len())));
    }
    let h = population_tensor(d, lambda, eps);
    Ok(objective_from_tensor(&h, b))
}

fn objective_from_tensor(h: &[DMatrix<f64>], b: &[u8]) -> f64 {
    let mut acc = DMatrix::zeros(h[0].nrows(), h[0].ncols());
    for (hi, &bi) in h.iter().zip(b) {
        if bi != 0 {
            acc += hi;
        }
    }
    acc.iter().map(|&v| relu(v)).sum()
}

/// Enumerates all `2^{d+1}` binary `b`, without the prefix reduction. Returns the best
/// objective value and a maximising `b`.
pub fn exhaustive_optimum(d: usize, lambda: f64, eps: f64) -> Result<(f64, Vec<u8>)> {
    check_d(d)?;
    check_lambda(lambda)?;
    if d > 12 {
        return Err(Error::arg(format!("exhaustive search is limited to d <= 12, got {d}")));
    }
    let h = population_tensor(d, lambda, eps);
    let mut best = (f64::NEG_INFINITY, vec![0u8; d + 1]);
    for mask in 0u32..(1 << (d + 1)) {
        let b: Vec<u8> = (0..=d).map(|i| ((mask >> i) & 1) as u8).collect();
        let v = objective_from_tensor(&h, &b);
        if v > best.0 {
            best = (v, b);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    StdLinear,
    AdvLinear(usize),
    OracleArgmax,
}

fn sign_label(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// Warm-up linear classifiers; `AdvLinear` holds a zero-based index.
pub fn baseline_predict(kind: Baseline, x: &[f64]) -> Result<i8> {
    if x.is_empty() {
        return Err(Error::shape("empty feature vector"));
    }
    match kind {
        Baseline::StdLinear => Ok(sign_label(x.iter().sum())),
        Baseline::AdvLinear(c) => x
            .get(c)
            .map(|&v| sign_label(v))
            .ok_or_else(|| Error::shape(format!("index {c} out of range for dimension {}", x.len()))),
        Baseline::OracleArgmax => {
            let mut best = 0;
            for (i, v) in x.iter().enumerate() {
                if v.abs() > x[best].abs() {
                    best = i;
                }
            }
            Ok(sign_label(x[best]))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub d_prime: usize,
    pub b_last: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub d: usize,
    pub lambda: f64,
    pub eps: f64,
    pub thresholds: EpsilonThresholds,
    pub coefficients: RsCoefficients,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn compute(d: usize, lambda: f64, eps: f64) -> Result<Self> {
        let mut rows = Vec::with_capacity(2 * (d + 1));
        for d_prime in 0..=d {
            for b_last in 0..=1u8 {
                rows.push(ScoreRow {
                    d_prime,
                    b_last,
                    score: score(d_prime, b_last, d, lambda, eps)?,
                });
            }
        }
        Ok(ScoreTable {
            d,
            lambda,
            eps,
            thresholds: epsilon_thresholds(d, lambda)?,
            coefficients: rs_coefficients(d, lambda, eps)?,
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_prime,b_last,score\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.d_prime, r.b_last, r.score));
        }
        out
    }

    /// Writes `<stem>.csv` and the `<stem>.json` sidecar (thresholds and coefficients).
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json_path = csv_path.with_extension("json");
        #[derive(Serialize)]
        struct Sidecar<'a> {
            d: usize,
            lambda: f64,
            eps: f64,
            thresholds: &'a EpsilonThresholds,
            coefficients: &'a RsCoefficients,
        }
        let side = Sidecar {
            d: self.d,
            lambda: self.lambda,
            eps: self.eps,
            thresholds: &self.thresholds,
            coefficients: &self.coefficients,
        };
        let text = serde_json::to_string_pretty(&side)?;
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }
}
