//! Prompt layout, the masked Gram matrix and the single-layer linear transformer.
//!
//! A prompt is the `(d+1) x (N+1)` matrix whose first `N` columns stack a
//! demonstration `x_n` over its label `y_n`, and whose last column holds the
//! (possibly perturbed) query over a zero placeholder. The transformer output
//! read as the prediction is entry `(d+1, N+1)` of `(1/N) P Z M Z^T Q Z`,
//! where `M` masks the query column out of the attention sum.
//!
//! Only the last row of `P` and the first `d` columns of `Q` influence that
//! entry, which gives the reduced parameterisation `(b, A)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary label `y ∈ {-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "+1")]
    Pos,
    #[serde(rename = "-1")]
    Neg,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    /// Sign with `sign(0) = +1`.
    pub fn from_sign(v: f64) -> Label {
        if v >= 0.0 {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn try_from_value(v: f64) -> Result<Label> {
        if v == 1.0 {
            Ok(Label::Pos)
        } else if v == -1.0 {
            Ok(Label::Neg)
        } else {
            Err(Error::arg(format!("label must be +1 or -1, got {v}")))
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }
}

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Label,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Label) -> Self {
        Sample { x, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// `sign` with the convention `sign(0) = +1`.
#[inline]
pub fn sign_nonneg(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    d: usize,
    n: usize,
    data: DMatrix<f64>,
}

impl PromptMatrix {
    pub fn build(demos: &[Sample], query: &[f64], delta: &[f64]) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::arg("a prompt needs at least one demonstration"));
        }
        let d = query.len();
        if d == 0 {
            return Err(Error::arg("feature dimension must be at least 1"));
        }
        if delta.len() != d {
            return Err(Error::shape(format!(
                "perturbation has length {} but the query has length {d}",
                delta.len()
            )));
        }
        if let Some((i, s)) = demos.iter().enumerate().find(|(_, s)| s.dim() != d) {
            return Err(Error::shape(format!(
                "demonstration {i} has dimension {} but the query has dimension {d}",
                s.dim()
            )));
        }
        let n = demos.len();
        let mut data = DMatrix::<f64>::zeros(d + 1, n + 1);
        for (col, s) in demos.iter().enumerate() {
            let mut c = data.column_mut(col);
            for (i, &v) in s.x.iter().enumerate() {
                c[i] = v;
            }
            c[d] = s.y.value();
        }
        let mut q = data.column_mut(n);
        for i in 0..d {
            q[i] = query[i] + delta[i];
        }
        Ok(PromptMatrix { d, n, data })
    }

    /// Rebuilds a prompt from a raw matrix, checking the layout invariants.
    pub fn from_matrix(data: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = data.shape();
        if rows < 2 || cols < 2 {
            return Err(Error::shape(format!(
                "prompt matrix must be at least 2x2, got {rows}x{cols}"
            )));
        }
        let d = rows - 1;
        let n = cols - 1;
        for col in 0..n {
            Label::try_from_value(data[(d, col)])?;
        }
        if data[(d, n)] != 0.0 {
            return Err(Error::arg("query label placeholder must be 0"));
        }
        Ok(PromptMatrix { d, n, data })
    }

    /// Takes ownership of an already laid-out matrix; callers guarantee the label row is ±1 and the placeholder 0.
    pub(crate) fn from_raw(data: DMatrix<f64>) -> Self {
        let d = data.nrows() - 1;
        let n = data.ncols() - 1;
        PromptMatrix { d, n, data }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn query(&self) -> DVector<f64> {
        self.data.column(self.n).rows(0, self.d).into_owned()
    }

    pub fn label(&self, col: usize) -> Label {
        Label::from_sign(self.data[(self.d, col)])
    }

    /// Same context, query column replaced by `query + delta`.
    pub fn with_query(&self, query: &[f64], delta: &[f64]) -> Result<Self> {
        if query.len() != self.d || delta.len() != self.d {
            return Err(Error::shape(format!(
                "query/perturbation must have length {}",
                self.d
            )));
        }
        let mut out = self.clone();
        let n = self.n;
        for i in 0..self.d {
            out.data[(i, n)] = query[i] + delta[i];
        }
        Ok(out)
    }

    /// Adds `delta` to the current query column.
    pub fn perturb_query(&self, delta: &[f64]) -> Result<Self> {
        let q: Vec<f64> = self.query().iter().copied().collect();
        self.with_query(&q, delta)
    }

    pub fn masked_gram(&self) -> MaskedGram {
        let demos = self.data.columns(0, self.n);
        let g = &demos * demos.transpose() / self.n as f64;
        MaskedGram { g }
    }

    /// `G v` without materialising `G`: `(1/N) Σ_n z_n (z_nᵀ v)`.
    pub fn gram_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(v.len(), self.d + 1);
        let demos = self.data.columns(0, self.n);
        let coeffs = demos.tr_mul(v);
        demos * coeffs / self.n as f64
    }
}

/// A clean prompt together with the true label of its query.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: PromptMatrix,
    pub label: Label,
}

impl Episode {
    pub fn new(demos: &[Sample], query: &Sample) -> Result<Self> {
        let zeros = vec![0.0; query.dim()];
        Ok(Episode {
            prompt: PromptMatrix::build(demos, &query.x, &zeros)?,
            label: query.y,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PromptJson {
    d: usize,
    n: usize,
    data: Vec<Vec<f64>>,
}

impl Serialize for PromptMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PromptJson {
            d: self.d,
            n: self.n,
            data: rows_of(&self.data),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PromptMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = PromptJson::deserialize(de)?;
        let m = matrix_from_rows(&raw.data, raw.d + 1, raw.n + 1).map_err(serde::de::Error::custom)?;
        PromptMatrix::from_matrix(m).map_err(serde::de::Error::custom)
    }
}

/// `G = (1/N) Z M Zᵀ`, the second-moment matrix of the demonstration columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGram {
    g: DMatrix<f64>,
}

impl MaskedGram {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.g.nrows() - 1
    }

    /// Row vector `bᵀ G A`, the effective linear weights applied to the query.
    pub fn weights(&self, rp: &ReducedParams) -> Result<DVector<f64>> {
        rp.check_dim(self.dim())?;
        Ok(rp.a.tr_mul(&(&self.g * &rp.b)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    d: usize,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub regime: Option<String>,
}

impl TransformerParams {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = p.nrows().checked_sub(1).filter(|&d| d >= 1).ok_or_else(|| {
            Error::shape(format!("P must be at least 2x2, got {}x{}", p.nrows(), p.ncols()))
        })?;
        if p.shape() != (d + 1, d + 1) || q.shape() != (d + 1, d + 1) {
            return Err(Error::shape(format!(
                "P and Q must both be {0}x{0}, got {1:?} and {2:?}",
                d + 1,
                p.shape(),
                q.shape()
            )));
        }
        Ok(TransformerParams {
            d,
            p,
            q,
            regime: None,
        })
    }

    pub fn zeros(d: usize) -> Self {
        TransformerParams {
            d,
            p: DMatrix::zeros(d + 1, d + 1),
            q: DMatrix::zeros(d + 1, d + 1),
            regime: None,
        }
    }

    pub fn with_regime(mut self, regime: impl Into<String>) -> Self {
        self.regime = Some(regime.into());
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `P = [0; bᵀ]`, `Q = [A | 0]`.
    pub fn from_reduced(rp: &ReducedParams) -> Self {
        let d = rp.d();
        let mut p = DMatrix::zeros(d + 1, d + 1);
        p.row_mut(d).copy_from(&rp.b.transpose());
        let mut q = DMatrix::zeros(d + 1, d + 1);
        q.columns_mut(0, d).copy_from(&rp.a);
        TransformerParams {
            d,
            p,
            q,
            regime: None,
        }
    }

    /// The entries that determine the prediction: last row of `P`, first `d` columns of `Q`.
    pub fn reduced(&self) -> ReducedParams {
        ReducedParams {
            b: self.p.row(self.d).transpose(),
            a: self.q.columns(0, self.d).into_owned(),
        }
    }

    pub fn in_unit_box(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn clamp_unit(&mut self) {
        self.p.apply(|v| *v = v.clamp(0.0, 1.0));
        self.q.apply(|v| *v = v.clamp(0.0, 1.0));
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::shape(format!(
                "parameters are for d = {} but the input has d = {d}",
                self.d
            )));
        }
        Ok(())
    }

    /// Effective weights `P_{d+1,·} G Q_{·,:d}` for a context, in `O(Nd + d²)`.
    pub fn context_weights(&self, z: &PromptMatrix) -> Result<DVector<f64>> {
        self.check_dim(z.d())?;
        let gb = z.gram_apply(&self.p.row(self.d).transpose());
        Ok(self.q.columns(0, self.d).tr_mul(&gb))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    d: usize,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    regime: Option<String>,
}

impl Serialize for TransformerParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsJson {
            d: self.d,
            p: rows_of(&self.p),
            q: rows_of(&self.q),
            regime: self.regime.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TransformerParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = ParamsJson::deserialize(de)?;
        let p = matrix_from_rows(&raw.p, raw.d + 1, raw.d + 1).map_err(serde::de::Error::custom)?;
        let q = matrix_from_rows(&raw.q, raw.d + 1, raw.d + 1).map_err(serde::de::Error::custom)?;
        let mut out = TransformerParams::new(p, q).map_err(serde::de::Error::custom)?;
        out.regime = raw.regime;
        Ok(out)
    }
}

/// `b` (length `d+1`) and `A` (`(d+1) x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedParams {
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
}

impl ReducedParams {
    pub fn new(b: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let d = a.ncols();
        if d == 0 || b.len() != d + 1 || a.nrows() != d + 1 {
            return Err(Error::shape(format!(
                "b must have length d+1 and A shape (d+1)xd; got |b| = {}, A = {:?}",
                b.len(),
                a.shape()
            )));
        }
        Ok(ReducedParams { b, a })
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.d() != d {
            return Err(Error::shape(format!(
                "reduced parameters are for d = {} but the input has d = {d}",
                self.d()
            )));
        }
        Ok(())
    }
}

/// Entry `(d+1, N+1)` of `(1/N) P Z M Zᵀ Q Z`.
pub fn predict(z: &PromptMatrix, params: &TransformerParams) -> Result<f64> {
    params.check_dim(z.d())?;
    let g = z.masked_gram();
    let last_row = params.p.row(z.d()) * g.matrix();
    let query_col = z.data().column(z.n());
    Ok((last_row * &params.q * query_col)[(0, 0)])
}

/// `bᵀ G A x_query`.
pub fn reduced_predict(rp: &ReducedParams, z: &PromptMatrix) -> Result<f64> {
    let w = z.masked_gram().weights(rp)?;
    Ok(w.dot(&z.query()))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::arg(format!("perturbation budget must be finite and >= 0, got {eps}")));
    }
    Ok(())
}

/// `min_{‖Δ‖∞ ≤ ε} y · prediction`, solved in closed form as `y wᵀx − ε‖w‖₁` with `w = bᵀGA`.
pub fn robust_margin(rp: &ReducedParams, z_clean: &PromptMatrix, y: Label, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let w = z_clean.masked_gram().weights(rp)?;
    Ok(y.value() * w.dot(&z_clean.query()) - eps * w.lp_norm(1))
}

/// `Δ* = −ε y sign(P_{d+1,·} Z M Zᵀ Q_{·,:d})`, with `sign(0) = +1`.
pub fn optimal_attack(
    z_clean: &PromptMatrix,
    y: Label,
    params: &TransformerParams,
    eps: f64,
) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let w = params.context_weights(z_clean)?;
    Ok(attack_from_weights(&w, y, eps))
}

pub(crate) fn attack_from_weights(w: &DVector<f64>, y: Label, eps: f64) -> Vec<f64> {
    if eps == 0.0 {
        return vec![0.0; w.len()];
    }
    let s = -eps * y.value();
    w.iter().map(|&wi| s * sign_nonneg(wi)).collect()
}

/// Context perturbation `x_n ← x_n − ε y_n 1`; labels are untouched.
pub fn adversarial_context(demos: &[Sample], eps: f64) -> Vec<Sample> {
    demos
        .iter()
        .map(|s| {
            let shift = eps * s.y.value();
            Sample {
                x: s.x.iter().map(|v| v - shift).collect(),
                y: s.y,
            }
        })
        .collect()
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::shape(format!("expected a {nrows}x{ncols} matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(x: &[f64], y: Label) -> Sample {
        Sample::new(x.to_vec(), y)
    }

    fn standard(d: usize) -> TransformerParams {
        let mut p = DMatrix::zeros(d + 1, d + 1);
        p.row_mut(d).fill(1.0);
        let mut q = DMatrix::from_element(d + 1, d + 1, 1.0);
        q.column_mut(d).fill(0.0);
        TransformerParams::new(p, q).unwrap()
    }

    #[test]
    fn one_dimensional_layout() {
        let z = PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[1.0], &[0.0]).unwrap();
        assert_eq!(z.data(), &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn two_dimensional_layout() {
        let demos = [s(&[1.0, 0.0], Label::Pos), s(&[0.0, 1.0], Label::Neg)];
        let z = PromptMatrix::build(&demos, &[0.5, 0.5], &[0.1, -0.1]).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.6, 0.0, 1.0, 0.4, 1.0, -1.0, 0.0]);
        assert_abs_diff_eq!(z.data(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_delta_keeps_query() {
        let z = PromptMatrix::build(&[s(&[0.3, 0.7], Label::Neg)], &[0.2, 0.9], &[0.0, 0.0]).unwrap();
        assert_eq!(z.query().as_slice(), &[0.2, 0.9]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(PromptMatrix::build(&[], &[1.0], &[0.0]), Err(Error::Argument(_))));
        assert!(matches!(
            PromptMatrix::build(&[s(&[1.0, 2.0], Label::Pos)], &[1.0], &[0.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[1.0], &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gram_of_single_demo() {
        let z = PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[5.0], &[0.0]).unwrap();
        assert_eq!(z.masked_gram().matrix(), &DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn gram_with_zero_features() {
        let demos = [s(&[0.0], Label::Pos), s(&[0.0], Label::Neg), s(&[0.0], Label::Neg)];
        let z = PromptMatrix::build(&demos, &[3.0], &[0.0]).unwrap();
        assert_eq!(z.masked_gram().matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn hand_evaluated_prediction() {
        let z = PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[1.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(predict(&z, &standard(1)).unwrap(), 4.0, epsilon = 1e-12);
        assert_eq!(predict(&z, &TransformerParams::zeros(1)).unwrap(), 0.0);

        let rp = ReducedParams::new(DVector::from_element(2, 1.0), DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert_abs_diff_eq!(reduced_predict(&rp, &z).unwrap(), 4.0, epsilon = 1e-12);
        let zero_b = ReducedParams::new(DVector::zeros(2), DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert_eq!(reduced_predict(&zero_b, &z).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_margin_and_attack() {
        let z = PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[1.0], &[0.0]).unwrap();
        let rp = ReducedParams::new(DVector::from_element(2, 1.0), DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert_abs_diff_eq!(robust_margin(&rp, &z, Label::Pos, 0.5).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            robust_margin(&rp, &z, Label::Pos, 0.0).unwrap(),
            reduced_predict(&rp, &z).unwrap(),
            epsilon = 1e-12
        );

        let params = standard(1);
        let delta = optimal_attack(&z, Label::Pos, &params, 0.5).unwrap();
        assert_eq!(delta, vec![-0.5]);
        let attacked = z.perturb_query(&delta).unwrap();
        assert_abs_diff_eq!(predict(&attacked, &params).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(optimal_attack(&z, Label::Pos, &params, 0.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn negative_budget_rejected() {
        let z = PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[1.0], &[0.0]).unwrap();
        let params = standard(1);
        assert!(matches!(optimal_attack(&z, Label::Pos, &params, -0.1), Err(Error::Argument(_))));
        assert!(matches!(robust_margin(&params.reduced(), &z, Label::Pos, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn attack_sign_convention_at_zero_weight() {
        let w = DVector::from_vec(vec![0.0, -2.0, 3.0]);
        assert_eq!(attack_from_weights(&w, Label::Pos, 0.1), vec![-0.1, 0.1, -0.1]);
        assert_eq!(attack_from_weights(&w, Label::Neg, 0.1), vec![0.1, -0.1, 0.1]);
    }

    #[test]
    fn adversarial_context_shift() {
        let out = adversarial_context(&[s(&[0.5, 0.5], Label::Pos), s(&[0.5, 0.5], Label::Neg)], 0.1);
        assert_abs_diff_eq!(out[0].x[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1].x[1], 0.6, epsilon = 1e-15);
        assert_eq!(out[0].y, Label::Pos);
        assert_eq!(out[1].y, Label::Neg);
        let same = adversarial_context(&[s(&[0.5, 0.25], Label::Neg)], 0.0);
        assert_eq!(same[0].x, vec![0.5, 0.25]);
    }

    #[test]
    fn shape_mismatch_on_predict() {
        let z = PromptMatrix::build(&[s(&[1.0], Label::Pos)], &[1.0], &[0.0]).unwrap();
        assert!(matches!(predict(&z, &standard(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn json_layout_is_row_major() {
        let demos = [s(&[1.0, 0.0], Label::Pos), s(&[0.0, 1.0], Label::Neg)];
        let z = PromptMatrix::build(&demos, &[0.5, 0.5], &[0.0, 0.0]).unwrap();
        let v = serde_json::to_value(&z).unwrap();
        assert_eq!(v["d"], 2);
        assert_eq!(v["n"], 2);
        assert_eq!(v["data"][2], serde_json::json!([1.0, -1.0, 0.0]));
        let back: PromptMatrix = serde_json::from_value(v).unwrap();
        assert_eq!(back, z);

        let params = standard(2).with_regime("standard");
        let text = serde_json::to_string(&params).unwrap();
        let back: TransformerParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn malformed_prompt_json_rejected() {
        let bad = serde_json::json!({"d": 1, "n": 1, "data": [[1.0, 1.0], [0.5, 0.0]]});
        assert!(serde_json::from_value::<PromptMatrix>(bad).is_err());
    }
}
