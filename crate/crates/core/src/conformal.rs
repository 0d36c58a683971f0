//! Split conformal calibration and the resulting tracking-error bounds.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::koopman_id;
use crate::lifting::{Decoder, LiftedModel};
use crate::linalg::{self, compensated_sum, CompensatedSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    ForwardNfc,
    ForwardCrdr,
    RoundTrip,
}

impl ScoreKind {
    pub fn label(self) -> &'static str {
        match self {
            ScoreKind::ForwardNfc => "forward_nfc",
            ScoreKind::ForwardCrdr => "forward_crdr",
            ScoreKind::RoundTrip => "round_trip",
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub score_kind: ScoreKind,
    pub scores_sorted: Vec<f64>,
    pub delta: f64,
    /// 1-based order statistic; may exceed `scores_sorted.len()`.
    pub k_index: usize,
    /// `+∞` when `k_index > m`.
    #[serde(with = "extended_float")]
    pub q: f64,
}

impl CalibrationResult {
    pub fn m(&self) -> usize {
        self.scores_sorted.len()
    }

    pub const CSV_HEADER: &'static str = "kind,delta,m,k_index,q";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.score_kind, self.delta, self.m(), self.k_index, fmt_float(self.q))
    }
}

/// Writes one row per calibration result under the standard header.
pub fn write_calibration_csv(path: &Path, results: &[CalibrationResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(CalibrationResult::CSV_HEADER);
    text.push('\n');
    for r in results {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Serializes non-finite values as the strings `"inf"`, `"-inf"` and `"NaN"` so JSON stays valid.
pub(crate) mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(super::fmt_float(*v)).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "NaN" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("invalid float {t:?}"))),
            },
        }
    }
}

/// `⌈(m+1)(1−δ)⌉`, snapping products within a few ulps of an integer.
pub fn conformal_k_index(m: usize, delta: f64) -> usize {
    let v = (m as f64 + 1.0) * (1.0 - delta);
    let r = v.round();
    if (v - r).abs() <= 8.0 * f64::EPSILON * v.abs().max(1.0) {
        r as usize
    } else {
        v.ceil() as usize
    }
}

pub fn conformal_quantile(scores: &[f64], delta: f64, kind: ScoreKind) -> Result<CalibrationResult> {
    if scores.is_empty() {
        return Err(Error::input("conformal_quantile: no calibration scores"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::input(format!("conformal_quantile: δ must lie in (0,1), got {delta}")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::input(format!("conformal_quantile: non-finite score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = conformal_k_index(sorted.len(), delta);
    let q = if k == 0 {
        sorted[0]
    } else if k <= sorted.len() {
        sorted[k - 1]
    } else {
        f64::INFINITY
    };
    Ok(CalibrationResult { score_kind: kind, scores_sorted: sorted, delta, k_index: k, q })
}

/// One quantile per time step instead of one pooled bag.
pub fn conformal_quantile_per_step(
    scores_by_step: &[Vec<f64>],
    delta: f64,
    kind: ScoreKind,
) -> Result<Vec<CalibrationResult>> {
    scores_by_step.iter().map(|s| conformal_quantile(s, delta, kind)).collect()
}

/// `‖r(x_k, u_k, x_{k+1}) − r(x_{d,k}, u_{d,k}, x_{d,k+1})‖` with `r` the lifted one-step residual.
pub fn forward_score_nfc(
    model: &LiftedModel,
    x: &[f64],
    x_next: &[f64],
    u: &[f64],
    x_d: &[f64],
    x_d_next: &[f64],
    u_d: &[f64],
) -> Result<f64> {
    let actual = koopman_id::residual(model, x, u, x_next)?;
    let reference = koopman_id::residual(model, x_d, u_d, x_d_next)?;
    Ok((actual - reference).norm())
}

/// `√m̄ Δd + Δv`.
pub fn forward_score_crdr(delta_d: f64, delta_v: f64, m_bar: f64) -> f64 {
    m_bar.sqrt() * delta_d + delta_v
}

/// `‖x − ψ(ĝ(x))‖`.
pub fn round_trip_score(model: &LiftedModel, x: &[f64]) -> Result<f64> {
    crate::lifting::round_trip_residual(&model.dictionary, &model.decoder, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Nfc,
    Crdr,
}

/// Asymptotic latent radius of the bound for either controller.
pub fn delta_r(kind: BoundKind, q: f64, gamma: f64, rho: f64, m_bar: f64, m_under: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::input(format!("delta_r: γ must lie in (0,1), got {gamma}")));
    }
    if !(m_under > 0.0) {
        return Err(Error::input("delta_r: m_under must be positive"));
    }
    let denom = (1.0 - gamma) * m_under.sqrt();
    Ok(match kind {
        BoundKind::Nfc => m_bar.sqrt() * q / denom,
        BoundKind::Crdr => (q - rho) / denom,
    })
}

/// `ε_j = γ^j (v0/√m̲ − Δr) + Δr` for `j = 0..=K`.
pub fn latent_bound_profile(v0: f64, gamma: f64, horizon: usize, delta_r: f64, m_under: f64) -> Vec<f64> {
    let gap = v0 / m_under.sqrt() - delta_r;
    let mut pow = 1.0;
    (0..=horizon)
        .map(|_| {
            let e = pow * gap + delta_r;
            pow *= gamma;
            e
        })
        .collect()
}

/// Bound on `‖e_K‖` driven by the realized slack history `Δv_0..Δv_{K−1}`.
pub fn trajectory_bound(
    v0: f64,
    gamma: f64,
    rho: f64,
    m_bar: f64,
    m_under: f64,
    q: f64,
    delta_v_history: &[f64],
) -> Result<f64> {
    let k = delta_v_history.len();
    if k == 0 {
        return Err(Error::input("trajectory_bound: empty slack history"));
    }
    if !(gamma > 0.0 && gamma < 1.0 && m_under > 0.0) {
        return Err(Error::input("trajectory_bound: need γ ∈ (0,1) and m_under > 0"));
    }
    let gk = gamma.powi(k as i32);
    let mut acc = CompensatedSum::new();
    acc.add(gk * v0);
    acc.add((1.0 - gk) / (1.0 - gamma) * (m_bar.sqrt() * q - rho));
    let mut w = 1.0;
    for dv in delta_v_history.iter().rev() {
        acc.add(w * dv);
        w *= gamma;
    }
    Ok(acc.value() / m_under.sqrt())
}

/// Running bound for every prefix of the slack history: entry `j` bounds `‖e_j‖`, entry 0 is `v0/√m̲`.
pub fn trajectory_bound_series(
    v0: f64,
    gamma: f64,
    rho: f64,
    m_bar: f64,
    m_under: f64,
    q: f64,
    delta_v_history: &[f64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(delta_v_history.len() + 1);
    out.push(v0 / m_under.sqrt());
    for j in 1..=delta_v_history.len() {
        out.push(trajectory_bound(v0, gamma, rho, m_bar, m_under, q, &delta_v_history[..j])?);
    }
    Ok(out)
}

/// `2 q_rt + L ε`.
pub fn state_bound(q_rt: f64, lipschitz: f64, epsilon: f64) -> f64 {
    2.0 * q_rt + lipschitz * epsilon
}

pub fn union_bound_delta(alpha: f64, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::input("union_bound_delta: horizon must be ≥ 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::input(format!("union_bound_delta: α must lie in (0,1), got {alpha}")));
    }
    Ok(alpha / horizon as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    /// True for linear decoders (operator norm); false for the sampled estimate.
    pub exact: bool,
}

pub fn estimate_lipschitz(
    decoder: &Decoder,
    samples: &[(DVector<f64>, DVector<f64>)],
    safety: f64,
) -> Result<LipschitzEstimate> {
    if let Some(w) = decoder.linear_weights() {
        return Ok(LipschitzEstimate { value: linalg::operator_norm(&w)?, exact: true });
    }
    if samples.len() < 2 {
        return Err(Error::input("estimate_lipschitz: need at least 2 sample pairs"));
    }
    if !(safety >= 1.0) {
        return Err(Error::input("estimate_lipschitz: safety factor must be ≥ 1"));
    }
    let mut best: Option<f64> = None;
    for (z1, z2) in samples {
        let dz = (z1 - z2).norm();
        if dz == 0.0 {
            continue;
        }
        let dx = (decoder.decode(z1)? - decoder.decode(z2)?).norm();
        let r = dx / dz;
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    }
    let value = best.ok_or_else(|| Error::input("estimate_lipschitz: all sample pairs coincide"))?;
    Ok(LipschitzEstimate { value: safety * value, exact: false })
}

pub fn empirical_coverage(q: f64, test_scores: &[f64]) -> Result<f64> {
    if test_scores.is_empty() {
        return Err(Error::input("empirical_coverage: no test scores"));
    }
    let covered = test_scores.iter().filter(|s| **s <= q).count();
    Ok(covered as f64 / test_scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundProfile {
    pub horizon: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta_r: f64,
    pub epsilon: Vec<f64>,
    pub state_bound: Option<Vec<f64>>,
    pub lipschitz: f64,
    pub q_rt: f64,
    pub v0: f64,
}

impl BoundProfile {
    pub fn new(
        v0: f64,
        gamma: f64,
        horizon: usize,
        delta_r: f64,
        m_under: f64,
        alpha: f64,
        beta: f64,
    ) -> Self {
        Self {
            horizon,
            alpha,
            beta,
            delta_r,
            epsilon: latent_bound_profile(v0, gamma, horizon, delta_r, m_under),
            state_bound: None,
            lipschitz: f64::NAN,
            q_rt: f64::NAN,
            v0,
        }
    }

    pub fn with_state_bound(mut self, q_rt: f64, lipschitz: f64) -> Self {
        self.state_bound = Some(self.epsilon.iter().map(|e| state_bound(q_rt, lipschitz, *e)).collect());
        self.q_rt = q_rt;
        self.lipschitz = lipschitz;
        self
    }

    /// Probability label of the state-space bound.
    pub fn confidence(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub const CSV_HEADER: &'static str = "k,epsilon,state_bound";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(Self::CSV_HEADER);
        text.push('\n');
        for (k, e) in self.epsilon.iter().enumerate() {
            let sb = self.state_bound.as_ref().map_or("NA".to_string(), |s| fmt_float(s[k]));
            text.push_str(&format!("{k},{},{sb}\n", fmt_float(*e)));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mean of a slice, compensated.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Checks a latent error against a bound profile entry-wise and returns the worst margin (bound − error).
pub fn worst_margin(errors: &[f64], bound: &[f64]) -> Result<f64> {
    check_len("bound profile", bound.len(), errors.len())?;
    Ok(errors
        .iter()
        .zip(bound)
        .map(|(e, b)| b - e)
        .fold(f64::INFINITY, f64::min))
}
