//! Verdicts on logged rollouts: bound satisfaction, held-out coverage,
//! the NFC/CRDR comparison and the sampled contraction check.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{CalibrationFile, Quantile};
use crate::conformal::{empirical_coverage, ScoreKind};
use crate::contraction::{verify_contraction, ContractionReport};
use crate::controller::{nfc_input, ControllerSpec};
use crate::dubins::{dubins_step, DubinsState};
use crate::error::{Error, Result};
use crate::lifting::LiftedModel;
use crate::rollout::{ControllerKind, StepRecord, TrajectoryLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    /// `‖e_k‖ ≤ ε_k`.
    Latent,
    /// `‖e_k‖` against the slack-history bound.
    Trajectory,
    /// Position error against `2 q_rt + L·bound`.
    State,
}

impl BoundName {
    pub fn label(self) -> &'static str {
        match self {
            BoundName::Latent => "latent",
            BoundName::Trajectory => "trajectory",
            BoundName::State => "state",
        }
    }

    fn pair(self, r: &StepRecord) -> Option<(f64, f64)> {
        match self {
            BoundName::Latent => r.eps_k.map(|b| (r.e_norm, b)),
            BoundName::Trajectory => r.traj_bound.map(|b| (r.e_norm, b)),
            BoundName::State => r.state_bound.map(|b| (r.pos_err, b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound: BoundName,
    pub controller: ControllerKind,
    pub runs: usize,
    pub pairs: usize,
    pub violations: usize,
    /// Fraction of `(run, step)` pairs inside the bound.
    pub fraction_within_bound: f64,
    pub runs_all_within: usize,
    pub fraction_runs_within: f64,
    pub target: f64,
    pub pass: bool,
    /// Per-run flag, in log order: every step inside the bound.
    pub run_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCheck {
    pub kind: ScoreKind,
    pub delta: f64,
    pub q: Quantile,
    pub heldout: usize,
    pub empirical_coverage: f64,
    pub target: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pairs: usize,
    pub nfc_worse: usize,
    pub nfc_worse_fraction: f64,
    pub nfc_saturated: usize,
    pub nfc_saturated_fraction: f64,
    pub crdr_saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub runs: usize,
    pub failed_runs: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `1 − α`.
    pub target: f64,
    /// `1 − α − β`.
    pub state_target: f64,
    pub bounds: Vec<BoundCheck>,
    pub coverage: Vec<CoverageCheck>,
    pub comparison: Option<Comparison>,
    pub contraction: Option<ContractionReport>,
    pub pass: bool,
}

/// Bound checks per controller and bound; runs without a logged bound are skipped.
/// Aborted runs count as not within.
pub fn check_bounds(logs: &[TrajectoryLog], alpha: f64, beta: f64) -> Vec<BoundCheck> {
    let mut out = Vec::new();
    for controller in [ControllerKind::Crdr, ControllerKind::Nfc] {
        for bound in [BoundName::Latent, BoundName::Trajectory, BoundName::State] {
            let target = match bound {
                BoundName::State => 1.0 - alpha - beta,
                _ => 1.0 - alpha,
            };
            let mut pairs = 0;
            let mut violations = 0;
            let mut run_flags = Vec::new();
            for log in logs.iter().filter(|l| l.controller == controller) {
                let checked: Vec<(f64, f64)> = log.records.iter().filter_map(|r| bound.pair(r)).collect();
                if checked.is_empty() {
                    continue;
                }
                let bad = checked.iter().filter(|(e, b)| !(e <= b)).count();
                pairs += checked.len();
                violations += bad;
                run_flags.push(bad == 0 && !log.failed);
            }
            if run_flags.is_empty() {
                continue;
            }
            let runs_all_within = run_flags.iter().filter(|f| **f).count();
            let fraction_runs_within = runs_all_within as f64 / run_flags.len() as f64;
            out.push(BoundCheck {
                bound,
                controller,
                runs: run_flags.len(),
                pairs,
                violations,
                fraction_within_bound: (pairs - violations) as f64 / pairs as f64,
                runs_all_within,
                fraction_runs_within,
                target,
                pass: fraction_runs_within >= target,
                run_flags,
            });
        }
    }
    out
}

/// Pairs runs by seed and compares terminal position errors.
pub fn compare_controllers(logs: &[TrajectoryLog]) -> Option<Comparison> {
    let mut by_seed: BTreeMap<u64, (Option<&TrajectoryLog>, Option<&TrajectoryLog>)> = BTreeMap::new();
    for log in logs {
        let slot = by_seed.entry(log.seed).or_default();
        match log.controller {
            ControllerKind::Nfc => slot.0 = Some(log),
            ControllerKind::Crdr => slot.1 = Some(log),
        }
    }
    let mut pairs = 0;
    let mut nfc_worse = 0;
    let mut nfc_saturated = 0;
    let mut crdr_saturated = 0;
    for (nfc, crdr) in by_seed.values() {
        let (Some(nfc), Some(crdr)) = (nfc, crdr) else { continue };
        pairs += 1;
        let n = nfc.terminal_position_error().unwrap_or(f64::NAN);
        let c = crdr.terminal_position_error().unwrap_or(f64::NAN);
        if nfc.failed || !(n <= c) {
            nfc_worse += 1;
        }
        nfc_saturated += (nfc.saturation_count() > 0) as usize;
        crdr_saturated += (crdr.saturation_count() > 0) as usize;
    }
    (pairs > 0).then(|| Comparison {
        pairs,
        nfc_worse,
        nfc_worse_fraction: nfc_worse as f64 / pairs as f64,
        nfc_saturated,
        nfc_saturated_fraction: nfc_saturated as f64 / pairs as f64,
        crdr_saturated,
    })
}

pub fn check_coverage(calibration: &CalibrationFile) -> Result<Vec<CoverageCheck>> {
    let mut out = Vec::new();
    for r in &calibration.results {
        let Some(held) = calibration.heldout.get(r.score_kind.label()) else { continue };
        if held.is_empty() {
            continue;
        }
        let q = match r.score_kind {
            ScoreKind::ForwardNfc => calibration.quantiles.forward_nfc,
            ScoreKind::ForwardCrdr => calibration.quantiles.forward_crdr,
            ScoreKind::RoundTrip => calibration.quantiles.round_trip,
        }
        .unwrap_or(Quantile(r.q));
        let target = match r.score_kind {
            ScoreKind::RoundTrip => 1.0 - calibration.beta / 2.0,
            _ => 1.0 - calibration.alpha,
        };
        let cov = empirical_coverage(q.0, held)?;
        out.push(CoverageCheck {
            kind: r.score_kind,
            delta: r.delta,
            q,
            heldout: held.len(),
            empirical_coverage: cov,
            target,
            pass: cov >= target,
        });
    }
    Ok(out)
}

pub fn summarize(
    calibration: &CalibrationFile,
    logs: &[TrajectoryLog],
    contraction: Option<ContractionReport>,
) -> Result<ValidationSummary> {
    if logs.is_empty() {
        return Err(Error::input("validate: no trajectory logs"));
    }
    for log in logs.iter().filter(|l| !l.failed) {
        if log.records.len() != calibration.horizon {
            return Err(Error::input(format!(
                "validate: {} run {} has {} steps but the calibration horizon is {}",
                log.controller.label(),
                log.seed,
                log.records.len(),
                calibration.horizon
            )));
        }
    }
    let bounds = check_bounds(logs, calibration.alpha, calibration.beta);
    let coverage = check_coverage(calibration)?;
    let pass = bounds.iter().all(|b| b.pass) && coverage.iter().all(|c| c.pass);
    Ok(ValidationSummary {
        runs: logs.len(),
        failed_runs: logs.iter().filter(|l| l.failed).count(),
        alpha: calibration.alpha,
        beta: calibration.beta,
        target: 1.0 - calibration.alpha,
        state_target: 1.0 - calibration.alpha - calibration.beta,
        bounds,
        coverage,
        comparison: compare_controllers(logs),
        contraction,
        pass,
    })
}

/// Same text the summary JSON uses for a number.
pub fn json_number(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

impl ValidationSummary {
    /// Plain-text tables.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "runs {} (failed {}), target {}, state target {}\n\n",
            self.runs,
            self.failed_runs,
            json_number(self.target),
            json_number(self.state_target)
        ));
        s.push_str(&format!(
            "{:<10} {:<11} {:>5} {:>7} {:>10} {:>22} {:>20} {:>6}\n",
            "controller", "bound", "runs", "pairs", "violations", "fraction_within_bound", "fraction_runs_within", "pass"
        ));
        for b in &self.bounds {
            s.push_str(&format!(
                "{:<10} {:<11} {:>5} {:>7} {:>10} {:>22} {:>20} {:>6}\n",
                b.controller.label(),
                b.bound.label(),
                b.runs,
                b.pairs,
                b.violations,
                json_number(b.fraction_within_bound),
                json_number(b.fraction_runs_within),
                b.pass
            ));
        }
        if !self.coverage.is_empty() {
            s.push_str(&format!(
                "\n{:<13} {:>12} {:>14} {:>8} {:>19} {:>8} {:>6}\n",
                "score", "delta", "q", "heldout", "empirical_coverage", "target", "pass"
            ));
            for c in &self.coverage {
                s.push_str(&format!(
                    "{:<13} {:>12} {:>14} {:>8} {:>19} {:>8} {:>6}\n",
                    c.kind.label(),
                    json_number(c.delta),
                    crate::conformal::fmt_float(c.q.0),
                    c.heldout,
                    json_number(c.empirical_coverage),
                    json_number(c.target),
                    c.pass
                ));
            }
        }
        if let Some(c) = &self.comparison {
            s.push_str(&format!(
                "\nNFC vs CRDR on {} seeds: NFC worse terminal error {} ({}), NFC saturated {} ({}), CRDR saturated {}\n",
                c.pairs,
                c.nfc_worse,
                json_number(c.nfc_worse_fraction),
                c.nfc_saturated,
                json_number(c.nfc_saturated_fraction),
                c.crdr_saturated
            ));
        }
        if let Some(c) = &self.contraction {
            s.push_str(&format!(
                "\ncontraction check: {} samples ({} excluded), max violation {:e}, min σ(Ĝ) {:e}, {}\n",
                c.samples,
                c.excluded,
                c.max_violation,
                c.min_jacobian_sigma,
                if c.pass { "pass" } else { "fail" }
            ));
        }
        s.push_str(&format!("\noverall: {}\n", if self.pass { "pass" } else { "fail" }));
        s
    }
}

/// Sampled contraction check of the unsaturated NFC loop on the Dubins observation map.
pub fn dubins_contraction(
    cfg: &ExperimentConfig,
    model: &LiftedModel,
    spec: &ControllerSpec,
    samples: &[Vec<f64>],
) -> Result<ContractionReport> {
    let dt = cfg.data.dt;
    let speed = cfg.rollout.speed;
    let mode = cfg.data.input_mode;
    let anchor = DubinsState::new(0.0, 0.0, 0.0, speed).observation();
    let z_anchor = model.lift(&anchor)?;
    let u_d = DVector::from_vec(mode.join(0.0, 0.0));
    let f_cl = |obs: &[f64]| -> Vec<f64> {
        let step = || -> Result<Vec<f64>> {
            let e = model.lift(obs)? - &z_anchor;
            let u = nfc_input(spec, &u_d, &e)?;
            let (a, omega) = mode.split(u.as_slice());
            let s = DubinsState::new(obs[0], obs[1], obs[2].atan2(obs[3]), speed);
            Ok(dubins_step(&s, a, omega, dt).observation())
        };
        step().unwrap_or_else(|_| vec![f64::NAN; obs.len()])
    };
    verify_contraction(
        &model.dictionary,
        &spec.m,
        spec.gamma,
        f_cl,
        samples,
        cfg.contraction.jac_step,
        cfg.contraction.tolerance,
    )
}
