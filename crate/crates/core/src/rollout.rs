//! Closed-loop rollouts on a ground-truth plant with live bound evaluation.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, fmt_float, BoundKind};
use crate::controller::{crdr_step, nfc_input, ControllerSpec};
use crate::dubins::{dubins_step, saturate_omega, DubinsState, InputMode};
use crate::error::{check_len, Error, Result};
use crate::koopman_id;
use crate::lifting::LiftedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Nfc,
    Crdr,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Nfc => "nfc",
            ControllerKind::Crdr => "crdr",
        }
    }

    pub fn bound_kind(self) -> BoundKind {
        match self {
            ControllerKind::Nfc => BoundKind::Nfc,
            ControllerKind::Crdr => BoundKind::Crdr,
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nfc" => Ok(ControllerKind::Nfc),
            "crdr" => Ok(ControllerKind::Crdr),
            _ => Err(Error::input(format!("unknown controller kind {s:?}"))),
        }
    }
}

/// A ground-truth system driven by the controller.
pub trait Plant {
    fn state_names(&self) -> Vec<String>;
    fn state(&self) -> Vec<f64>;
    fn observation(&self) -> Vec<f64>;
    /// Actuator limits: the input that would reach the plant and whether it was clipped.
    fn limit(&self, u: &[f64]) -> (Vec<f64>, bool);
    /// Advances with an input that already respects the limits.
    fn step(&mut self, u: &[f64]);
    /// Number of leading observation entries that form the position.
    fn position_dims(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct DubinsPlant {
    pub state: DubinsState,
    pub dt: f64,
    pub mode: InputMode,
}

impl Plant for DubinsPlant {
    fn state_names(&self) -> Vec<String> {
        ["x", "y", "theta", "v"].iter().map(|s| s.to_string()).collect()
    }

    fn state(&self) -> Vec<f64> {
        let s = &self.state;
        vec![s.x, s.y, s.wrapped_heading(), s.v]
    }

    fn observation(&self) -> Vec<f64> {
        self.state.observation()
    }

    fn limit(&self, u: &[f64]) -> (Vec<f64>, bool) {
        let (a, omega) = self.mode.split(u);
        let applied = saturate_omega(omega);
        (self.mode.join(a, applied), applied != omega)
    }

    fn step(&mut self, u: &[f64]) {
        let (a, omega) = self.mode.split(u);
        self.state = dubins_step(&self.state, a, omega, self.dt);
    }

    fn position_dims(&self) -> usize {
        2
    }
}

/// `x⁺ = A x + B u` observed directly; used for exact-model checks.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub x: DVector<f64>,
    pub a: nalgebra::DMatrix<f64>,
    pub b: nalgebra::DMatrix<f64>,
}

impl Plant for LinearPlant {
    fn state_names(&self) -> Vec<String> {
        (0..self.x.len()).map(|i| format!("s{i}")).collect()
    }

    fn state(&self) -> Vec<f64> {
        self.x.iter().copied().collect()
    }

    fn observation(&self) -> Vec<f64> {
        self.state()
    }

    fn limit(&self, u: &[f64]) -> (Vec<f64>, bool) {
        (u.to_vec(), false)
    }

    fn step(&mut self, u: &[f64]) {
        self.x = &self.a * &self.x + &self.b * DVector::from_column_slice(u);
    }

    fn position_dims(&self) -> usize {
        self.x.len()
    }
}

/// Calibrated quantities needed to evaluate bounds during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Quantile of the controller's own forward score (latent radius bound).
    pub q_forward: f64,
    /// Quantile of the nominal forward score (slack-history bound).
    pub q_nominal: f64,
    pub q_rt: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub state: Vec<f64>,
    pub observation: Vec<f64>,
    pub z: Vec<f64>,
    pub e: Vec<f64>,
    /// Input sent to the plant after saturation.
    pub u: Vec<f64>,
    pub u_cmd: Vec<f64>,
    pub saturated: bool,
    pub delta_v: Option<f64>,
    pub constraint_gap: Option<f64>,
    pub e_norm: f64,
    /// `‖Θ e‖`.
    pub lyapunov: f64,
    pub pos_err: f64,
    /// Norm of the error-dynamics residual for the step leaving this row.
    pub d_hat: Option<f64>,
    pub eps_k: Option<f64>,
    pub traj_bound: Option<f64>,
    pub state_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub controller: ControllerKind,
    pub seed: u64,
    pub preset: String,
    pub failed: bool,
    pub failure: Option<String>,
    pub state_names: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub records: Vec<StepRecord>,
}

pub struct RolloutSetup<'a> {
    pub model: &'a LiftedModel,
    pub spec: &'a ControllerSpec,
    pub x_d: &'a [Vec<f64>],
    pub u_d: &'a [Vec<f64>],
    pub kind: ControllerKind,
    pub bounds: Option<BoundInputs>,
    pub seed: u64,
    pub preset: &'a str,
}

struct BoundState {
    eps: Vec<f64>,
    rho: f64,
    q_nominal: f64,
    q_rt: f64,
    lipschitz: f64,
}

/// Runs `x_d.len()` logged steps; inputs are applied between consecutive rows.
pub fn rollout<P: Plant>(mut plant: P, setup: &RolloutSetup<'_>) -> Result<TrajectoryLog> {
    let model = setup.model;
    let spec = setup.spec;
    let steps = setup.x_d.len();
    check_len("reference inputs", setup.u_d.len(), steps)?;
    check_len("spec latent dim", spec.latent_dim(), model.latent_dim())?;
    check_len("spec input dim", spec.input_dim(), model.input_dim())?;
    if steps == 0 {
        return Err(Error::input("rollout: empty reference"));
    }
    let pos_dims = plant.position_dims();
    let sqrt_mu = spec.m_under.sqrt();

    let mut log = TrajectoryLog {
        controller: setup.kind,
        seed: setup.seed,
        preset: setup.preset.to_string(),
        failed: false,
        failure: None,
        state_names: plant.state_names(),
        metadata: BTreeMap::new(),
        records: Vec::with_capacity(steps),
    };
    let mut bound_state: Option<BoundState> = None;
    let mut slack_history: Vec<f64> = Vec::with_capacity(steps);
    let mut v0 = 0.0;

    for k in 0..steps {
        let obs = plant.observation();
        let z = model.lift(&obs)?;
        let z_d = model.lift(&setup.x_d[k])?;
        let e = &z - &z_d;
        let lyapunov = spec.lyapunov_value(&e);
        if k == 0 {
            v0 = lyapunov;
            if let Some(b) = setup.bounds {
                let rho = match setup.kind {
                    ControllerKind::Nfc => 0.0,
                    ControllerKind::Crdr => spec.rho,
                };
                let dr = conformal::delta_r(setup.kind.bound_kind(), b.q_forward, spec.gamma, spec.rho, spec.m_bar, spec.m_under)?;
                bound_state = Some(BoundState {
                    eps: conformal::latent_bound_profile(v0, spec.gamma, steps - 1, dr, spec.m_under),
                    rho,
                    q_nominal: b.q_nominal,
                    q_rt: b.q_rt,
                    lipschitz: b.lipschitz,
                });
            }
        }
        let u_d = DVector::from_column_slice(&setup.u_d[k]);
        let (u_cmd, delta_v, gap) = match setup.kind {
            ControllerKind::Nfc => (nfc_input(spec, &u_d, &e)?, None, None),
            ControllerKind::Crdr => match crdr_step(spec, &model.a, &model.b, &e, &u_d) {
                Ok(sol) => (sol.u, Some(sol.delta_v), Some(sol.constraint_gap)),
                Err(err) => {
                    log.failed = true;
                    log.failure = Some(format!("step {k}: {err}"));
                    break;
                }
            },
        };
        let (eps_k, traj_bound, state_bound) = match &bound_state {
            Some(bs) => {
                let tb = if k == 0 {
                    v0 / sqrt_mu
                } else {
                    conformal::trajectory_bound(v0, spec.gamma, bs.rho, spec.m_bar, spec.m_under, bs.q_nominal, &slack_history)?
                };
                (Some(bs.eps[k]), Some(tb), Some(conformal::state_bound(bs.q_rt, bs.lipschitz, tb)))
            }
            None => (None, None, None),
        };
        let pos_err = obs[..pos_dims]
            .iter()
            .zip(&setup.x_d[k][..pos_dims])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let u_cmd: Vec<f64> = u_cmd.iter().copied().collect();
        let (applied, saturated) = plant.limit(&u_cmd);
        let mut record = StepRecord {
            k,
            state: plant.state(),
            observation: obs.clone(),
            z: z.iter().copied().collect(),
            e: e.iter().copied().collect(),
            u: applied,
            u_cmd,
            saturated,
            delta_v,
            constraint_gap: gap,
            e_norm: e.norm(),
            lyapunov,
            pos_err,
            d_hat: None,
            eps_k,
            traj_bound,
            state_bound,
        };
        if k + 1 < steps {
            plant.step(&record.u);
            let next_obs = plant.observation();
            if next_obs.iter().any(|v| !v.is_finite()) {
                log.records.push(record);
                log.failed = true;
                log.failure = Some(format!("non-finite state after step {k}"));
                break;
            }
            let actual = koopman_id::residual(model, &obs, &record.u, &next_obs)?;
            let reference = koopman_id::residual(model, &setup.x_d[k], &setup.u_d[k], &setup.x_d[k + 1])?;
            record.d_hat = Some((actual - reference).norm());
            slack_history.push(delta_v.unwrap_or(0.0));
        }
        log.records.push(record);
    }
    log.metadata.insert("controller".into(), setup.kind.label().into());
    log.metadata.insert("seed".into(), setup.seed.to_string());
    log.metadata.insert("preset".into(), setup.preset.into());
    log.metadata.insert("failed".into(), log.failed.to_string());
    log.metadata.insert("steps".into(), log.records.len().to_string());
    log.metadata.insert("gamma".into(), spec.gamma.to_string());
    log.metadata.insert("rho".into(), spec.rho.to_string());
    log.metadata.insert("c_v".into(), spec.c_v.to_string());
    if let Some(b) = setup.bounds {
        log.metadata.insert("q_forward".into(), fmt_float(b.q_forward));
        log.metadata.insert("q_nominal".into(), fmt_float(b.q_nominal));
        log.metadata.insert("q_rt".into(), fmt_float(b.q_rt));
        log.metadata.insert("lipschitz".into(), fmt_float(b.lipschitz));
    }
    if let Some(f) = &log.failure {
        log.metadata.insert("failure".into(), f.clone());
    }
    Ok(log)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_float)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(";")
}

fn parse_float(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse::<f64>().map_err(|_| format!("bad number {s:?}")),
    }
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "NA" {
        Ok(None)
    } else {
        parse_float(s).map(Some)
    }
}

fn parse_vec(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(';').map(parse_float).collect()
}

const TAIL_COLUMNS: [&str; 12] = [
    "u",
    "delta_v",
    "e_norm",
    "pos_err",
    "eps_k",
    "traj_bound",
    "state_bound",
    "u_cmd",
    "saturated",
    "d_hat",
    "lyapunov",
    "constraint_gap",
];

impl TrajectoryLog {
    pub fn header(&self) -> String {
        let mut cols = vec!["k".to_string()];
        cols.extend(self.state_names.iter().cloned());
        cols.extend(TAIL_COLUMNS.iter().map(|s| s.to_string()));
        cols.join(",")
    }

    /// `# key=value` metadata, then one row per step. Multi-input vectors are `;`-joined.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&self.header());
        out.push('\n');
        for r in &self.records {
            let mut fields = vec![r.k.to_string()];
            fields.extend(r.state.iter().map(|v| fmt_float(*v)));
            fields.push(fmt_vec(&r.u));
            fields.push(fmt_opt(r.delta_v));
            fields.push(fmt_float(r.e_norm));
            fields.push(fmt_float(r.pos_err));
            fields.push(fmt_opt(r.eps_k));
            fields.push(fmt_opt(r.traj_bound));
            fields.push(fmt_opt(r.state_bound));
            fields.push(fmt_vec(&r.u_cmd));
            fields.push(r.saturated.to_string());
            fields.push(fmt_opt(r.d_hat));
            fields.push(fmt_float(r.lyapunov));
            fields.push(fmt_opt(r.constraint_gap));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f), path)
    }

    /// Parses the CSV form. Latent vectors and observations are not stored and come back empty.
    pub fn read<R: BufRead>(input: R, path: &Path) -> Result<Self> {
        let mut metadata = BTreeMap::new();
        let mut header: Option<Vec<String>> = None;
        let mut records = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let at = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once('=').ok_or_else(|| at("metadata without '='".into()))?;
                metadata.insert(k.to_string(), v.to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let Some(cols) = &header else {
                let cols: Vec<String> = fields.iter().map(|s| s.to_string()).collect();
                let n_state = cols.len().checked_sub(1 + TAIL_COLUMNS.len()).ok_or_else(|| at("header too short".into()))?;
                if cols[0] != "k" || cols[1 + n_state..] != TAIL_COLUMNS {
                    return Err(at(format!("unexpected header {line:?}")));
                }
                header = Some(cols);
                continue;
            };
            if fields.len() != cols.len() {
                return Err(at(format!("expected {} fields, found {}", cols.len(), fields.len())));
            }
            let n_state = cols.len() - 1 - TAIL_COLUMNS.len();
            let tail = &fields[1 + n_state..];
            let rec = (|| -> std::result::Result<StepRecord, String> {
                Ok(StepRecord {
                    k: fields[0].parse().map_err(|_| format!("bad step index {:?}", fields[0]))?,
                    state: fields[1..1 + n_state].iter().map(|s| parse_float(s)).collect::<std::result::Result<_, _>>()?,
                    observation: Vec::new(),
                    z: Vec::new(),
                    e: Vec::new(),
                    u: parse_vec(tail[0])?,
                    delta_v: parse_opt(tail[1])?,
                    e_norm: parse_float(tail[2])?,
                    pos_err: parse_float(tail[3])?,
                    eps_k: parse_opt(tail[4])?,
                    traj_bound: parse_opt(tail[5])?,
                    state_bound: parse_opt(tail[6])?,
                    u_cmd: parse_vec(tail[7])?,
                    saturated: tail[8].parse().map_err(|_| format!("bad flag {:?}", tail[8]))?,
                    d_hat: parse_opt(tail[9])?,
                    lyapunov: parse_float(tail[10])?,
                    constraint_gap: parse_opt(tail[11])?,
                })
            })()
            .map_err(at)?;
            if rec.k != records.len() {
                return Err(at(format!("step index {} out of sequence", rec.k)));
            }
            records.push(rec);
        }
        let header = header.ok_or_else(|| Error::format(path, "missing header"))?;
        let n_state = header.len() - 1 - TAIL_COLUMNS.len();
        let get = |key: &str| metadata.get(key).cloned().ok_or_else(|| Error::format(path, format!("missing metadata {key}")));
        let controller: ControllerKind = get("controller")?.parse()?;
        let seed = get("seed")?.parse().map_err(|_| Error::format(path, "bad seed"))?;
        let failed = get("failed")? == "true";
        Ok(TrajectoryLog {
            controller,
            seed,
            preset: get("preset")?,
            failed,
            failure: metadata.get("failure").cloned(),
            state_names: header[1..1 + n_state].to_vec(),
            metadata,
            records,
        })
    }

    /// Slack history `Δv_0..Δv_{K−1}` with NFC rows counted as zero.
    pub fn slack_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta_v.unwrap_or(0.0)).collect()
    }

    pub fn saturation_count(&self) -> usize {
        self.records.iter().filter(|r| r.saturated).count()
    }

    pub fn terminal_position_error(&self) -> Option<f64> {
        self.records.last().map(|r| r.pos_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::synthesize_metric;
    use crate::lifting::{Decoder, Dictionary};
    use nalgebra::DMatrix;

    fn linear_setup() -> (LiftedModel, ControllerSpec, DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let dict = Dictionary::identity_augmented(2, false, vec![]).unwrap();
        let model = LiftedModel::new(dict, Decoder::projection(2, 2).unwrap(), a.clone(), b.clone()).unwrap();
        let spec = synthesize_metric(&a, &b, 0.9, &DMatrix::identity(2, 2))
            .unwrap()
            .with_crdr_params(0.0, 0.01)
            .unwrap();
        (model, spec, a, b)
    }

    fn reference(a: &DMatrix<f64>, b: &DMatrix<f64>, x0: DVector<f64>, steps: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut x = x0;
        let mut xs = Vec::new();
        let mut us = Vec::new();
        for k in 0..steps {
            let u = vec![(k as f64 * 0.3).sin()];
            xs.push(x.iter().copied().collect());
            us.push(u.clone());
            x = a * &x + b * DVector::from_vec(u);
        }
        (xs, us)
    }

    #[test]
    fn exact_model_on_reference_keeps_zero_error() {
        let (model, spec, a, b) = linear_setup();
        let x0 = DVector::from_vec(vec![0.2, -0.1]);
        let (x_d, u_d) = reference(&a, &b, x0.clone(), 20);
        for kind in [ControllerKind::Nfc, ControllerKind::Crdr] {
            let plant = LinearPlant { x: x0.clone(), a: a.clone(), b: b.clone() };
            let setup = RolloutSetup { model: &model, spec: &spec, x_d: &x_d, u_d: &u_d, kind, bounds: None, seed: 0, preset: "toy" };
            let log = rollout(plant, &setup).unwrap();
            assert_eq!(log.records.len(), 20);
            for (r, ud) in log.records.iter().zip(&u_d) {
                assert_eq!(r.e_norm, 0.0);
                assert_eq!(&r.u, ud);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_offline_bound() {
        let (model, spec, a, b) = linear_setup();
        let (x_d, u_d) = reference(&a, &b, DVector::zeros(2), 15);
        let plant = LinearPlant { x: DVector::from_vec(vec![0.5, 0.3]), a: a.clone(), b: b.clone() };
        let bounds = BoundInputs { q_forward: 0.01, q_nominal: 0.01, q_rt: 0.0, lipschitz: 1.0 };
        let spec = spec.with_crdr_params(0.05, 0.01).unwrap();
        let setup = RolloutSetup { model: &model, spec: &spec, x_d: &x_d, u_d: &u_d, kind: ControllerKind::Crdr, bounds: Some(bounds), seed: 9, preset: "toy" };
        let log = rollout(plant, &setup).unwrap();
        assert!(log.records.iter().any(|r| r.delta_v.unwrap() > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.save(&path).unwrap();
        let back = TrajectoryLog::load(&path).unwrap();
        assert_eq!(back.to_csv(), log.to_csv());
        let hist = back.slack_history();
        let v0 = back.records[0].lyapunov;
        for k in 1..back.records.len() {
            let offline = conformal::trajectory_bound(v0, spec.gamma, spec.rho, spec.m_bar, spec.m_under, 0.01, &hist[..k]).unwrap();
            assert!((offline - back.records[k].traj_bound.unwrap()).abs() <= 1e-10);
        }
        for r in &log.records {
            assert!(r.constraint_gap.unwrap() >= -1e-7);
        }
    }

    #[test]
    fn dubins_header_matches_schema() {
        let log = TrajectoryLog {
            controller: ControllerKind::Nfc,
            seed: 1,
            preset: "p".into(),
            failed: false,
            failure: None,
            state_names: DubinsPlant { state: DubinsState::new(0.0, 0.0, 0.0, 1.0), dt: 0.1, mode: InputMode::TurnRate }.state_names(),
            metadata: BTreeMap::new(),
            records: vec![],
        };
        assert!(log.header().starts_with("k,x,y,theta,v,u,delta_v,e_norm,pos_err,eps_k,traj_bound,state_bound"));
    }

    #[test]
    fn malformed_log_reports_line() {
        let text = "# controller=nfc\n# seed=1\n# preset=p\n# failed=false\nk,s0,u,delta_v,e_norm,pos_err,eps_k,traj_bound,state_bound,u_cmd,saturated,d_hat,lyapunov,constraint_gap\n0,1,2,NA,x,0,NA,NA,NA,2,false,NA,0,NA\n";
        let err = TrajectoryLog::read(text.as_bytes(), Path::new("t.csv")).unwrap_err();
        assert!(err.to_string().contains("line 6"), "{err}");
    }
}
