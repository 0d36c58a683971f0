//! Pipeline stages. Every stage reads only what earlier stages wrote under
//! the output directory, so each one can be re-run on its own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::validation::{self, ValidationSummary};
use super::report;
use crate::conformal::{
    self, conformal_quantile, conformal_quantile_per_step, estimate_lipschitz, forward_score_crdr,
    round_trip_score, BoundKind, BoundProfile, CalibrationResult, LipschitzEstimate, ScoreKind,
};
use crate::controller::{closed_loop_moduli, synthesize_metric_with, ControllerSpec, SynthesisOptions};
use crate::dubins::{circle_reference, DubinsState, ReferenceTrajectory, OBSERVATION_DIM};
use crate::error::{Error, Result};
use crate::koopman_id::{fit_edmd, fit_regularized, prediction_loss, LiftedTransitions, TransitionDataset};
use crate::lifting::training::train_autoencoder;
use crate::lifting::{
    fit_linear_decoder, rbf_features_from_samples, Decoder, DecoderKind, Dictionary, DictionaryKind, LiftedModel,
};
use crate::linalg;
use crate::rollout::{rollout, BoundInputs, ControllerKind, DubinsPlant, RolloutSetup, TrajectoryLog};
use crate::seeds::{self, stream};

pub const FORMAT_VERSION: u32 = 1;

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self::new(&cfg.report.out_dir)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_csv(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }
    pub fn identification_csv(&self) -> PathBuf {
        self.data_dir().join("identification.csv")
    }
    pub fn model_json(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn controller_json(&self) -> PathBuf {
        self.root.join("controller.json")
    }
    pub fn calibration_dir(&self) -> PathBuf {
        self.root.join("calibration")
    }
    pub fn calibration_json(&self) -> PathBuf {
        self.calibration_dir().join("calibration.json")
    }
    pub fn calibration_csv(&self) -> PathBuf {
        self.calibration_dir().join("calibration.csv")
    }
    pub fn per_step_csv(&self) -> PathBuf {
        self.calibration_dir().join("per_step.csv")
    }
    pub fn bound_profile_csv(&self) -> PathBuf {
        self.calibration_dir().join("bound_profile.csv")
    }
    pub fn samples_csv(&self) -> PathBuf {
        self.calibration_dir().join("samples.csv")
    }
    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn index_csv(&self) -> PathBuf {
        self.runs_dir().join("index.csv")
    }
    pub fn validation_dir(&self) -> PathBuf {
        self.root.join("validation")
    }
    pub fn summary_json(&self) -> PathBuf {
        self.validation_dir().join("summary.json")
    }
    pub fn summary_txt(&self) -> PathBuf {
        self.validation_dir().join("summary.txt")
    }
    pub fn contraction_csv(&self) -> PathBuf {
        self.validation_dir().join("contraction.csv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn report_md(&self) -> PathBuf {
        self.report_dir().join("report.md")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.report_dir().join("plots")
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, format!("cannot serialize: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported file version {version}")));
    }
    Ok(())
}

pub fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::of(cfg);
    ensure_dir(&layout.root)?;
    write_text(&layout.config(), &cfg.to_toml()?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectSummary {
    pub train_records: usize,
    pub identification_records: usize,
    pub train_seed: u64,
    pub identification_seed: u64,
}

pub fn collect(cfg: &ExperimentConfig) -> Result<CollectSummary> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let train_seed = seeds::derive(cfg.data.seed, stream::COLLECT_TRAIN, 0);
    let identification_seed = seeds::derive(cfg.data.seed, stream::COLLECT_ID, 0);
    let train = crate::dubins::collect_episodes(&cfg.data.collection(cfg.data.episodes), train_seed)?;
    let ident = crate::dubins::collect_episodes(&cfg.data.collection(cfg.data.identification_episodes), identification_seed)?;
    ensure_dir(&layout.data_dir())?;
    train.save(&layout.train_csv())?;
    ident.save(&layout.identification_csv())?;
    log::info!(
        "collect: {} training records (seed {train_seed}), {} identification records (seed {identification_seed})",
        train.len(),
        ident.len()
    );
    Ok(CollectSummary {
        train_records: train.len(),
        identification_records: ident.len(),
        train_seed,
        identification_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub records: usize,
    pub latent_dim: usize,
    pub spectral_radius: f64,
    pub edmd_spectral_radius: f64,
    pub controllability_sigma_min: f64,
    pub controllability_sigma_max: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub prediction_loss: f64,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub encoder_final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub model: LiftedModel,
    pub diagnostics: FitDiagnostics,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_version(path, f.version)?;
        f.model.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(f)
    }
}

fn build_lifting(cfg: &ExperimentConfig, train: &TransitionDataset) -> Result<(Dictionary, Decoder, Option<f64>)> {
    let l = &cfg.lifting;
    let n = train.state_dim;
    let states = train.states();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.data.seed, stream::DICTIONARY, 0));
    let (dictionary, trained_decoder, encoder_loss) = match l.kind {
        DictionaryKind::IdentityAugmented => {
            let rbf = rbf_features_from_samples(&states, l.rbf_count, l.width_subsample, &mut rng)?;
            (Dictionary::identity_augmented(n, l.constant, rbf)?, None, None)
        }
        DictionaryKind::RadialBasis => {
            let rbf = rbf_features_from_samples(&states, l.rbf_count, l.width_subsample, &mut rng)?;
            (Dictionary::radial_basis(n, rbf)?, None, None)
        }
        DictionaryKind::TrainedEncoder => {
            let out = train_autoencoder(train, &l.encoder, seeds::derive(cfg.data.seed, stream::ENCODER, 0))?;
            let last = out.history.last().map(|p| p.total);
            (out.dictionary, Some(out.decoder), last)
        }
    };
    let decoder = match l.decoder {
        DecoderKind::Projection => Decoder::projection(dictionary.latent_dim(), n)?,
        DecoderKind::LinearLeastSquares => fit_linear_decoder(&dictionary, &states, l.decoder_ridge)?,
        DecoderKind::TrainedDecoder => trained_decoder
            .ok_or_else(|| Error::Config("lifting.decoder: trained_decoder needs a trained encoder".into()))?,
    };
    Ok((dictionary, decoder, encoder_loss))
}

pub fn fit(cfg: &ExperimentConfig) -> Result<ModelFile> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let train = TransitionDataset::load(&layout.train_csv())?;
    let ident = TransitionDataset::load(&layout.identification_csv())?;
    if train.state_dim != ident.state_dim || train.input_dim != ident.input_dim {
        return Err(Error::input("training and identification datasets have different dimensions"));
    }
    let (dictionary, decoder, encoder_final_loss) = build_lifting(cfg, &train)?;
    let (a_edmd, _) = fit_edmd(&dictionary, &ident, cfg.identification.ridge)?;
    let report = fit_regularized(&dictionary, &ident, &cfg.identification)?;
    let lifted = LiftedTransitions::from_dataset(&dictionary, &ident)?;
    let (smin, smax) = linalg::controllability_extremes(&report.a, &report.b)?;
    let diagnostics = FitDiagnostics {
        records: ident.len(),
        latent_dim: dictionary.latent_dim(),
        spectral_radius: linalg::spectral_radius(&report.a)?,
        edmd_spectral_radius: linalg::spectral_radius(&a_edmd)?,
        controllability_sigma_min: smin,
        controllability_sigma_max: smax,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        prediction_loss: prediction_loss(&report.a, &report.b, &lifted)?,
        iterations: report.iterations,
        encoder_final_loss,
    };
    let file = ModelFile {
        version: FORMAT_VERSION,
        model: LiftedModel::new(dictionary, decoder, report.a, report.b)?,
        diagnostics,
    };
    write_json(&layout.model_json(), &file)?;
    log::info!(
        "fit: ρ(A) = {:.6}, σmin(C) = {:e}, prediction loss = {:e}",
        file.diagnostics.spectral_radius,
        smin,
        file.diagnostics.prediction_loss
    );
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerFile {
    pub version: u32,
    pub preset: String,
    pub spec: ControllerSpec,
    pub closed_loop_moduli: Vec<f64>,
    pub certificate: f64,
    /// `√(m̄/m̲)`.
    pub metric_condition: f64,
}

impl ControllerFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_version(path, f.version)?;
        f.spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(f)
    }
}

pub fn synthesis_options(cfg: &ExperimentConfig, latent_dim: usize) -> SynthesisOptions {
    let c = &cfg.controller;
    let mut opts = SynthesisOptions::new(latent_dim);
    opts.q_lyapunov *= c.q_scale;
    opts.q_lqr_scale = c.lqr_q_scale;
    opts.r_lqr_scale = c.lqr_r_scale;
    opts.discounted_fallback = c.discounted_fallback;
    opts.controllability_floor = c.controllability_floor;
    opts
}

pub fn synth(cfg: &ExperimentConfig) -> Result<ControllerFile> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let model = ModelFile::load(&layout.model_json())?.model;
    let opts = synthesis_options(cfg, model.latent_dim());
    let spec = synthesize_metric_with(&model.a, &model.b, cfg.controller.gamma(), &opts)?
        .with_crdr_params(cfg.controller.rho(), cfg.controller.c_v())?;
    let moduli = closed_loop_moduli(&model.a, &model.b, &spec.k)?;
    if let Some(bad) = moduli.iter().find(|m| !(**m < 1.0)) {
        return Err(Error::Synthesis(format!("closed-loop eigenvalue of modulus {bad} outside the unit circle")));
    }
    let file = ControllerFile {
        version: FORMAT_VERSION,
        preset: cfg.preset.clone(),
        certificate: spec.certificate,
        metric_condition: spec.metric_condition(),
        closed_loop_moduli: moduli,
        spec,
    };
    write_json(&layout.controller_json(), &file)?;
    log::info!(
        "synth: certificate {:e}, max |eig(A−BK)| = {:.6}",
        file.certificate,
        file.closed_loop_moduli.iter().fold(0.0f64, |a, b| a.max(*b))
    );
    Ok(file)
}

/// A quantile that may be `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Quantile(#[serde(with = "crate::conformal::extended_float")] pub f64);

/// Quantiles used by the live bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundQuantiles {
    pub forward_nfc: Option<Quantile>,
    pub forward_crdr: Option<Quantile>,
    pub round_trip: Option<Quantile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub version: u32,
    pub alpha: f64,
    pub beta: f64,
    pub horizon: usize,
    pub delta_forward: f64,
    pub delta_round_trip: f64,
    pub per_step: bool,
    pub results: Vec<CalibrationResult>,
    pub quantiles: BoundQuantiles,
    pub heldout: BTreeMap<String, Vec<f64>>,
    pub lipschitz: LipschitzEstimate,
    pub max_initial_lyapunov: f64,
    pub calibration_rollouts: usize,
    pub failed_rollouts: usize,
    pub warnings: Vec<String>,
}

impl CalibrationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_version(path, f.version)?;
        Ok(f)
    }

    pub fn result(&self, kind: ScoreKind) -> Option<&CalibrationResult> {
        self.results.iter().find(|r| r.score_kind == kind)
    }

    /// Bound inputs for `kind`, or `None` when a needed score was not calibrated.
    pub fn bound_inputs(&self, kind: ControllerKind) -> Option<BoundInputs> {
        let q = &self.quantiles;
        let nominal = q.forward_nfc?.0;
        let forward = match kind {
            ControllerKind::Nfc => nominal,
            ControllerKind::Crdr => q.forward_crdr?.0,
        };
        Some(BoundInputs {
            q_forward: forward,
            q_nominal: nominal,
            q_rt: q.round_trip?.0,
            lipschitz: self.lipschitz.value,
        })
    }
}

pub fn reference(cfg: &ExperimentConfig) -> Result<ReferenceTrajectory> {
    let r = &cfg.rollout;
    circle_reference(r.radius, r.speed, cfg.data.dt, r.horizon, cfg.data.input_mode)
}

/// Reference start perturbed by a seeded offset.
pub fn initial_state(cfg: &ExperimentConfig, reference: &ReferenceTrajectory, seed: u64) -> DubinsState {
    let r = &cfg.rollout;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = reference.initial_state();
    let ps = r.position_spread;
    let hs = r.heading_spread;
    DubinsState::new(
        s.x + rng.random_range(-ps..=ps),
        s.y + rng.random_range(-ps..=ps),
        s.theta + rng.random_range(-hs..=hs),
        s.v,
    )
}

pub struct Artifacts<'a> {
    pub model: &'a LiftedModel,
    pub spec: &'a ControllerSpec,
    pub reference: &'a ReferenceTrajectory,
}

/// One closed-loop run on the Dubins plant. `index` names the run; the
/// initial state comes from `derived_seed`.
pub fn run_one(
    cfg: &ExperimentConfig,
    art: &Artifacts<'_>,
    kind: ControllerKind,
    bounds: Option<BoundInputs>,
    index: u64,
    derived_seed: u64,
) -> Result<TrajectoryLog> {
    if art.model.state_dim() != OBSERVATION_DIM {
        return Err(Error::input(format!(
            "rollouts drive the Dubins plant and need a {OBSERVATION_DIM}-dimensional model, got {}",
            art.model.state_dim()
        )));
    }
    let plant = DubinsPlant {
        state: initial_state(cfg, art.reference, derived_seed),
        dt: cfg.data.dt,
        mode: cfg.data.input_mode,
    };
    let setup = RolloutSetup {
        model: art.model,
        spec: art.spec,
        x_d: &art.reference.x_d,
        u_d: &art.reference.u_d,
        kind,
        bounds,
        seed: index,
        preset: &cfg.preset,
    };
    let mut log = rollout(plant, &setup)?;
    log.metadata.insert("derived_seed".into(), derived_seed.to_string());
    log.metadata.insert("dt".into(), cfg.data.dt.to_string());
    log.metadata.insert("radius".into(), cfg.rollout.radius.to_string());
    Ok(log)
}

struct ScoreBags {
    nfc: Vec<Vec<f64>>,
    crdr: Vec<Vec<f64>>,
    round_trip: Vec<Vec<f64>>,
}

/// Per-step scores of one rollout.
fn rollout_scores(log: &TrajectoryLog, model: &LiftedModel, m_bar: f64) -> Result<ScoreBags> {
    let mut bags = ScoreBags {
        nfc: Vec::new(),
        crdr: Vec::new(),
        round_trip: Vec::new(),
    };
    for r in &log.records {
        bags.round_trip.push(vec![round_trip_score(model, &r.observation)?]);
        match r.d_hat {
            Some(d) => {
                bags.nfc.push(vec![d]);
                bags.crdr.push(vec![forward_score_crdr(d, r.delta_v.unwrap_or(0.0), m_bar)]);
            }
            None => {
                bags.nfc.push(Vec::new());
                bags.crdr.push(Vec::new());
            }
        }
    }
    Ok(bags)
}

fn merge_by_step(target: &mut Vec<Vec<f64>>, src: Vec<Vec<f64>>) {
    if target.len() < src.len() {
        target.resize(src.len(), Vec::new());
    }
    for (t, s) in target.iter_mut().zip(src) {
        t.extend(s);
    }
}

pub fn calibrate(cfg: &ExperimentConfig) -> Result<CalibrationFile> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let model = ModelFile::load(&layout.model_json())?.model;
    let spec = ControllerFile::load(&layout.controller_json())?.spec;
    let reference = reference(cfg)?;
    let art = Artifacts {
        model: &model,
        spec: &spec,
        reference: &reference,
    };
    let c = &cfg.conformal;
    let total = c.calibration_rollouts + c.holdout_rollouts;
    let logs: Vec<TrajectoryLog> = (0..total as u64)
        .into_par_iter()
        .map(|i| {
            let seed = seeds::derive(cfg.data.seed, stream::CALIBRATION, i);
            run_one(cfg, &art, ControllerKind::Crdr, None, i, seed)
        })
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let failed_rollouts = logs.iter().filter(|l| l.failed).count();
    if failed_rollouts > 0 {
        warnings.push(format!("{failed_rollouts} calibration rollouts aborted; their partial scores are used"));
    }
    let mut cal = ScoreBags { nfc: Vec::new(), crdr: Vec::new(), round_trip: Vec::new() };
    let mut held = ScoreBags { nfc: Vec::new(), crdr: Vec::new(), round_trip: Vec::new() };
    for (i, log) in logs.iter().enumerate() {
        let bags = rollout_scores(log, &model, spec.m_bar)?;
        let dest = if i < c.calibration_rollouts { &mut cal } else { &mut held };
        merge_by_step(&mut dest.nfc, bags.nfc);
        merge_by_step(&mut dest.crdr, bags.crdr);
        merge_by_step(&mut dest.round_trip, bags.round_trip);
    }

    let delta_forward = conformal::union_bound_delta(c.alpha, c.horizon)?;
    let delta_round_trip = c.beta / 2.0;
    let mut results = Vec::new();
    let mut quantiles = BoundQuantiles::default();
    let mut heldout = BTreeMap::new();
    let mut per_step_rows = Vec::new();
    for kind in [ScoreKind::ForwardNfc, ScoreKind::ForwardCrdr, ScoreKind::RoundTrip] {
        if !c.score_kinds.contains(&kind) {
            continue;
        }
        let (by_step, held_by_step, delta) = match kind {
            ScoreKind::ForwardNfc => (&cal.nfc, &held.nfc, delta_forward),
            ScoreKind::ForwardCrdr => (&cal.crdr, &held.crdr, delta_forward),
            ScoreKind::RoundTrip => (&cal.round_trip, &held.round_trip, delta_round_trip),
        };
        let pooled: Vec<f64> = by_step.iter().flatten().copied().collect();
        let result = conformal_quantile(&pooled, delta, kind)?;
        let mut q = result.q;
        if c.per_step {
            let steps: Vec<Vec<f64>> = by_step.iter().filter(|s| !s.is_empty()).cloned().collect();
            let per = conformal_quantile_per_step(&steps, delta, kind)?;
            q = per.iter().map(|r| r.q).fold(f64::NEG_INFINITY, f64::max);
            for (k, r) in per.iter().enumerate() {
                per_step_rows.push(format!("{},{k},{},{}", kind, r.m(), conformal::fmt_float(r.q)));
            }
        }
        if q.is_infinite() {
            let msg = format!(
                "{kind}: {} calibration scores are too few for δ = {delta}; the quantile is +inf",
                result.m()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        match kind {
            ScoreKind::ForwardNfc => quantiles.forward_nfc = Some(Quantile(q)),
            ScoreKind::ForwardCrdr => quantiles.forward_crdr = Some(Quantile(q)),
            ScoreKind::RoundTrip => quantiles.round_trip = Some(Quantile(q)),
        }
        heldout.insert(kind.label().to_string(), held_by_step.iter().flatten().copied().collect());
        results.push(result);
    }

    let calibration_logs = &logs[..c.calibration_rollouts];
    let latents: Vec<DVector<f64>> = calibration_logs
        .iter()
        .flat_map(|l| l.records.iter().map(|r| DVector::from_column_slice(&r.z)))
        .collect();
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = {
        let available = latents.len().saturating_sub(1);
        let stride = (available / c.lipschitz_pairs).max(1);
        (0..available)
            .step_by(stride)
            .take(c.lipschitz_pairs)
            .map(|i| (latents[i].clone(), latents[i + 1].clone()))
            .collect()
    };
    let lipschitz = estimate_lipschitz(&model.decoder, &pairs, c.lipschitz_safety)?;
    let max_initial_lyapunov = calibration_logs
        .iter()
        .filter_map(|l| l.records.first().map(|r| r.lyapunov))
        .fold(0.0, f64::max);

    let file = CalibrationFile {
        version: FORMAT_VERSION,
        alpha: c.alpha,
        beta: c.beta,
        horizon: c.horizon,
        delta_forward,
        delta_round_trip,
        per_step: c.per_step,
        results,
        quantiles,
        heldout,
        lipschitz,
        max_initial_lyapunov,
        calibration_rollouts: c.calibration_rollouts,
        failed_rollouts,
        warnings,
    };

    let dir = layout.calibration_dir();
    ensure_dir(&dir)?;
    conformal::write_calibration_csv(&layout.calibration_csv(), &file.results)?;
    if c.per_step {
        let mut text = String::from("kind,k,m,q\n");
        for row in per_step_rows {
            text.push_str(&row);
            text.push('\n');
        }
        write_text(&layout.per_step_csv(), &text)?;
    }
    if let Some(q) = file.quantiles.forward_crdr {
        let dr = conformal::delta_r(BoundKind::Crdr, q.0, spec.gamma, spec.rho, spec.m_bar, spec.m_under)?;
        if dr < 0.0 {
            log::warn!("negative CRDR radius {dr}: the margin ρ exceeds the calibrated quantile");
        }
        let mut profile = BoundProfile::new(
            max_initial_lyapunov,
            spec.gamma,
            cfg.rollout.horizon - 1,
            dr,
            spec.m_under,
            c.alpha,
            c.beta,
        );
        if let Some(rt) = file.quantiles.round_trip {
            profile = profile.with_state_bound(rt.0, lipschitz.value);
        }
        profile.write_csv(&layout.bound_profile_csv())?;
    }
    write_samples(cfg, &layout.samples_csv(), calibration_logs)?;
    write_json(&layout.calibration_json(), &file)?;
    for kind_result in &file.results {
        log::info!("calibrate: {}", kind_result.csv_row());
    }
    Ok(file)
}

/// Observations visited by the calibration rollouts, subsampled for the contraction check.
fn write_samples(cfg: &ExperimentConfig, path: &Path, logs: &[TrajectoryLog]) -> Result<()> {
    let all: Vec<&Vec<f64>> = logs.iter().flat_map(|l| l.records.iter().map(|r| &r.observation)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.data.seed, stream::CONTRACTION, 0));
    let mut picked: Vec<usize> = index::sample(&mut rng, all.len(), cfg.contraction.samples.min(all.len())).into_vec();
    picked.sort_unstable();
    let dim = all.first().map_or(OBSERVATION_DIM, |o| o.len());
    let mut text = (0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for i in picked {
        text.push_str(&all[i].iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub controller: ControllerKind,
    pub seed: u64,
    pub file: String,
    pub failed: bool,
    pub steps: usize,
    pub terminal_pos_err: f64,
    pub saturation_count: usize,
    pub max_delta_v: Option<f64>,
    pub failure: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunIndex {
    pub entries: Vec<RunEntry>,
}

impl RunIndex {
    pub const CSV_HEADER: &'static str =
        "controller,seed,file,failed,steps,terminal_pos_err,saturation_count,max_delta_v,failure";

    pub fn to_csv(&self) -> String {
        let mut text = String::from(Self::CSV_HEADER);
        text.push('\n');
        for e in &self.entries {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.controller.label(),
                e.seed,
                e.file,
                e.failed,
                e.steps,
                conformal::fmt_float(e.terminal_pos_err),
                e.saturation_count,
                e.max_delta_v.map_or("NA".to_string(), conformal::fmt_float),
                e.failure.replace([',', '\n'], ";")
            ));
        }
        text
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::CSV_HEADER => {}
            _ => return Err(Error::format(path, "line 1: unexpected run index header")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let at = |m: &str| Error::format(path, format!("line {}: {m}", i + 1));
            let f: Vec<&str> = line.splitn(9, ',').collect();
            if f.len() != 9 {
                return Err(at("expected 9 fields"));
            }
            let num = |s: &str| match s {
                "inf" => Ok(f64::INFINITY),
                _ => s.parse::<f64>().map_err(|_| at("bad number")),
            };
            entries.push(RunEntry {
                controller: f[0].parse()?,
                seed: f[1].parse().map_err(|_| at("bad seed"))?,
                file: f[2].to_string(),
                failed: f[3].parse().map_err(|_| at("bad flag"))?,
                steps: f[4].parse().map_err(|_| at("bad step count"))?,
                terminal_pos_err: num(f[5])?,
                saturation_count: f[6].parse().map_err(|_| at("bad count"))?,
                max_delta_v: if f[7] == "NA" { None } else { Some(num(f[7])?) },
                failure: f[8].to_string(),
            });
        }
        Ok(Self { entries })
    }
}

pub fn log_file_name(kind: ControllerKind, seed: u64) -> String {
    format!("{}_seed{seed:04}.csv", kind.label())
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunIndex> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let model = ModelFile::load(&layout.model_json())?.model;
    let spec = ControllerFile::load(&layout.controller_json())?.spec;
    let calibration = CalibrationFile::load(&layout.calibration_json())?;
    let reference = reference(cfg)?;
    let art = Artifacts {
        model: &model,
        spec: &spec,
        reference: &reference,
    };
    let jobs: Vec<(ControllerKind, u64)> = cfg
        .rollout
        .controllers
        .iter()
        .flat_map(|k| (0..cfg.rollout.seeds as u64).map(move |s| (*k, s)))
        .collect();
    let logs: Vec<TrajectoryLog> = jobs
        .par_iter()
        .map(|(kind, s)| {
            let seed = seeds::derive(cfg.data.seed, stream::EVALUATION, *s);
            run_one(cfg, &art, *kind, calibration.bound_inputs(*kind), *s, seed)
        })
        .collect::<Result<_>>()?;
    ensure_dir(&layout.runs_dir())?;
    let mut index = RunIndex::default();
    for log in &logs {
        let file = log_file_name(log.controller, log.seed);
        log.save(&layout.runs_dir().join(&file))?;
        index.entries.push(RunEntry {
            controller: log.controller,
            seed: log.seed,
            file,
            failed: log.failed,
            steps: log.records.len(),
            terminal_pos_err: log.terminal_position_error().unwrap_or(f64::NAN),
            saturation_count: log.saturation_count(),
            max_delta_v: log.records.iter().filter_map(|r| r.delta_v).reduce(f64::max),
            failure: log.failure.clone().unwrap_or_default(),
        });
    }
    write_text(&layout.index_csv(), &index.to_csv())?;
    let ok = index.entries.iter().filter(|e| !e.failed).count();
    log::info!("run: {ok}/{} rollouts completed", index.entries.len());
    if ok == 0 {
        return Err(Error::numerical("every rollout aborted"));
    }
    Ok(index)
}

pub fn load_logs(layout: &Layout, index: &RunIndex) -> Result<Vec<TrajectoryLog>> {
    index
        .entries
        .iter()
        .map(|e| TrajectoryLog::load(&layout.runs_dir().join(&e.file)))
        .collect()
}

pub fn validate(cfg: &ExperimentConfig) -> Result<ValidationSummary> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let calibration = CalibrationFile::load(&layout.calibration_json())?;
    let index = RunIndex::load(&layout.index_csv())?;
    let logs = load_logs(&layout, &index)?;
    let contraction = if cfg.contraction.enabled && layout.samples_csv().exists() {
        let model = ModelFile::load(&layout.model_json())?.model;
        let spec = ControllerFile::load(&layout.controller_json())?.spec;
        let samples = read_samples(&layout.samples_csv())?;
        Some(validation::dubins_contraction(cfg, &model, &spec, &samples)?)
    } else {
        None
    };
    let summary = validation::summarize(&calibration, &logs, contraction)?;
    ensure_dir(&layout.validation_dir())?;
    if let Some(c) = &summary.contraction {
        write_text(
            &layout.contraction_csv(),
            &format!("{}\n{}\n", crate::contraction::ContractionReport::CSV_HEADER, c.csv_row()),
        )?;
    }
    write_json(&layout.summary_json(), &summary)?;
    write_text(&layout.summary_txt(), &summary.table())?;
    Ok(summary)
}

pub fn report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let summary: ValidationSummary = read_json(&layout.summary_json())?;
    let index = RunIndex::load(&layout.index_csv())?;
    let logs = load_logs(&layout, &index)?;
    let reference = reference(cfg)?;
    report::write_report(cfg, &layout, &summary, &logs, &reference)?;
    Ok(layout.report_md())
}

/// Every stage in order.
pub fn all(cfg: &ExperimentConfig) -> Result<ValidationSummary> {
    cfg.validate()?;
    write_config(cfg)?;
    collect(cfg)?;
    fit(cfg)?;
    synth(cfg)?;
    calibrate(cfg)?;
    run(cfg)?;
    let summary = validate(cfg)?;
    report(cfg)?;
    Ok(summary)
}
