//! Experiment configuration: a sectioned TOML file on top of a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::ScoreKind;
use crate::controller::{CrdrPreset, DUBINS_PRESET, FLAPPER_PRESET};
use crate::dubins::{CollectionConfig, InputMode};
use crate::error::{Error, Result};
use crate::koopman_id::IdentificationConfig;
use crate::lifting::training::AutoencoderConfig;
use crate::lifting::{DecoderKind, DictionaryKind};
use crate::rollout::ControllerKind;

pub const PRESETS: [&str; 2] = ["dubins-paper", "flapper-doc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub episodes: usize,
    pub identification_episodes: usize,
    pub steps: usize,
    pub dt: f64,
    pub speed: f64,
    pub hold_steps: usize,
    pub position_box: f64,
    pub accel_max: f64,
    pub input_mode: InputMode,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CollectionConfig::default();
        Self {
            seed: 0,
            episodes: c.episodes,
            identification_episodes: 100,
            steps: c.steps,
            dt: c.dt,
            speed: c.speed,
            hold_steps: c.hold_steps,
            position_box: c.position_box,
            accel_max: c.accel_max,
            input_mode: c.input_mode,
        }
    }
}

impl DataSection {
    pub fn collection(&self, episodes: usize) -> CollectionConfig {
        CollectionConfig {
            episodes,
            steps: self.steps,
            dt: self.dt,
            speed: self.speed,
            hold_steps: self.hold_steps,
            position_box: self.position_box,
            accel_max: self.accel_max,
            input_mode: self.input_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftingSection {
    pub kind: DictionaryKind,
    pub constant: bool,
    pub rbf_count: usize,
    /// States used for the median-distance width heuristic.
    pub width_subsample: usize,
    pub decoder: DecoderKind,
    pub decoder_ridge: f64,
    pub encoder: AutoencoderConfig,
}

impl Default for LiftingSection {
    fn default() -> Self {
        Self {
            kind: DictionaryKind::IdentityAugmented,
            constant: false,
            rbf_count: 2,
            width_subsample: 500,
            decoder: DecoderKind::Projection,
            decoder_ridge: 1e-8,
            encoder: AutoencoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    /// Taken from the preset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_v: Option<f64>,
    /// Lyapunov right-hand side `Q = q_scale · I`.
    pub q_scale: f64,
    pub lqr_q_scale: f64,
    pub lqr_r_scale: f64,
    pub discounted_fallback: bool,
    pub controllability_floor: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            gamma: None,
            rho: None,
            c_v: None,
            q_scale: 1.0,
            lqr_q_scale: 1.0,
            lqr_r_scale: 1.0,
            discounted_fallback: true,
            controllability_floor: 1e-14,
        }
    }
}

impl ControllerSection {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(DUBINS_PRESET.gamma)
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or(DUBINS_PRESET.rho)
    }

    pub fn c_v(&self) -> f64 {
        self.c_v.unwrap_or(DUBINS_PRESET.c_v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformalSection {
    pub alpha: f64,
    pub beta: f64,
    /// Bound horizon `K`; forward scores are calibrated at `δ = α/K`.
    pub horizon: usize,
    pub calibration_rollouts: usize,
    /// Rollouts whose scores are kept aside to measure coverage.
    pub holdout_rollouts: usize,
    pub score_kinds: Vec<ScoreKind>,
    /// Calibrate each time step separately and use the largest quantile.
    pub per_step: bool,
    pub lipschitz_safety: f64,
    pub lipschitz_pairs: usize,
}

impl Default for ConformalSection {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            horizon: 50,
            calibration_rollouts: 40,
            holdout_rollouts: 10,
            score_kinds: vec![ScoreKind::ForwardNfc, ScoreKind::ForwardCrdr, ScoreKind::RoundTrip],
            per_step: false,
            lipschitz_safety: 1.0,
            lipschitz_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub controllers: Vec<ControllerKind>,
    /// Logged steps per rollout.
    pub horizon: usize,
    pub seeds: usize,
    pub radius: f64,
    pub speed: f64,
    /// Initial position offsets are uniform in `[−spread, spread]²`.
    pub position_spread: f64,
    pub heading_spread: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            controllers: vec![ControllerKind::Crdr, ControllerKind::Nfc],
            horizon: 50,
            seeds: 20,
            radius: 0.5,
            speed: 1.0,
            position_spread: 0.05,
            heading_spread: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionSection {
    pub enabled: bool,
    pub samples: usize,
    pub jac_step: f64,
    pub tolerance: f64,
}

impl Default for ContractionSection {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: 500,
            jac_step: 1e-5,
            tolerance: crate::contraction::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub out_dir: PathBuf,
    pub plots: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: String,
    pub data: DataSection,
    pub lifting: LiftingSection,
    pub identification: IdentificationConfig,
    pub controller: ControllerSection,
    pub conformal: ConformalSection,
    pub rollout: RolloutSection,
    pub contraction: ContractionSection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("dubins-paper").expect("built-in preset")
    }
}

/// A failed check, located by section and key.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub section: &'static str,
    pub key: &'static str,
    pub message: String,
}

fn issue(section: &'static str, key: &'static str, message: impl Into<String>) -> Issue {
    Issue {
        section,
        key,
        message: message.into(),
    }
}

fn crdr_preset(name: &str) -> Option<CrdrPreset> {
    match name {
        "dubins-paper" => Some(DUBINS_PRESET),
        "flapper-doc" => Some(FLAPPER_PRESET),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let p = crdr_preset(name).ok_or_else(|| {
            Error::Config(format!("unknown preset {name:?}; available: {}", PRESETS.join(", ")))
        })?;
        Ok(Self {
            preset: name.to_string(),
            data: DataSection::default(),
            lifting: LiftingSection::default(),
            identification: IdentificationConfig::default(),
            controller: ControllerSection {
                gamma: Some(p.gamma),
                rho: Some(p.rho),
                c_v: Some(p.c_v),
                ..ControllerSection::default()
            },
            conformal: ConformalSection::default(),
            rollout: RolloutSection::default(),
            contraction: ContractionSection::default(),
            report: ReportSection::default(),
        })
    }

    /// Parses `text`; `preset` overrides the file's own `preset` key.
    pub fn from_toml_str(text: &str, origin: &Path, preset: Option<&str>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let table: toml::Table = text.parse().unwrap_or_default();
        let preset_name = preset.map_or_else(|| cfg.preset.clone(), str::to_string);
        let p = crdr_preset(&preset_name).ok_or_else(|| {
            let line = locate(text, "", "preset").map_or(String::new(), |l| format!(":{l}"));
            Error::Config(format!(
                "{}{line}: unknown preset {preset_name:?}; available: {}",
                origin.display(),
                PRESETS.join(", ")
            ))
        })?;
        cfg.preset = preset_name;
        let has = |key: &str| {
            table
                .get("controller")
                .and_then(|c| c.as_table())
                .is_some_and(|c| c.contains_key(key))
        };
        if !has("gamma") {
            cfg.controller.gamma = Some(p.gamma);
        }
        if !has("rho") {
            cfg.controller.rho = Some(p.rho);
        }
        if !has("c_v") {
            cfg.controller.c_v = Some(p.c_v);
        }
        cfg.check_located(text, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path, preset)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Validation with the offending line looked up in `text`.
    pub fn check_located(&self, text: &str, origin: &Path) -> Result<()> {
        match self.check() {
            Ok(()) => Ok(()),
            Err(i) => {
                let at = locate(text, i.section, i.key).map_or(String::new(), |l| format!(":{l}"));
                Err(Error::Config(format!(
                    "{}{at}: {}.{}: {}",
                    origin.display(),
                    i.section,
                    i.key,
                    i.message
                )))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|i| Error::Config(format!("{}.{}: {}", i.section, i.key, i.message)))
    }

    pub fn check(&self) -> std::result::Result<(), Issue> {
        let d = &self.data;
        if d.episodes == 0 {
            return Err(issue("data", "episodes", "must be ≥ 1"));
        }
        if d.identification_episodes == 0 {
            return Err(issue("data", "identification_episodes", "must be ≥ 1"));
        }
        if d.steps == 0 {
            return Err(issue("data", "steps", "must be ≥ 1"));
        }
        if d.hold_steps == 0 {
            return Err(issue("data", "hold_steps", "must be ≥ 1"));
        }
        for (key, v) in [("dt", d.dt), ("speed", d.speed), ("position_box", d.position_box)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(issue("data", key, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(d.accel_max.is_finite() && d.accel_max >= 0.0) {
            return Err(issue("data", "accel_max", "must be finite and ≥ 0"));
        }

        let l = &self.lifting;
        match (l.kind, l.decoder) {
            (DictionaryKind::TrainedEncoder, DecoderKind::Projection) => {
                return Err(issue("lifting", "decoder", "projection needs the identity_augmented dictionary"))
            }
            (DictionaryKind::RadialBasis, DecoderKind::Projection) => {
                return Err(issue("lifting", "decoder", "projection needs the identity_augmented dictionary"))
            }
            (DictionaryKind::IdentityAugmented | DictionaryKind::RadialBasis, DecoderKind::TrainedDecoder) => {
                return Err(issue("lifting", "decoder", "trained_decoder needs the trained_encoder dictionary"))
            }
            _ => {}
        }
        if l.kind == DictionaryKind::RadialBasis && l.rbf_count == 0 {
            return Err(issue("lifting", "rbf_count", "radial_basis needs at least one feature"));
        }
        if l.rbf_count > 0 && l.width_subsample < 2 {
            return Err(issue("lifting", "width_subsample", "must be ≥ 2"));
        }
        if !(l.decoder_ridge.is_finite() && l.decoder_ridge >= 0.0) {
            return Err(issue("lifting", "decoder_ridge", "must be finite and ≥ 0"));
        }
        if l.kind == DictionaryKind::TrainedEncoder {
            l.encoder
                .validate()
                .map_err(|e| issue("lifting", "encoder", e.to_string()))?;
        }

        self.identification
            .validate()
            .map_err(|e| issue("identification", "", e.to_string()))?;

        let c = &self.controller;
        let gamma = c.gamma();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(issue("controller", "gamma", format!("must lie in (0, 1), got {gamma}")));
        }
        if !(c.rho().is_finite() && c.rho() >= 0.0) {
            return Err(issue("controller", "rho", "must be finite and ≥ 0"));
        }
        if !(c.c_v().is_finite() && c.c_v() > 0.0) {
            return Err(issue("controller", "c_v", "must be finite and > 0"));
        }
        for (key, v) in [
            ("q_scale", c.q_scale),
            ("lqr_q_scale", c.lqr_q_scale),
            ("lqr_r_scale", c.lqr_r_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(issue("controller", key, "must be finite and > 0"));
            }
        }
        if !(c.controllability_floor.is_finite() && c.controllability_floor >= 0.0) {
            return Err(issue("controller", "controllability_floor", "must be finite and ≥ 0"));
        }

        let cf = &self.conformal;
        if !(cf.alpha > 0.0 && cf.alpha < 1.0) {
            return Err(issue("conformal", "alpha", format!("must lie in (0, 1), got {}", cf.alpha)));
        }
        if !(cf.beta > 0.0 && cf.beta < 1.0) {
            return Err(issue("conformal", "beta", format!("must lie in (0, 1), got {}", cf.beta)));
        }
        if cf.alpha + cf.beta >= 1.0 {
            return Err(issue("conformal", "beta", "alpha + beta must be < 1"));
        }
        if cf.horizon == 0 {
            return Err(issue("conformal", "horizon", "must be ≥ 1"));
        }
        if cf.calibration_rollouts == 0 {
            return Err(issue("conformal", "calibration_rollouts", "must be ≥ 1"));
        }
        if cf.score_kinds.is_empty() {
            return Err(issue("conformal", "score_kinds", "must list at least one kind"));
        }
        if !(cf.lipschitz_safety.is_finite() && cf.lipschitz_safety >= 1.0) {
            return Err(issue("conformal", "lipschitz_safety", "must be ≥ 1"));
        }
        if cf.lipschitz_pairs < 2 {
            return Err(issue("conformal", "lipschitz_pairs", "must be ≥ 2"));
        }

        let r = &self.rollout;
        if r.controllers.is_empty() {
            return Err(issue("rollout", "controllers", "must list at least one controller"));
        }
        if r.horizon < 3 {
            return Err(issue("rollout", "horizon", "must be ≥ 3"));
        }
        if r.seeds == 0 {
            return Err(issue("rollout", "seeds", "must be ≥ 1"));
        }
        for (key, v) in [("radius", r.radius), ("speed", r.speed)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(issue("rollout", key, "must be finite and > 0"));
            }
        }
        for (key, v) in [("position_spread", r.position_spread), ("heading_spread", r.heading_spread)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(issue("rollout", key, "must be finite and ≥ 0"));
            }
        }

        let k = &self.contraction;
        if k.samples == 0 {
            return Err(issue("contraction", "samples", "must be ≥ 1"));
        }
        if !(k.jac_step > 0.0 && k.jac_step.is_finite()) {
            return Err(issue("contraction", "jac_step", "must be finite and > 0"));
        }
        if !(k.tolerance >= 0.0 && k.tolerance.is_finite()) {
            return Err(issue("contraction", "tolerance", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// 1-based line of `key` inside `[section]` (top level when `section` is empty).
pub fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut section_line = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        if current != section || key.is_empty() {
            continue;
        }
        if let Some((k, _)) = t.split_once('=') {
            if k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    section_line
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("test.toml"), None)
    }

    #[test]
    fn empty_file_is_the_dubins_preset() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.controller.gamma(), 0.9);
        assert_eq!(cfg.controller.rho(), 0.073);
        assert_eq!(cfg.controller.c_v(), 0.01);
    }

    #[test]
    fn flapper_preset_changes_controller_only() {
        let cfg = parse("preset = \"flapper-doc\"\n").unwrap();
        assert_eq!(cfg.controller.c_v(), 100.0);
        assert_eq!(cfg.controller.rho(), 1.0);
        let overridden = parse("preset = \"flapper-doc\"\n[controller]\nrho = 0.5\n").unwrap();
        assert_eq!(overridden.controller.rho(), 0.5);
        assert_eq!(overridden.controller.c_v(), 100.0);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = parse("[data]\nepisodes = 7\n[rollout]\nseeds = 3\ncontrollers = [\"nfc\"]\n").unwrap();
        let text = cfg.to_toml().unwrap();
        let again = parse(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_toml().unwrap());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse("[data]\nepisodes = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn out_of_range_gamma_reports_line() {
        let err = parse("[data]\nseed = 1\n\n[controller]\ngamma = 1.5\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("test.toml:5"), "{msg}");
        assert!(msg.contains("gamma"), "{msg}");
    }

    #[test]
    fn zero_episodes_rejected() {
        let msg = parse("[data]\nepisodes = 0\n").unwrap_err().to_string();
        assert!(msg.contains("test.toml:2") && msg.contains("episodes"), "{msg}");
    }

    #[test]
    fn unknown_preset_rejected() {
        let msg = parse("preset = \"nope\"\n").unwrap_err().to_string();
        assert!(msg.contains(":1") && msg.contains("nope"), "{msg}");
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn type_error_reports_line() {
        let msg = parse("[conformal]\nalpha = \"high\"\n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }
}
