//! Dubins-car ground truth, data collection and the circular reference.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman_id::{Transition, TransitionDataset};
use crate::seeds;

pub const OMEGA_LIMIT: f64 = PI;
pub const OBSERVATION_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DubinsState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl DubinsState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    /// `(x, y, sin θ, cos θ)`.
    pub fn observation(&self) -> Vec<f64> {
        let (s, c) = self.theta.sin_cos();
        vec![self.x, self.y, s, c]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }

    pub fn wrapped_heading(&self) -> f64 {
        wrap_angle(self.theta)
    }
}

/// Maps an angle to `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Forward-Euler kinematics.
pub fn dubins_step(s: &DubinsState, a: f64, omega: f64, dt: f64) -> DubinsState {
    DubinsState {
        x: s.x + s.v * dt * s.theta.cos(),
        y: s.y + s.v * dt * s.theta.sin(),
        theta: s.theta + omega * dt,
        v: s.v + a * dt,
    }
}

pub fn saturate_omega(omega: f64) -> f64 {
    omega.clamp(-OMEGA_LIMIT, OMEGA_LIMIT)
}

/// Which inputs the controller owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `u = ω`, speed held constant.
    #[default]
    TurnRate,
    /// `u = (a, ω)`.
    AccelTurnRate,
}

impl InputMode {
    pub fn input_dim(self) -> usize {
        match self {
            InputMode::TurnRate => 1,
            InputMode::AccelTurnRate => 2,
        }
    }

    /// Splits an input vector into `(a, ω)`.
    pub fn split(self, u: &[f64]) -> (f64, f64) {
        match self {
            InputMode::TurnRate => (0.0, u[0]),
            InputMode::AccelTurnRate => (u[0], u[1]),
        }
    }

    pub fn join(self, a: f64, omega: f64) -> Vec<f64> {
        match self {
            InputMode::TurnRate => vec![omega],
            InputMode::AccelTurnRate => vec![a, omega],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionConfig {
    pub episodes: usize,
    pub steps: usize,
    pub dt: f64,
    pub speed: f64,
    /// ω is resampled every this many steps and held in between.
    pub hold_steps: usize,
    /// Initial positions are uniform in `[−box, box]²`.
    pub position_box: f64,
    /// Acceleration range `[−max, max]` sampled in the two-input mode.
    pub accel_max: f64,
    pub input_mode: InputMode,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            steps: 100,
            dt: 0.1,
            speed: 1.0,
            hold_steps: 10,
            position_box: 1.0,
            accel_max: 0.5,
            input_mode: InputMode::TurnRate,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.steps == 0 || self.hold_steps == 0 {
            return Err(Error::Config("episodes, steps and hold_steps must be positive".into()));
        }
        for (name, v) in [("dt", self.dt), ("speed", self.speed), ("position_box", self.position_box)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if !(self.accel_max.is_finite() && self.accel_max >= 0.0) {
            return Err(Error::Config("accel_max must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

fn collect_episode(cfg: &CollectionConfig, episode: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0, episode as u64));
    let b = cfg.position_box;
    let x0 = rng.random_range(-b..=b);
    let y0 = rng.random_range(-b..=b);
    let theta0 = PI - rng.random_range(0.0..2.0 * PI);
    let mut s = DubinsState::new(x0, y0, theta0, cfg.speed);
    let mut omega = 0.0;
    let mut accel = 0.0;
    let mut out = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        if k % cfg.hold_steps == 0 {
            omega = rng.random_range(-OMEGA_LIMIT..=OMEGA_LIMIT);
            if cfg.input_mode == InputMode::AccelTurnRate {
                accel = rng.random_range(-cfg.accel_max..=cfg.accel_max);
            }
        }
        let next = dubins_step(&s, accel, omega, cfg.dt);
        out.push(Transition {
            episode: episode as u64,
            k: k as u64,
            x: s.observation(),
            u: cfg.input_mode.join(accel, omega),
            x_next: next.observation(),
        });
        s = next;
    }
    out
}

/// Random-steering episodes; a pure function of `(cfg, seed)`.
pub fn collect_episodes(cfg: &CollectionConfig, seed: u64) -> Result<TransitionDataset> {
    cfg.validate()?;
    let episodes: Vec<Vec<Transition>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| collect_episode(cfg, e, seed))
        .collect();
    let mut ds = TransitionDataset::new(OBSERVATION_DIM, cfg.input_mode.input_dim(), seed);
    ds.records.reserve(cfg.episodes * cfg.steps);
    for t in episodes.into_iter().flatten() {
        ds.push(t)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    /// Observations `(x, y, sin θ, cos θ)` per step.
    pub x_d: Vec<Vec<f64>>,
    pub u_d: Vec<Vec<f64>>,
    /// Unwrapped reference heading.
    pub theta_d: Vec<f64>,
    /// Turn rate before clipping.
    pub omega_raw: Vec<f64>,
    pub dt: f64,
    pub radius: f64,
    pub speed: f64,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.x_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_d.is_empty()
    }

    pub fn initial_state(&self) -> DubinsState {
        DubinsState::new(self.x_d[0][0], self.x_d[0][1], self.theta_d[0], self.speed)
    }
}

/// Counter-clockwise circle of radius `r` centred at `(0, r)`, starting at the
/// origin heading along `+x`, sampled at `T` steps.
pub fn circle_reference(
    radius: f64,
    speed: f64,
    dt: f64,
    steps: usize,
    mode: InputMode,
) -> Result<ReferenceTrajectory> {
    if !(radius > 0.0 && speed > 0.0 && dt > 0.0) {
        return Err(Error::input("circle_reference: radius, speed and dt must be positive"));
    }
    if steps < 3 {
        return Err(Error::input("circle_reference: need at least 3 steps"));
    }
    let theta_d: Vec<f64> = (0..steps).map(|k| speed * (k as f64 * dt) / radius).collect();
    let x_d: Vec<Vec<f64>> = theta_d
        .iter()
        .map(|th| {
            let (s, c) = th.sin_cos();
            vec![radius * s, radius - radius * c, s, c]
        })
        .collect();
    let omega_raw: Vec<f64> = (0..steps)
        .map(|k| {
            if k == 0 {
                (theta_d[1] - theta_d[0]) / dt
            } else if k == steps - 1 {
                (theta_d[k] - theta_d[k - 1]) / dt
            } else {
                (theta_d[k + 1] - theta_d[k - 1]) / (2.0 * dt)
            }
        })
        .collect();
    let u_d = omega_raw.iter().map(|w| mode.join(0.0, saturate_omega(*w))).collect();
    Ok(ReferenceTrajectory { x_d, u_d, theta_d, omega_raw, dt, radius, speed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &DubinsState, b: &DubinsState) -> bool {
        (a.x - b.x).abs() < 1e-15 && (a.y - b.y).abs() < 1e-15 && (a.theta - b.theta).abs() < 1e-15 && (a.v - b.v).abs() < 1e-15
    }

    #[test]
    fn step_examples() {
        let s = dubins_step(&DubinsState::new(0.0, 0.0, 0.0, 1.0), 0.0, 0.0, 0.1);
        assert!(close(&s, &DubinsState::new(0.1, 0.0, 0.0, 1.0)));
        let s = dubins_step(&DubinsState::new(0.0, 0.0, PI / 2.0, 1.0), 0.0, 0.0, 0.1);
        assert!(close(&s, &DubinsState::new(0.0, 0.1, PI / 2.0, 1.0)));
        let s = dubins_step(&DubinsState::new(0.0, 0.0, 0.0, 1.0), 2.0, 1.0, 0.1);
        assert!((s.theta - 0.1).abs() < 1e-15 && (s.v - 1.2).abs() < 1e-15);
    }

    #[test]
    fn saturation_examples() {
        assert_eq!(saturate_omega(0.5), 0.5);
        assert_eq!(saturate_omega(10.0), PI);
        assert_eq!(saturate_omega(-10.0), -PI);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn collection_counts_and_determinism() {
        let cfg = CollectionConfig { episodes: 1, steps: 1, ..Default::default() };
        assert_eq!(collect_episodes(&cfg, 3).unwrap().len(), 1);
        let cfg = CollectionConfig { episodes: 5, steps: 30, ..Default::default() };
        let a = collect_episodes(&cfg, 11).unwrap();
        let b = collect_episodes(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        a.validate().unwrap();
        for t in &a.records[..10] {
            assert_eq!(t.u, a.records[0].u);
        }
        assert!(collect_episodes(&CollectionConfig { episodes: 0, ..cfg }, 1).is_err());
    }

    #[test]
    fn two_input_mode_records_acceleration() {
        let cfg = CollectionConfig { episodes: 2, steps: 20, input_mode: InputMode::AccelTurnRate, ..Default::default() };
        let d = collect_episodes(&cfg, 5).unwrap();
        assert_eq!(d.input_dim, 2);
        assert!(d.records.iter().all(|t| t.u[0].abs() <= 0.5));
    }

    #[test]
    fn circle_reference_properties() {
        let r = circle_reference(0.5, 1.0, 0.1, 60, InputMode::TurnRate).unwrap();
        assert_eq!(r.x_d[0][..2], [0.0, 0.0]);
        for (k, x) in r.x_d.iter().enumerate() {
            assert!((x[2] * x[2] + x[3] * x[3] - 1.0).abs() < 1e-12);
            let d = (x[0] * x[0] + (x[1] - 0.5) * (x[1] - 0.5)).sqrt();
            assert!((d - 0.5).abs() < 1e-9);
            assert!(r.u_d[k][0].abs() <= PI);
        }
        for w in &r.omega_raw[1..59] {
            assert!((w - 2.0).abs() < 1e-6);
        }
        assert!(circle_reference(0.5, 1.0, 0.1, 2, InputMode::TurnRate).is_err());
    }

    #[test]
    fn tight_circle_is_clipped() {
        let r = circle_reference(0.1, 1.0, 0.1, 10, InputMode::TurnRate).unwrap();
        assert!(r.omega_raw[3] > PI);
        assert_eq!(r.u_d[3][0], PI);
    }
}
