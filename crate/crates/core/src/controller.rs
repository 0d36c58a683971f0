//! Latent-space tracking controllers.
//!
//! The nominal feedback controller (NFC) is `u = u_d − K e`, with `K` and a
//! metric `M = ΘᵀΘ` certified by `A_clᵀ M A_cl ⪯ γ M`. The robust controller
//! (CRDR) solves, every step,
//!
//! ```text
//! min ‖Δu‖² + c_v Δv²   s.t.   ‖Θ(A e + B Δu)‖ ≤ γ‖Θ e‖ − ρ + Δv,   Δv ≥ 0
//! ```
//!
//! by eliminating the slack and reducing the stationarity conditions to a
//! monotone scalar equation in a multiplier `μ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::matrix_serde;

/// Named CRDR parameter sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrdrPreset {
    pub name: &'static str,
    pub c_v: f64,
    pub rho: f64,
    pub gamma: f64,
}

pub const DUBINS_PRESET: CrdrPreset = CrdrPreset {
    name: "dubins-paper",
    c_v: 0.01,
    rho: 0.073,
    gamma: 0.9,
};

/// Flapping-wing parameters; documentation only.
pub const FLAPPER_PRESET: CrdrPreset = CrdrPreset {
    name: "flapper-doc",
    c_v: 100.0,
    rho: 1.0,
    gamma: 0.9,
};

/// Gain, contraction metric and CRDR parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    #[serde(with = "matrix_serde::matrix")]
    pub k: DMatrix<f64>,
    #[serde(with = "matrix_serde::matrix")]
    pub m: DMatrix<f64>,
    #[serde(with = "matrix_serde::matrix")]
    pub theta: DMatrix<f64>,
    pub gamma: f64,
    pub rho: f64,
    pub c_v: f64,
    /// Largest eigenvalue of `M` (squared largest singular value of `Θ`).
    pub m_bar: f64,
    /// Smallest eigenvalue of `M`.
    pub m_under: f64,
    /// `λmax(A_clᵀ M A_cl − γ M)` at synthesis time.
    pub certificate: f64,
}

impl ControllerSpec {
    pub fn with_crdr_params(mut self, rho: f64, c_v: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::input(format!("rho must be finite and ≥ 0, got {rho}")));
        }
        if !(c_v.is_finite() && c_v > 0.0) {
            return Err(Error::input(format!("c_v must be finite and > 0, got {c_v}")));
        }
        self.rho = rho;
        self.c_v = c_v;
        Ok(self)
    }

    pub fn latent_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.k.nrows()
    }

    /// `√(m̄/m̲)`, the latent condition number of the metric.
    pub fn metric_condition(&self) -> f64 {
        (self.m_bar / self.m_under).sqrt()
    }

    /// Lyapunov value `v = ‖Θ e‖`.
    pub fn lyapunov_value(&self, e: &DVector<f64>) -> f64 {
        (&self.theta * e).norm()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.m.nrows();
        linalg::require_square("M", &self.m)?;
        linalg::require_square("Theta", &self.theta)?;
        check_len("Theta", self.theta.nrows(), n)?;
        check_len("K columns", self.k.ncols(), n)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::input(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.m_under > 0.0 && self.m_bar >= self.m_under) {
            return Err(Error::input("metric eigenvalue bounds are invalid"));
        }
        let recon = (self.theta.transpose() * &self.theta - &self.m).norm();
        if recon > 1e-9 * self.m.norm() {
            return Err(Error::input("ΘᵀΘ does not reproduce M"));
        }
        Ok(())
    }
}

/// Knobs for [`synthesize_metric_with`].
#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    /// Right-hand side of the γ-scaled Lyapunov equation.
    pub q_lyapunov: DMatrix<f64>,
    /// Initial LQR state weight scale (`Q_lqr = scale · I`).
    pub q_lqr_scale: f64,
    pub r_lqr_scale: f64,
    /// Number of ×10 increases of `Q_lqr` tried after the first attempt.
    pub max_q_increases: usize,
    /// Minimum σmin of the controllability matrix.
    pub controllability_floor: f64,
    pub riccati_max_iters: usize,
    /// When plain LQR misses the rate, retry on `(A/α, B/α)` with
    /// `α = discount_margin·√γ`, which bounds `ρ(A − BK)` by `α`.
    pub discounted_fallback: bool,
    pub discount_margin: f64,
}

impl SynthesisOptions {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            q_lyapunov: DMatrix::identity(latent_dim, latent_dim),
            q_lqr_scale: 1.0,
            r_lqr_scale: 1.0,
            max_q_increases: 6,
            controllability_floor: 1e-14,
            riccati_max_iters: 200_000,
            discounted_fallback: true,
            discount_margin: 0.99,
        }
    }
}

/// Discrete-time LQR gain by Riccati iteration.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iters: usize,
) -> Result<DMatrix<f64>> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..max_iters {
        let s = r + &bt * &p * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::numerical("R + BᵀPB is singular"))?;
        let next = &at * &p * a - &at * &p * b * &s_inv * &bt * &p * a + q;
        let next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Synthesis("Riccati iteration diverged (pair not stabilizable?)".into()));
        }
        let delta = (&next - &p).norm();
        p = next;
        if delta <= 1e-13 * p.norm().max(1.0) {
            break;
        }
    }
    let s = r + &bt * &p * b;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::numerical("R + BᵀPB is singular"))?;
    Ok(s_inv * &bt * &p * a)
}

/// `λmax(A_clᵀ M A_cl − γ M)`; non-positive certifies the contraction LMI.
pub fn verify_lmi(a_cl: &DMatrix<f64>, m: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    linalg::require_square("A_cl", a_cl)?;
    check_len("M", m.nrows(), a_cl.nrows())?;
    let r = a_cl.transpose() * m * a_cl - m * gamma;
    linalg::max_symmetric_eigenvalue(&r)
}

/// [`synthesize_metric_with`] with default options and Lyapunov right-hand side `q`.
pub fn synthesize_metric(a: &DMatrix<f64>, b: &DMatrix<f64>, gamma: f64, q: &DMatrix<f64>) -> Result<ControllerSpec> {
    let mut opts = SynthesisOptions::new(a.nrows());
    opts.q_lyapunov = q.clone();
    synthesize_metric_with(a, b, gamma, &opts)
}

/// LQR gain accepted once `ρ(A − BK) < √γ` (plain LQR with growing state
/// weight, then optionally a discounted LQR), then `M` from
/// `A_clᵀ M A_cl − γ M = −Q` and `Θ` its upper Cholesky factor.
pub fn synthesize_metric_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: f64,
    opts: &SynthesisOptions,
) -> Result<ControllerSpec> {
    linalg::require_square("A", a)?;
    let n = a.nrows();
    check_len("B rows", b.nrows(), n)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::input(format!("gamma must lie in (0,1), got {gamma}")));
    }
    let q = &opts.q_lyapunov;
    check_len("Q", q.nrows(), n)?;
    let q_eigs = linalg::symmetric_eigenvalues(q)?;
    if (q - q.transpose()).norm() > 1e-12 * q.norm() || q_eigs[0] <= 0.0 {
        return Err(Error::input("Q must be symmetric positive definite"));
    }
    let (smin, _) = linalg::controllability_extremes(a, b)?;
    if smin <= opts.controllability_floor {
        return Err(Error::Synthesis(format!(
            "(A,B) is not controllable enough: σmin(C) = {smin:e} ≤ floor {:e}",
            opts.controllability_floor
        )));
    }

    let m_in = b.ncols();
    let r = DMatrix::identity(m_in, m_in) * opts.r_lqr_scale;
    let target = gamma.sqrt();
    let mut scale = opts.q_lqr_scale;
    let mut accepted = None;
    let mut best_radius = f64::INFINITY;
    for _ in 0..=opts.max_q_increases {
        let q_lqr = DMatrix::identity(n, n) * scale;
        if let Ok(k) = dlqr(a, b, &q_lqr, &r, opts.riccati_max_iters) {
            let radius = linalg::spectral_radius(&(a - b * &k))?;
            best_radius = best_radius.min(radius);
            if radius < target {
                accepted = Some(k);
                break;
            }
        }
        scale *= 10.0;
    }
    if accepted.is_none() && opts.discounted_fallback {
        let alpha = opts.discount_margin * target;
        let q_lqr = DMatrix::identity(n, n) * opts.q_lqr_scale;
        if let Ok(k) = dlqr(&(a / alpha), &(b / alpha), &q_lqr, &r, opts.riccati_max_iters) {
            let radius = linalg::spectral_radius(&(a - b * &k))?;
            best_radius = best_radius.min(radius);
            if radius < target {
                accepted = Some(k);
            }
        }
    }
    let k = accepted.ok_or_else(|| {
        Error::Synthesis(format!(
            "no LQR gain reached ρ(A−BK) < √γ = {target:.6} (best {best_radius:.6}); try a larger γ"
        ))
    })?;

    let a_cl = a - b * &k;
    let m = linalg::solve_discrete_lyapunov(&(&a_cl / target), &(q / gamma))?;
    let eig = linalg::symmetric_eigenvalues(&m)?;
    let (m_under, m_bar) = (eig[0], eig[eig.len() - 1]);
    if !(m_under > 0.0) {
        return Err(Error::numerical("Lyapunov solution is not positive definite"));
    }
    let theta = linalg::cholesky_upper(&m)?;
    let certificate = verify_lmi(&a_cl, &m, gamma)?;
    if certificate > 1e-8 {
        return Err(Error::numerical(format!(
            "LMI certificate failed: λmax = {certificate:e}"
        )));
    }
    Ok(ControllerSpec {
        k,
        m,
        theta,
        gamma,
        rho: 0.0,
        c_v: 1.0,
        m_bar,
        m_under,
        certificate,
    })
}

/// Moduli of the eigenvalues of `A − BK`, descending.
pub fn closed_loop_moduli(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = linalg::eigenvalues(&(a - b * k))?.iter().map(|l| l.norm()).collect();
    v.sort_by(|x, y| y.total_cmp(x));
    Ok(v)
}

/// `u = u_d − K e`.
pub fn nfc_input(spec: &ControllerSpec, u_d: &DVector<f64>, e: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("nfc: u_d", u_d.len(), spec.input_dim())?;
    check_len("nfc: e", e.len(), spec.latent_dim())?;
    Ok(u_d - &spec.k * e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrdrSolution {
    pub u: DVector<f64>,
    pub delta_u: DVector<f64>,
    pub delta_v: f64,
    pub objective: f64,
    /// `(γ‖Θe‖ − ρ + Δv) − ‖Θ(Ae + BΔu)‖`, non-negative up to rounding.
    pub constraint_gap: f64,
    pub iterations: usize,
}

/// `min g(Δu) = ‖Δu‖² + c_v max(0, ‖a + FΔu‖ − r0)²` with `a = ΘAe`, `F = ΘB`,
/// `r0 = γ‖Θe‖ − ρ`.
#[derive(Debug, Clone)]
pub struct CrdrSubproblem {
    pub a: DVector<f64>,
    pub f: DMatrix<f64>,
    pub r0: f64,
    pub c_v: f64,
}

const CRDR_MAX_ITERS: usize = 200;
const CRDR_TOL: f64 = 1e-9;

impl CrdrSubproblem {
    pub fn slack(&self, du: &DVector<f64>) -> f64 {
        ((&self.a + &self.f * du).norm() - self.r0).max(0.0)
    }

    pub fn objective(&self, du: &DVector<f64>) -> f64 {
        let s = self.slack(du);
        du.norm_squared() + self.c_v * s * s
    }

    /// Returns the minimizer and the number of multiplier iterations.
    pub fn solve(&self) -> Result<(DVector<f64>, usize)> {
        let m = self.f.ncols();
        let a_norm = self.a.norm();
        if a_norm <= self.r0 {
            return Ok((DVector::zeros(m), 0));
        }
        let svd = self.f.clone().svd(true, true);
        let u = svd.u.as_ref().ok_or_else(|| Error::Solver("svd without U".into()))?;
        let vt = svd.v_t.as_ref().ok_or_else(|| Error::Solver("svd without Vᵀ".into()))?;
        let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
        let proj: Vec<f64> = (0..sigma.len()).map(|i| u.column(i).dot(&self.a)).collect();
        let mut in_range = DVector::zeros(self.a.len());
        for (i, b) in proj.iter().enumerate() {
            in_range += u.column(i) * *b;
        }
        let perp_sq = (&self.a - in_range).norm_squared();
        let smax = sigma.iter().copied().fold(0.0, f64::max);
        let active: Vec<bool> = sigma.iter().map(|s| *s > 1e-14 * smax.max(f64::MIN_POSITIVE)).collect();

        // ‖a + FΔu(μ)‖ and its μ-derivative.
        let t_of = |mu: f64| -> (f64, f64) {
            let mut t2 = perp_sq;
            let mut dt2 = 0.0;
            for i in 0..sigma.len() {
                let s2 = if active[i] { sigma[i] * sigma[i] } else { 0.0 };
                let d = 1.0 + mu * s2;
                t2 += proj[i] * proj[i] / (d * d);
                dt2 -= 2.0 * proj[i] * proj[i] * s2 / (d * d * d);
            }
            let t = t2.max(0.0).sqrt();
            let dt = if t > 0.0 { dt2 / (2.0 * t) } else { 0.0 };
            (t, dt)
        };
        let c_v = self.c_v;
        let phi = |mu: f64| -> (f64, f64) {
            let (t, dt) = t_of(mu);
            ((mu - c_v) * t + c_v * self.r0, t + (mu - c_v) * dt)
        };
        let du_of = |mu: f64| -> DVector<f64> {
            let mut du = DVector::zeros(m);
            for i in 0..sigma.len() {
                if active[i] {
                    let s = sigma[i];
                    du -= vt.row(i).transpose() * (mu * s / (1.0 + mu * s * s) * proj[i]);
                }
            }
            du
        };
        let kink = || -> DVector<f64> {
            let mut du = DVector::zeros(m);
            for i in 0..sigma.len() {
                if active[i] {
                    du -= vt.row(i).transpose() * (proj[i] / sigma[i]);
                }
            }
            du
        };

        let scale = c_v * a_norm.max(self.r0.abs()).max(f64::MIN_POSITIVE);
        let mut lo = 0.0;
        let mut hi = c_v.max(1.0);
        let mut iterations = 0;
        while phi(hi).0 <= 0.0 {
            hi *= 4.0;
            iterations += 1;
            if hi > 1e300 || iterations > CRDR_MAX_ITERS {
                // The optimum sits at a + FΔu = 0 (only possible when r0 < 0).
                return Ok((kink(), iterations));
            }
        }
        let mut mu = 0.5 * (lo + hi);
        for _ in 0..CRDR_MAX_ITERS {
            iterations += 1;
            let (val, deriv) = phi(mu);
            if val.abs() <= CRDR_TOL * scale * 1e-3 {
                break;
            }
            if val < 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            let newton = if deriv > 0.0 { mu - val / deriv } else { f64::NAN };
            mu = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        let (val, _) = phi(mu);
        if !(val.abs() <= CRDR_TOL * scale) && hi - lo > 1e-12 * hi {
            return Err(Error::Solver(format!(
                "CRDR multiplier search did not converge: residual {val:e}, μ ∈ [{lo:e}, {hi:e}]"
            )));
        }
        Ok((du_of(mu), iterations))
    }
}

pub fn crdr_reduce(
    spec: &ControllerSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<CrdrSubproblem> {
    let n = spec.latent_dim();
    check_len("crdr: e", e.len(), n)?;
    check_len("crdr: A", a.nrows(), n)?;
    check_len("crdr: B rows", b.nrows(), n)?;
    check_len("crdr: B cols", b.ncols(), spec.input_dim())?;
    if !(spec.c_v > 0.0) {
        return Err(Error::input("crdr: c_v must be positive"));
    }
    Ok(CrdrSubproblem {
        a: &spec.theta * (a * e),
        f: &spec.theta * b,
        r0: spec.gamma * spec.lyapunov_value(e) - spec.rho,
        c_v: spec.c_v,
    })
}

/// One CRDR step: returns `u = u_d + Δu` and the optimal slack.
pub fn crdr_step(
    spec: &ControllerSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    e: &DVector<f64>,
    u_d: &DVector<f64>,
) -> Result<CrdrSolution> {
    check_len("crdr: u_d", u_d.len(), spec.input_dim())?;
    let sub = crdr_reduce(spec, a, b, e)?;
    let (delta_u, iterations) = sub.solve()?;
    let lhs = (&sub.a + &sub.f * &delta_u).norm();
    let delta_v = (lhs - sub.r0).max(0.0);
    Ok(CrdrSolution {
        u: u_d + &delta_u,
        objective: delta_u.norm_squared() + sub.c_v * delta_v * delta_v,
        constraint_gap: sub.r0 + delta_v - lhs,
        delta_u,
        delta_v,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn spec_1d(theta: f64, gamma: f64, rho: f64, c_v: f64) -> ControllerSpec {
        ControllerSpec {
            k: scalar(0.0),
            m: scalar(theta * theta),
            theta: scalar(theta),
            gamma,
            rho,
            c_v,
            m_bar: theta * theta,
            m_under: theta * theta,
            certificate: 0.0,
        }
    }

    #[test]
    fn zero_dynamics_metric_is_q_over_gamma() {
        let spec = synthesize_metric(&scalar(0.0), &scalar(1.0), 0.9, &scalar(1.0)).unwrap();
        assert!((spec.m[(0, 0)] - 1.0 / 0.9).abs() < 1e-12);
        assert_eq!(spec.k[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_integrator_certificate() {
        let spec = synthesize_metric(&scalar(1.0), &scalar(1.0), 0.81, &scalar(1.0)).unwrap();
        let k = spec.k[(0, 0)];
        assert!((1.0 - k).abs() < 0.9);
        assert!(spec.certificate <= 1e-8);
    }

    #[test]
    fn identity_metric_is_isotropic() {
        let spec = spec_1d(1.0, 0.9, 0.0, 1.0);
        assert_eq!(spec.metric_condition(), 1.0);
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        assert!(matches!(
            synthesize_metric(&scalar(0.5), &scalar(1.0), 1.5, &scalar(1.0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn uncontrollable_pair_rejected() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            synthesize_metric(&a, &b, 0.9, &DMatrix::identity(2, 2)),
            Err(Error::Synthesis(_))
        ));
    }

    #[test]
    fn verify_lmi_examples() {
        let i2 = DMatrix::identity(2, 2);
        assert!((verify_lmi(&DMatrix::zeros(2, 2), &i2, 0.9).unwrap() + 0.9).abs() < 1e-15);
        let g: f64 = 0.81;
        assert!(verify_lmi(&(&i2 * g.sqrt()), &i2, g).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nfc_examples() {
        let spec = spec_1d(1.0, 0.9, 0.0, 1.0);
        let ud = DVector::from_vec(vec![1.0]);
        assert_eq!(nfc_input(&spec, &ud, &DVector::zeros(1)).unwrap(), ud);
        let mut s2 = spec.clone();
        s2.k = scalar(2.0);
        assert_eq!(nfc_input(&s2, &ud, &DVector::from_vec(vec![0.5])).unwrap()[0], 0.0);
    }

    #[test]
    fn crdr_scalar_instance() {
        // |1 + Δu| ≤ 0.5 + Δv → Δu = −0.25, Δv = 0.25, objective 0.125
        let spec = spec_1d(1.0, 0.5, 0.0, 1.0);
        let sol = crdr_step(&spec, &scalar(1.0), &scalar(1.0), &DVector::from_vec(vec![1.0]), &DVector::zeros(1)).unwrap();
        assert!((sol.delta_u[0] + 0.25).abs() < 1e-9);
        assert!((sol.delta_v - 0.25).abs() < 1e-9);
        assert!((sol.objective - 0.125).abs() < 1e-9);
    }

    #[test]
    fn crdr_feasible_at_zero() {
        let spec = spec_1d(1.0, 0.9, 0.0, 1.0);
        let sol = crdr_step(&spec, &scalar(0.5), &scalar(1.0), &DVector::from_vec(vec![1.0]), &DVector::from_vec(vec![0.3])).unwrap();
        assert_eq!(sol.delta_u[0], 0.0);
        assert_eq!(sol.delta_v, 0.0);
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.u[0], 0.3);
    }

    #[test]
    fn crdr_without_actuation_uses_slack_only() {
        let spec = spec_1d(1.0, 0.5, 0.1, 0.01);
        let sol = crdr_step(&spec, &scalar(1.2), &scalar(0.0), &DVector::from_vec(vec![1.0]), &DVector::zeros(1)).unwrap();
        assert_eq!(sol.delta_u[0], 0.0);
        assert!((sol.delta_v - (1.2 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn crdr_negative_radius_with_zero_error_is_pure_slack() {
        let spec = spec_1d(1.0, 0.9, 0.073, 0.01);
        let sol = crdr_step(&spec, &scalar(1.0), &scalar(1.0), &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert_eq!(sol.delta_u[0], 0.0);
        assert!((sol.delta_v - 0.073).abs() < 1e-15);
    }

    #[test]
    fn crdr_kink_solution_when_slack_is_expensive() {
        // r0 < 0 and a ∈ range(F): the optimum drives a + FΔu to zero.
        let spec = spec_1d(1.0, 0.5, 1.0, 100.0);
        let sol = crdr_step(&spec, &scalar(1.0), &scalar(1.0), &DVector::from_vec(vec![0.1]), &DVector::zeros(1)).unwrap();
        assert!((sol.delta_u[0] + 0.1).abs() < 1e-9);
        assert!((sol.delta_v - 0.95).abs() < 1e-9);
    }
}
