//! Sampled a-posteriori check of the state-space contraction condition
//! `Fᵀ W(f(x)) F ⪯ γ W(x)` with `W(x) = Ĝ(x)ᵀ M Ĝ(x)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::lifting::{finite_difference_jacobian, Dictionary};
use crate::linalg;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Below this σmin the lifting Jacobian is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub samples: usize,
    /// Samples dropped because the closed-loop map returned non-finite values.
    pub excluded: usize,
    #[serde(with = "crate::conformal::extended_float")]
    pub max_violation: f64,
    #[serde(with = "crate::conformal::extended_float")]
    pub min_jacobian_sigma: f64,
    pub rank_deficient: bool,
    pub tolerance: f64,
    pub pass: bool,
    pub gamma: f64,
}

impl ContractionReport {
    pub const CSV_HEADER: &'static str =
        "samples,excluded,max_violation,min_jacobian_sigma,rank_deficient,tolerance,pass,gamma";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.samples,
            self.excluded,
            self.max_violation,
            self.min_jacobian_sigma,
            self.rank_deficient,
            self.tolerance,
            self.pass,
            self.gamma
        )
    }
}

/// `Ĝ(x)ᵀ M Ĝ(x)`, symmetrized.
pub fn metric_at(dictionary: &Dictionary, m: &DMatrix<f64>, x: &[f64]) -> Result<DMatrix<f64>> {
    let n_lat = dictionary.latent_dim();
    linalg::require_square("M", m)?;
    check_len("M", m.nrows(), n_lat)?;
    let g = dictionary.lift_jacobian(x)?;
    let w = g.transpose() * m * &g;
    Ok((&w + w.transpose()) * 0.5)
}

struct SampleCheck {
    violation: f64,
    sigma: f64,
}

fn check_sample<F>(
    dictionary: &Dictionary,
    m: &DMatrix<f64>,
    gamma: f64,
    f_cl: &F,
    x: &[f64],
    jac_step: f64,
) -> Result<Option<SampleCheck>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let fx = f_cl(x);
    if fx.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let jac = finite_difference_jacobian(|p| nalgebra::DVector::from_vec(f_cl(p)), x, jac_step);
    if jac.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let w_next = metric_at(dictionary, m, &fx)?;
    let w_here = metric_at(dictionary, m, x)?;
    let r = jac.transpose() * w_next * &jac - w_here * gamma;
    let violation = linalg::max_symmetric_eigenvalue(&((&r + r.transpose()) * 0.5))?;
    let sv = linalg::singular_values(&dictionary.lift_jacobian(x)?)?;
    let sigma = sv.last().copied().unwrap_or(0.0);
    Ok(Some(SampleCheck { violation, sigma }))
}

/// Checks every sample in parallel; reductions are order-independent.
pub fn verify_contraction<F>(
    dictionary: &Dictionary,
    m: &DMatrix<f64>,
    gamma: f64,
    f_cl: F,
    samples: &[Vec<f64>],
    jac_step: f64,
    tolerance: f64,
) -> Result<ContractionReport>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if samples.is_empty() {
        return Err(Error::input("verify_contraction: no samples"));
    }
    if !(jac_step > 0.0) {
        return Err(Error::input("verify_contraction: jac_step must be positive"));
    }
    for s in samples {
        check_len("sample", s.len(), dictionary.input_dim())?;
    }
    let checks: Vec<Option<SampleCheck>> = samples
        .par_iter()
        .map(|x| check_sample(dictionary, m, gamma, &f_cl, x, jac_step))
        .collect::<Result<_>>()?;
    let kept: Vec<&SampleCheck> = checks.iter().flatten().collect();
    let max_violation = kept.iter().map(|c| c.violation).fold(f64::NEG_INFINITY, f64::max);
    let min_sigma = kept.iter().map(|c| c.sigma).fold(f64::INFINITY, f64::min);
    let rank_deficient = min_sigma <= RANK_TOLERANCE;
    Ok(ContractionReport {
        samples: kept.len(),
        excluded: samples.len() - kept.len(),
        max_violation,
        min_jacobian_sigma: min_sigma,
        rank_deficient,
        tolerance,
        pass: !kept.is_empty() && max_violation <= tolerance,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::RbfFeature;

    #[test]
    fn identity_lifting_identity_metric() {
        let d = Dictionary::identity_augmented(3, false, vec![]).unwrap();
        let w = metric_at(&d, &DMatrix::identity(3, 3), &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(w, DMatrix::identity(3, 3));
    }

    #[test]
    fn degenerate_jacobian_gives_singular_metric() {
        // A single RBF evaluated at its center has zero gradient.
        let d = Dictionary::radial_basis(1, vec![RbfFeature { center: vec![0.0], width: 1.0 }]).unwrap();
        let w = metric_at(&d, &DMatrix::identity(1, 1), &[0.0]).unwrap();
        assert_eq!(w[(0, 0)], 0.0);
        let rep = verify_contraction(&d, &DMatrix::identity(1, 1), 0.9, |x: &[f64]| x.to_vec(), &[vec![0.0]], 1e-5, 1e-6).unwrap();
        assert!(rep.rank_deficient);
        assert_eq!(rep.min_jacobian_sigma, 0.0);
    }

    #[test]
    fn identity_map_with_unit_gamma_has_zero_residual() {
        let d = Dictionary::identity_augmented(2, true, vec![RbfFeature { center: vec![0.5, 0.5], width: 0.7 }]).unwrap();
        let m = DMatrix::from_row_slice(4, 4, &[
            2.0, 0.1, 0.0, 0.0, 0.1, 1.0, 0.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0, 0.2, 0.0, 3.0,
        ]);
        let samples = vec![vec![0.1, 0.2], vec![-1.0, 0.4]];
        let rep = verify_contraction(&d, &m, 1.0, |x: &[f64]| x.to_vec(), &samples, 1e-5, 1e-6).unwrap();
        assert!(rep.max_violation.abs() < 1e-8, "{}", rep.max_violation);
    }

    #[test]
    fn non_finite_samples_are_excluded() {
        let d = Dictionary::identity_augmented(1, false, vec![]).unwrap();
        let f = |x: &[f64]| if x[0] > 0.0 { vec![f64::NAN] } else { vec![0.5 * x[0]] };
        let rep = verify_contraction(&d, &DMatrix::identity(1, 1), 0.9, f, &[vec![1.0], vec![-1.0]], 1e-5, 1e-6).unwrap();
        assert_eq!(rep.excluded, 1);
        assert_eq!(rep.samples, 1);
        assert!(rep.pass);
        assert!((rep.max_violation - (0.25 - 0.9)).abs() < 1e-8);
    }
}
