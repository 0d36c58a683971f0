//! Observable maps (encoders), decoders back to state space, and the lifted
//! linear model `z⁺ = A z + B u` that ties them together.

mod mlp;
pub mod training;

pub use mlp::{Mlp, MlpGrad};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg;
use crate::matrix_serde;

/// Central-difference step used for trained-encoder Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryKind {
    IdentityAugmented,
    RadialBasis,
    TrainedEncoder,
}

/// Gaussian bump `exp(-‖x − c‖² / (2 w²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfFeature {
    pub center: Vec<f64>,
    pub width: f64,
}

impl RbfFeature {
    fn eval(&self, x: &[f64]) -> f64 {
        let d2: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        (-d2 / (2.0 * self.width * self.width)).exp()
    }

    fn gradient<'a>(&'a self, x: &'a [f64], value: f64) -> impl Iterator<Item = f64> + 'a {
        let w2 = self.width * self.width;
        x.iter()
            .zip(&self.center)
            .map(move |(a, c)| -(a - c) / w2 * value)
    }
}

/// The observable map `x ↦ z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dictionary {
    /// `z = (x, [1], rbf_1(x), …)`: the raw state is a prefix of the features.
    IdentityAugmented {
        input_dim: usize,
        constant: bool,
        rbf: Vec<RbfFeature>,
    },
    /// `z = (rbf_1(x), …, rbf_N(x))`.
    RadialBasis { input_dim: usize, rbf: Vec<RbfFeature> },
    TrainedEncoder { net: Mlp },
}

impl Dictionary {
    pub fn identity_augmented(input_dim: usize, constant: bool, rbf: Vec<RbfFeature>) -> Result<Self> {
        let d = Dictionary::IdentityAugmented {
            input_dim,
            constant,
            rbf,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn radial_basis(input_dim: usize, rbf: Vec<RbfFeature>) -> Result<Self> {
        let d = Dictionary::RadialBasis { input_dim, rbf };
        d.validate()?;
        Ok(d)
    }

    pub fn trained(net: Mlp) -> Result<Self> {
        let d = Dictionary::TrainedEncoder { net };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let check_rbf = |input_dim: usize, rbf: &[RbfFeature]| -> Result<()> {
            for (i, f) in rbf.iter().enumerate() {
                check_len(&format!("rbf[{i}].center"), f.center.len(), input_dim)?;
                check_finite(&format!("rbf[{i}].center"), &f.center)?;
                if !(f.width.is_finite() && f.width > 0.0) {
                    return Err(Error::input(format!(
                        "rbf[{i}].width must be finite and positive, got {}",
                        f.width
                    )));
                }
            }
            Ok(())
        };
        match self {
            Dictionary::IdentityAugmented { input_dim, rbf, .. } => {
                if *input_dim == 0 {
                    return Err(Error::input("dictionary input_dim must be positive"));
                }
                check_rbf(*input_dim, rbf)
            }
            Dictionary::RadialBasis { input_dim, rbf } => {
                if rbf.is_empty() || *input_dim == 0 {
                    return Err(Error::input("radial-basis dictionary needs features and input_dim > 0"));
                }
                check_rbf(*input_dim, rbf)
            }
            Dictionary::TrainedEncoder { net } => {
                if !net.is_consistent() || !net.all_finite() {
                    return Err(Error::input("trained encoder has inconsistent or non-finite weights"));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> DictionaryKind {
        match self {
            Dictionary::IdentityAugmented { .. } => DictionaryKind::IdentityAugmented,
            Dictionary::RadialBasis { .. } => DictionaryKind::RadialBasis,
            Dictionary::TrainedEncoder { .. } => DictionaryKind::TrainedEncoder,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Dictionary::IdentityAugmented { input_dim, .. } | Dictionary::RadialBasis { input_dim, .. } => {
                *input_dim
            }
            Dictionary::TrainedEncoder { net } => net.input_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Dictionary::IdentityAugmented {
                input_dim,
                constant,
                rbf,
            } => input_dim + usize::from(*constant) + rbf.len(),
            Dictionary::RadialBasis { rbf, .. } => rbf.len(),
            Dictionary::TrainedEncoder { net } => net.output_dim(),
        }
    }

    /// Flat parameter vector (centers then widths, or network weights row-major).
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            Dictionary::IdentityAugmented { rbf, .. } | Dictionary::RadialBasis { rbf, .. } => rbf
                .iter()
                .flat_map(|f| f.center.iter().copied())
                .chain(rbf.iter().map(|f| f.width))
                .collect(),
            Dictionary::TrainedEncoder { net } => net.parameters(),
        }
    }

    pub fn description(&self) -> String {
        match self {
            Dictionary::IdentityAugmented { input_dim, constant, rbf } => format!(
                "identity({input_dim}){} + {} gaussian rbf",
                if *constant { " + const" } else { "" },
                rbf.len()
            ),
            Dictionary::RadialBasis { rbf, .. } => format!("{} gaussian rbf", rbf.len()),
            Dictionary::TrainedEncoder { net } => format!(
                "mlp {}->{}(tanh)->{}",
                net.input_dim(),
                net.hidden_dim(),
                net.output_dim()
            ),
        }
    }

    /// `ĝ(x)`.
    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_len("lift: state", x.len(), self.input_dim())?;
        check_finite("lift: state", x)?;
        Ok(self.lift_unchecked(x))
    }

    pub(crate) fn lift_unchecked(&self, x: &[f64]) -> DVector<f64> {
        match self {
            Dictionary::IdentityAugmented { constant, rbf, .. } => {
                let mut z = Vec::with_capacity(self.latent_dim());
                z.extend_from_slice(x);
                if *constant {
                    z.push(1.0);
                }
                z.extend(rbf.iter().map(|f| f.eval(x)));
                DVector::from_vec(z)
            }
            Dictionary::RadialBasis { rbf, .. } => {
                DVector::from_iterator(rbf.len(), rbf.iter().map(|f| f.eval(x)))
            }
            Dictionary::TrainedEncoder { net } => net.forward(&DVector::from_column_slice(x)),
        }
    }

    /// `Ĝ(x) = ∂ĝ/∂x`, an `N × n` matrix.
    pub fn lift_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_len("lift_jacobian: state", x.len(), self.input_dim())?;
        check_finite("lift_jacobian: state", x)?;
        let n = self.input_dim();
        let big_n = self.latent_dim();
        let mut jac = DMatrix::zeros(big_n, n);
        let rbf_rows = |jac: &mut DMatrix<f64>, offset: usize, rbf: &[RbfFeature]| {
            for (r, f) in rbf.iter().enumerate() {
                let v = f.eval(x);
                for (c, g) in f.gradient(x, v).enumerate() {
                    jac[(offset + r, c)] = g;
                }
            }
        };
        match self {
            Dictionary::IdentityAugmented { constant, rbf, .. } => {
                for i in 0..n {
                    jac[(i, i)] = 1.0;
                }
                rbf_rows(&mut jac, n + usize::from(*constant), rbf);
            }
            Dictionary::RadialBasis { rbf, .. } => rbf_rows(&mut jac, 0, rbf),
            Dictionary::TrainedEncoder { .. } => {
                jac = finite_difference_jacobian(|p| self.lift_unchecked(p), x, JACOBIAN_STEP);
            }
        }
        Ok(jac)
    }
}

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_difference_jacobian<F>(f: F, x: &[f64], step: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let mut probe = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let fp = f(&probe);
        probe[j] = x[j] - step;
        let fm = f(&probe);
        probe[j] = x[j];
        cols.push((fp - fm) / (2.0 * step));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, x.len(), |i, j| cols[j][i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Projection,
    LinearLeastSquares,
    TrainedDecoder,
}

/// The map back from latent to state space, `ĝ_inv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoder {
    /// Keeps the first `output_dim` latent coordinates.
    Projection { latent_dim: usize, output_dim: usize },
    LinearLeastSquares {
        #[serde(with = "matrix_serde::matrix")]
        weights: DMatrix<f64>,
    },
    TrainedDecoder { net: Mlp },
}

impl Decoder {
    pub fn projection(latent_dim: usize, output_dim: usize) -> Result<Self> {
        if output_dim == 0 || output_dim > latent_dim {
            return Err(Error::input(format!(
                "projection decoder needs 0 < n ≤ N, got n={output_dim}, N={latent_dim}"
            )));
        }
        Ok(Decoder::Projection {
            latent_dim,
            output_dim,
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Projection { .. } => DecoderKind::Projection,
            Decoder::LinearLeastSquares { .. } => DecoderKind::LinearLeastSquares,
            Decoder::TrainedDecoder { .. } => DecoderKind::TrainedDecoder,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Decoder::Projection { latent_dim, .. } => *latent_dim,
            Decoder::LinearLeastSquares { weights } => weights.ncols(),
            Decoder::TrainedDecoder { net } => net.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Decoder::Projection { output_dim, .. } => *output_dim,
            Decoder::LinearLeastSquares { weights } => weights.nrows(),
            Decoder::TrainedDecoder { net } => net.output_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Decoder::Projection {
                latent_dim,
                output_dim,
            } => Decoder::projection(*latent_dim, *output_dim).map(|_| ()),
            Decoder::LinearLeastSquares { weights } => {
                check_finite("decoder weights", weights.as_slice())
            }
            Decoder::TrainedDecoder { net } => {
                if !net.is_consistent() || !net.all_finite() {
                    return Err(Error::input("trained decoder has inconsistent or non-finite weights"));
                }
                Ok(())
            }
        }
    }

    /// Matrix form for the linear decoders; `None` for a trained network.
    pub fn linear_weights(&self) -> Option<DMatrix<f64>> {
        match self {
            Decoder::Projection {
                latent_dim,
                output_dim,
            } => Some(DMatrix::from_fn(*output_dim, *latent_dim, |i, j| {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            })),
            Decoder::LinearLeastSquares { weights } => Some(weights.clone()),
            Decoder::TrainedDecoder { .. } => None,
        }
    }

    /// `ĝ_inv(z)`.
    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("decode: latent", z.len(), self.latent_dim())?;
        Ok(self.decode_unchecked(z))
    }

    pub(crate) fn decode_unchecked(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Decoder::Projection { output_dim, .. } => z.rows(0, *output_dim).into_owned(),
            Decoder::LinearLeastSquares { weights } => weights * z,
            Decoder::TrainedDecoder { net } => net.forward(z),
        }
    }
}

/// `‖x − ĝ_inv(ĝ(x))‖`.
pub fn round_trip_residual(dictionary: &Dictionary, decoder: &Decoder, x: &[f64]) -> Result<f64> {
    check_len("round trip: decoder latent dim", decoder.latent_dim(), dictionary.latent_dim())?;
    check_len("round trip: decoder output dim", decoder.output_dim(), dictionary.input_dim())?;
    let z = dictionary.lift(x)?;
    let xr = decoder.decode_unchecked(&z);
    Ok(x.iter()
        .zip(xr.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Ridge least-squares decoder `W = X Zᵀ (Z Zᵀ + λI)⁻¹`.
pub fn fit_linear_decoder<S: AsRef<[f64]>>(
    dictionary: &Dictionary,
    states: &[S],
    ridge: f64,
) -> Result<Decoder> {
    if states.is_empty() {
        return Err(Error::input("fit_linear_decoder: no samples"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::input("fit_linear_decoder: ridge must be finite and ≥ 0"));
    }
    let n = dictionary.input_dim();
    let big_n = dictionary.latent_dim();
    let mut gram = DMatrix::<f64>::zeros(big_n, big_n);
    let mut cross = DMatrix::<f64>::zeros(big_n, n);
    for s in states {
        let x = s.as_ref();
        let z = dictionary.lift(x)?;
        gram += &z * z.transpose();
        cross += &z * DVector::from_column_slice(x).transpose();
    }
    for i in 0..big_n {
        gram[(i, i)] += ridge;
    }
    // Gram·Wᵀ = Z Xᵀ
    let wt = linalg::solve_spd(&gram, &cross)?;
    let weights = wt.transpose();
    check_finite("fit_linear_decoder weights", weights.as_slice())?;
    Ok(Decoder::LinearLeastSquares { weights })
}

/// Median pairwise Euclidean distance among `points` (0 for fewer than two).
pub fn median_pairwise_distance<S: AsRef<[f64]>>(points: &[S]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let a = points[i].as_ref();
            let b = points[j].as_ref();
            d.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// Picks `count` distinct samples as centers and sets every width to the median
/// pairwise distance of (at most `width_subsample`) sampled states.
pub fn rbf_features_from_samples<S: AsRef<[f64]>, R: Rng>(
    samples: &[S],
    count: usize,
    width_subsample: usize,
    rng: &mut R,
) -> Result<Vec<RbfFeature>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if samples.len() < count.max(2) {
        return Err(Error::input(format!(
            "need at least {} samples to place {count} rbf centers",
            count.max(2)
        )));
    }
    let sub: Vec<&[f64]> = index::sample(rng, samples.len(), width_subsample.min(samples.len()).max(2))
        .into_iter()
        .map(|i| samples[i].as_ref())
        .collect();
    let width = median_pairwise_distance(&sub);
    if !(width > 0.0) {
        return Err(Error::input("degenerate samples: median pairwise distance is zero"));
    }
    Ok(index::sample(rng, samples.len(), count)
        .into_iter()
        .map(|i| RbfFeature {
            center: samples[i].as_ref().to_vec(),
            width,
        })
        .collect())
}

/// Dictionary, decoder and the latent linear dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedModel {
    pub dictionary: Dictionary,
    pub decoder: Decoder,
    #[serde(with = "matrix_serde::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_serde::matrix")]
    pub b: DMatrix<f64>,
}

impl LiftedModel {
    pub fn new(dictionary: Dictionary, decoder: Decoder, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let model = Self {
            dictionary,
            decoder,
            a,
            b,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.dictionary.validate()?;
        self.decoder.validate()?;
        let big_n = self.dictionary.latent_dim();
        linalg::require_square("A", &self.a)?;
        check_len("A rows", self.a.nrows(), big_n)?;
        check_len("B rows", self.b.nrows(), big_n)?;
        check_len("decoder latent dim", self.decoder.latent_dim(), big_n)?;
        check_len("decoder output dim", self.decoder.output_dim(), self.dictionary.input_dim())?;
        if self.decoder.kind() == DecoderKind::Projection
            && self.dictionary.kind() != DictionaryKind::IdentityAugmented
        {
            return Err(Error::input(
                "projection decoder requires an identity-augmented dictionary",
            ));
        }
        check_finite("A", self.a.as_slice())?;
        check_finite("B", self.b.as_slice())?;
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.dictionary.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.dictionary.latent_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.dictionary.lift(x)
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.decoder.decode(z)
    }

    /// `A z + B u`.
    pub fn predict(&self, z: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        check_len("predict: latent", z.len(), self.latent_dim())?;
        check_len("predict: input", u.len(), self.input_dim())?;
        Ok(&self.a * z + &self.b * DVector::from_column_slice(u))
    }
}
