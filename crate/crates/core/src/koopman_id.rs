//! Identification of the latent linear dynamics `z⁺ = A z + B u` from lifted
//! transition data, plus the model-quality diagnostics used as regularizers.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::lifting::{Dictionary, LiftedModel};
use crate::linalg::{self, CompensatedSum};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: u64,
    pub k: u64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_next: Vec<f64>,
}

/// `(x_k, u_k, x_{k+1})` tuples grouped by episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub records: Vec<Transition>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub source_seed: u64,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, input_dim: usize, source_seed: u64) -> Self {
        Self {
            records: Vec::new(),
            state_dim,
            input_dim,
            source_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        check_len("transition x", t.x.len(), self.state_dim)?;
        check_len("transition u", t.u.len(), self.input_dim)?;
        check_len("transition x_next", t.x_next.len(), self.state_dim)?;
        self.records.push(t);
        Ok(())
    }

    /// Checks dimensions and that consecutive records of one episode chain together.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.x.len() != self.state_dim || r.u.len() != self.input_dim || r.x_next.len() != self.state_dim {
                return Err(Error::input(format!("record {i}: inconsistent dimensions")));
            }
        }
        for (i, w) in self.records.windows(2).enumerate() {
            if w[0].episode == w[1].episode && w[0].x_next != w[1].x {
                return Err(Error::input(format!(
                    "records {i} and {}: episode {} is not contiguous",
                    i + 1,
                    w[0].episode
                )));
            }
        }
        Ok(())
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["episode".to_string(), "k".to_string()];
        h.extend((0..self.state_dim).map(|i| format!("x{i}")));
        h.extend((0..self.input_dim).map(|i| format!("u{i}")));
        h.extend((0..self.state_dim).map(|i| format!("xn{i}")));
        h
    }

    /// CSV with header `episode,k,x0..,u0..,xn0..`, preceded by a `# source_seed=` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# source_seed={}", self.source_seed).map_err(|e| Error::io("<dataset>", e))?;
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| Error::numerical(format!("csv write: {e}"));
        w.write_record(self.csv_header()).map_err(map)?;
        for r in &self.records {
            let mut row = vec![r.episode.to_string(), r.k.to_string()];
            row.extend(r.x.iter().chain(&r.u).chain(&r.x_next).map(|v| v.to_string()));
            w.write_record(&row).map_err(map)?;
        }
        w.flush().map_err(|e| Error::io("<dataset>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| relabel_io(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), path)
    }

    pub fn read_csv<R: BufRead>(mut input: R, path: &Path) -> Result<Self> {
        let mut first = String::new();
        input.read_line(&mut first).map_err(|e| Error::io(path, e))?;
        let (source_seed, header_line) = match first.trim().strip_prefix("# source_seed=") {
            Some(s) => (
                s.parse::<u64>()
                    .map_err(|_| Error::format(path, "bad source_seed line"))?,
                None,
            ),
            None => (0, Some(first)),
        };
        let mut text = header_line.unwrap_or_default();
        input.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .clone();
        let count = |prefix: &str| {
            headers
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
                })
                .count()
        };
        let n = count("x");
        let m = count("u");
        let expected = TransitionDataset::new(n, m, 0).csv_header();
        if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::format(
                path,
                format!("unexpected header, wanted {}", expected.join(",")),
            ));
        }
        let mut ds = TransitionDataset::new(n, m, source_seed);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let bad = |what: &str| Error::format(path, format!("data row {}: bad {what}", line + 1));
            let episode = rec[0].parse().map_err(|_| bad("episode"))?;
            let k = rec[1].parse().map_err(|_| bad("k"))?;
            let nums: Vec<f64> = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("number"))?;
            ds.records.push(Transition {
                episode,
                k,
                x: nums[..n].to_vec(),
                u: nums[n..n + m].to_vec(),
                x_next: nums[n + m..].to_vec(),
            });
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// Lifted regressors: columns are samples.
#[derive(Debug, Clone)]
pub struct LiftedTransitions {
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub z_next: DMatrix<f64>,
}

impl LiftedTransitions {
    pub fn from_dataset(dictionary: &Dictionary, data: &TransitionDataset) -> Result<Self> {
        check_len("dataset state dim", data.state_dim, dictionary.input_dim())?;
        let t = data.len();
        let big_n = dictionary.latent_dim();
        let mut z = DMatrix::zeros(big_n, t);
        let mut z_next = DMatrix::zeros(big_n, t);
        let mut u = DMatrix::zeros(data.input_dim, t);
        for (j, r) in data.records.iter().enumerate() {
            z.set_column(j, &dictionary.lift(&r.x)?);
            z_next.set_column(j, &dictionary.lift(&r.x_next)?);
            u.set_column(j, &DVector::from_column_slice(&r.u));
        }
        Ok(Self { z, u, z_next })
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacked regressor `[z; u]`.
    pub fn regressors(&self) -> DMatrix<f64> {
        let (big_n, m, t) = (self.z.nrows(), self.u.nrows(), self.len());
        let mut phi = DMatrix::zeros(big_n + m, t);
        phi.view_mut((0, 0), (big_n, t)).copy_from(&self.z);
        phi.view_mut((big_n, 0), (m, t)).copy_from(&self.u);
        phi
    }
}

/// Hyper-parameters of `L_pred + w_ρ ρ(A) + w_ctrl L_ctrl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    pub w_rho: f64,
    pub w_ctrl: f64,
    pub lambda_cond: f64,
    pub epsilon_ctrl: f64,
    pub ridge: f64,
    pub max_iters: usize,
    pub step_size: f64,
    pub tol: f64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            w_rho: 0.0,
            w_ctrl: 0.0,
            lambda_cond: 1.0,
            epsilon_ctrl: 1e-6,
            ridge: 1e-8,
            max_iters: 2000,
            step_size: 1e-3,
            tol: 1e-10,
        }
    }
}

impl IdentificationConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("w_rho", self.w_rho),
            ("w_ctrl", self.w_ctrl),
            ("lambda_cond", self.lambda_cond),
            ("ridge", self.ridge),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("identification.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        let pos = [
            ("epsilon_ctrl", self.epsilon_ctrl),
            ("step_size", self.step_size),
            ("tol", self.tol),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("identification.{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn split_w(w: &DMatrix<f64>, big_n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = w.ncols() - big_n;
    (
        w.view((0, 0), (big_n, big_n)).into_owned(),
        w.view((0, big_n), (big_n, m)).into_owned(),
    )
}

fn join_w(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let big_n = a.nrows();
    let mut w = DMatrix::zeros(big_n, big_n + b.ncols());
    w.view_mut((0, 0), (big_n, big_n)).copy_from(a);
    w.view_mut((0, big_n), (big_n, b.ncols())).copy_from(b);
    w
}

/// Ridge least squares on lifted data: `[A B] = Z⁺Φᵀ (ΦΦᵀ + ridge·I)⁻¹`, `Φ = [Z; U]`.
pub fn fit_edmd_lifted(data: &LiftedTransitions, ridge: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if data.is_empty() {
        return Err(Error::input("fit_edmd: empty dataset"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::input("fit_edmd: ridge must be finite and ≥ 0"));
    }
    let phi = data.regressors();
    let mut gram = &phi * phi.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let wt = linalg::solve_spd(&gram, &(&phi * data.z_next.transpose()))?;
    let w = wt.transpose();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("fit_edmd produced non-finite coefficients"));
    }
    Ok(split_w(&w, data.z.nrows()))
}

pub fn fit_edmd(
    dictionary: &Dictionary,
    data: &TransitionDataset,
    ridge: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    fit_edmd_lifted(&LiftedTransitions::from_dataset(dictionary, data)?, ridge)
}

/// Mean of `‖z⁺ − (A z + B u)‖²` over records, accumulated with compensated summation.
pub fn prediction_loss(a: &DMatrix<f64>, b: &DMatrix<f64>, data: &LiftedTransitions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("prediction_loss: empty dataset"));
    }
    check_len("A rows", a.nrows(), data.z.nrows())?;
    check_len("B cols", b.ncols(), data.u.nrows())?;
    let pred = a * &data.z + b * &data.u;
    let mut acc = CompensatedSum::new();
    for (p, y) in pred.iter().zip(data.z_next.iter()) {
        let r = y - p;
        acc.add(r * r);
    }
    Ok(acc.value() / data.len() as f64)
}

pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    linalg::spectral_radius(a)
}

/// `-log(σmin(C) + ε) + λ σmax(C) / (σmin(C) + ε)` for the controllability matrix `C`.
pub fn controllability_loss(a: &DMatrix<f64>, b: &DMatrix<f64>, epsilon: f64, lambda_cond: f64) -> Result<f64> {
    let (smin, smax) = linalg::controllability_extremes(a, b)?;
    Ok(ctrl_formula(smin, smax, epsilon, lambda_cond))
}

fn ctrl_formula(smin: f64, smax: f64, epsilon: f64, lambda_cond: f64) -> f64 {
    -(smin + epsilon).ln() + lambda_cond * smax / (smin + epsilon)
}

/// Value and `(∂/∂A, ∂/∂B)` of [`controllability_loss`].
pub fn controllability_loss_gradient(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    epsilon: f64,
    lambda_cond: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let big_n = a.nrows();
    let m = b.ncols();
    let c = linalg::controllability_matrix(a, b)?;
    let svd = c.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::numerical("svd without U"))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::numerical("svd without Vᵀ"))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let i_max = order[0];
    let i_min = order[big_n.min(order.len()) - 1];
    let (smax, smin) = (sv[i_max], sv[i_min]);
    let value = ctrl_formula(smin, smax, epsilon, lambda_cond);
    let denom = smin + epsilon;
    let d_smin = -1.0 / denom - lambda_cond * smax / (denom * denom);
    let d_smax = lambda_cond / denom;

    let mut c_bar = DMatrix::zeros(c.nrows(), c.ncols());
    c_bar += u.column(i_min) * vt.row(i_min) * d_smin;
    c_bar += u.column(i_max) * vt.row(i_max) * d_smax;

    // Reverse sweep over C_j = A C_{j-1}.
    let mut blocks = Vec::with_capacity(big_n);
    let mut blk = b.clone();
    for _ in 0..big_n {
        blocks.push(blk.clone());
        blk = a * &blk;
    }
    let mut grad_a = DMatrix::zeros(big_n, big_n);
    let mut adj = c_bar.view((0, (big_n - 1) * m), (big_n, m)).into_owned();
    for j in (1..big_n).rev() {
        grad_a += &adj * blocks[j - 1].transpose();
        adj = c_bar.view((0, (j - 1) * m), (big_n, m)).into_owned() + a.transpose() * &adj;
    }
    Ok((value, grad_a, adj))
}

/// `d = ĝ(x⁺) − (A ĝ(x) + B u)`.
pub fn residual(model: &LiftedModel, x: &[f64], u: &[f64], x_next: &[f64]) -> Result<DVector<f64>> {
    let z = model.lift(x)?;
    let z_next = model.lift(x_next)?;
    Ok(z_next - model.predict(&z, u)?)
}

/// Outcome of [`fit_regularized`].
#[derive(Debug, Clone)]
pub struct FitReport {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

/// Sufficient statistics of the lifted data for the refinement objective.
struct Moments {
    phi_phi: DMatrix<f64>,
    y_phi: DMatrix<f64>,
    y_y: f64,
    count: f64,
}

impl Moments {
    fn new(data: &LiftedTransitions) -> Self {
        let phi = data.regressors();
        Self {
            phi_phi: &phi * phi.transpose(),
            y_phi: &data.z_next * phi.transpose(),
            y_y: data.z_next.norm_squared(),
            count: data.len() as f64,
        }
    }

    fn pred_loss(&self, w: &DMatrix<f64>) -> f64 {
        let quad = (w * &self.phi_phi).component_mul(w).sum();
        let cross = w.component_mul(&self.y_phi).sum();
        ((self.y_y - 2.0 * cross + quad) / self.count).max(0.0)
    }

    fn pred_grad(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        (w * &self.phi_phi - &self.y_phi) * (2.0 / self.count)
    }
}

/// The refinement objective and its gradient. The ridge term used for the
/// initializer is carried along (`ridge/T ‖[A B]‖²`) so the initializer is a
/// stationary point when both regularizer weights vanish.
pub struct KoopmanObjective<'a> {
    moments: Moments,
    config: &'a IdentificationConfig,
    big_n: usize,
}

impl<'a> KoopmanObjective<'a> {
    pub fn new(data: &LiftedTransitions, config: &'a IdentificationConfig) -> Self {
        Self {
            moments: Moments::new(data),
            config,
            big_n: data.z.nrows(),
        }
    }

    pub fn value(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
        let w = join_w(a, b);
        let mut v = self.moments.pred_loss(&w) + self.config.ridge / self.moments.count * w.norm_squared();
        if self.config.w_rho > 0.0 {
            v += self.config.w_rho * linalg::spectral_radius(a)?;
        }
        if self.config.w_ctrl > 0.0 {
            v += self.config.w_ctrl
                * controllability_loss(a, b, self.config.epsilon_ctrl, self.config.lambda_cond)?;
        }
        Ok(v)
    }

    pub fn gradient(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let w = join_w(a, b);
        let g = self.moments.pred_grad(&w) + &w * (2.0 * self.config.ridge / self.moments.count);
        let (mut ga, mut gb) = split_w(&g, self.big_n);
        if self.config.w_rho > 0.0 {
            let (_, gr) = linalg::spectral_radius_gradient(a)?;
            ga += gr * self.config.w_rho;
        }
        if self.config.w_ctrl > 0.0 {
            let (_, gca, gcb) =
                controllability_loss_gradient(a, b, self.config.epsilon_ctrl, self.config.lambda_cond)?;
            ga += gca * self.config.w_ctrl;
            gb += gcb * self.config.w_ctrl;
        }
        Ok((ga, gb))
    }
}

/// Gradient refinement of the EDMD solution on `L_pred + w_ρ ρ(A) + w_ctrl L_ctrl`.
///
/// Fixed step with halving when a step fails to decrease the objective; stops
/// after `max_iters` or once the accepted decrease drops below `tol`.
pub fn fit_regularized_lifted(data: &LiftedTransitions, config: &IdentificationConfig) -> Result<FitReport> {
    config.validate()?;
    let (mut a, mut b) = fit_edmd_lifted(data, config.ridge)?;
    let objective = KoopmanObjective::new(data, config);
    let mut loss = objective.value(&a, &b)?;
    let mut trace = vec![loss];
    if !loss.is_finite() {
        return Err(Error::Optimization {
            message: "initial objective is not finite".into(),
            trace,
        });
    }
    let initial_loss = loss;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let (ga, gb) = objective.gradient(&a, &b)?;
        if ga.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Optimization {
                message: "gradient became non-finite".into(),
                trace,
            });
        }
        let mut step = config.step_size;
        let mut accepted = None;
        for _ in 0..40 {
            let ta = &a - &ga * step;
            let tb = &b - &gb * step;
            match objective.value(&ta, &tb) {
                Ok(v) if v.is_finite() && v < loss => {
                    accepted = Some((ta, tb, v));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        iterations += 1;
        let Some((ta, tb, v)) = accepted else { break };
        let decrease = loss - v;
        a = ta;
        b = tb;
        loss = v;
        trace.push(loss);
        if decrease < config.tol {
            break;
        }
    }
    Ok(FitReport {
        a,
        b,
        initial_loss,
        final_loss: loss,
        iterations,
        trace,
    })
}

pub fn fit_regularized(
    dictionary: &Dictionary,
    data: &TransitionDataset,
    config: &IdentificationConfig,
) -> Result<FitReport> {
    fit_regularized_lifted(&LiftedTransitions::from_dataset(dictionary, data)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::Decoder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn linear_data(a0: &DMatrix<f64>, b0: &DMatrix<f64>, t: usize, seed: u64) -> LiftedTransitions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (a0.nrows(), b0.ncols());
        let z = DMatrix::from_fn(n, t, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(m, t, |_, _| rng.random_range(-1.0..1.0));
        let z_next = a0 * &z + b0 * &u;
        LiftedTransitions { z, u, z_next }
    }

    #[test]
    fn scalar_decay_without_input() {
        let mut ds = TransitionDataset::new(1, 1, 0);
        let mut x = 1.0;
        for k in 0..5 {
            ds.push(Transition { episode: 0, k, x: vec![x], u: vec![0.0], x_next: vec![0.5 * x] }).unwrap();
            x *= 0.5;
        }
        let d = Dictionary::identity_augmented(1, false, vec![]).unwrap();
        // u ≡ 0 makes the Gram singular; a tiny ridge pins B to 0.
        let (a, b) = fit_edmd(&d, &ds, 1e-10).unwrap();
        assert!((a[(0, 0)] - 0.5).abs() < 1e-9);
        assert!(b[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn singular_gram_without_ridge_is_numerical_error() {
        let data = LiftedTransitions {
            z: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            u: DMatrix::zeros(1, 2),
            z_next: DMatrix::from_row_slice(1, 2, &[0.5, 1.0]),
        };
        assert!(matches!(fit_edmd_lifted(&data, 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn ridge_shrinks_a() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let b0 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let mut data = linear_data(&a0, &b0, 40, 2);
        data.z_next += DMatrix::from_fn(2, 40, |i, j| 0.01 * ((i * 7 + j * 3) % 5) as f64);
        let (a_plain, _) = fit_edmd_lifted(&data, 0.0).unwrap();
        let (a_ridge, _) = fit_edmd_lifted(&data, 1e-3).unwrap();
        assert!(a_ridge.norm() < a_plain.norm());
    }

    #[test]
    fn prediction_loss_single_record() {
        let data = LiftedTransitions {
            z: scalar(1.0),
            u: scalar(0.0),
            z_next: scalar(2.0),
        };
        assert_eq!(prediction_loss(&scalar(1.0), &scalar(0.0), &data).unwrap(), 1.0);
    }

    #[test]
    fn prediction_loss_zero_on_exact_model() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let b0 = DMatrix::from_row_slice(2, 1, &[0.3, 1.0]);
        let data = linear_data(&a0, &b0, 30, 4);
        assert_eq!(prediction_loss(&a0, &b0, &data).unwrap(), 0.0);
    }

    #[test]
    fn controllability_loss_scalar_cases() {
        assert_eq!(controllability_loss(&scalar(0.0), &scalar(1.0), 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(controllability_loss(&scalar(0.0), &scalar(1.0), 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn controllability_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.8..0.8));
        let b = DMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
        let (_, ga, gb) = controllability_loss_gradient(&a, &b, 1e-6, 1.0).unwrap();
        let f = |a: &DMatrix<f64>, b: &DMatrix<f64>| controllability_loss(a, b, 1e-6, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = a.clone();
                p[(i, j)] += h;
                let mut q = a.clone();
                q[(i, j)] -= h;
                let fd = (f(&p, &b) - f(&q, &b)) / (2.0 * h);
                assert!((fd - ga[(i, j)]).abs() <= 1e-5 * fd.abs().max(1.0), "A({i},{j})");
            }
            let mut p = b.clone();
            p[(i, 0)] += h;
            let mut q = b.clone();
            q[(i, 0)] -= h;
            let fd = (f(&a, &p) - f(&a, &q)) / (2.0 * h);
            assert!((fd - gb[(i, 0)]).abs() <= 1e-5 * fd.abs().max(1.0), "B({i})");
        }
    }

    #[test]
    fn unregularized_refinement_returns_edmd() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let b0 = DMatrix::from_row_slice(2, 1, &[0.3, 1.0]);
        let mut data = linear_data(&a0, &b0, 50, 5);
        data.z_next += DMatrix::from_fn(2, 50, |i, j| 0.02 * (((i + 2 * j) % 7) as f64 - 3.0));
        let cfg = IdentificationConfig::default();
        let (ae, be) = fit_edmd_lifted(&data, cfg.ridge).unwrap();
        let rep = fit_regularized_lifted(&data, &cfg).unwrap();
        assert!((&rep.a - &ae).norm() <= 1e-10);
        assert!((&rep.b - &be).norm() <= 1e-10);
        assert!((rep.final_loss - rep.initial_loss).abs() <= 1e-10);
    }

    #[test]
    fn residual_scalar() {
        let d = Dictionary::identity_augmented(1, false, vec![]).unwrap();
        let model = LiftedModel::new(d, Decoder::projection(1, 1).unwrap(), scalar(1.0), scalar(1.0)).unwrap();
        let r = residual(&model, &[1.0], &[1.0], &[3.0]).unwrap();
        assert_eq!(r[0], 1.0);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut ds = TransitionDataset::new(2, 1, 77);
        ds.push(Transition { episode: 0, k: 0, x: vec![0.1, 0.2], u: vec![0.5], x_next: vec![0.3, 0.4] }).unwrap();
        ds.push(Transition { episode: 0, k: 1, x: vec![0.3, 0.4], u: vec![-0.5], x_next: vec![0.25, 1.0 / 3.0] }).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap() == "episode,k,x0,x1,u0,xn0,xn1");
        let back = TransitionDataset::read_csv(std::io::Cursor::new(buf), Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn broken_episode_chain_is_rejected() {
        let mut ds = TransitionDataset::new(1, 1, 0);
        ds.push(Transition { episode: 3, k: 0, x: vec![0.0], u: vec![0.0], x_next: vec![1.0] }).unwrap();
        ds.push(Transition { episode: 3, k: 1, x: vec![2.0], u: vec![0.0], x_next: vec![1.0] }).unwrap();
        assert!(ds.validate().is_err());
    }
}
