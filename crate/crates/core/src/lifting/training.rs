//! Joint encoder/decoder training on
//! `L_NN = L_rss + α L_recon + β L_ctrl`.
//!
//! `L_rss` is the one-step latent prediction error under the ridge
//! least-squares `(A, B)` fitted on the same batch. Since that `(A, B)` is the
//! minimizer of the ridge objective, the gradient of `L_rss` with respect to
//! the latent samples is the partial derivative at fixed `(A, B)`. `L_ctrl`
//! is evaluated at the batch `(A, B)` and differentiated through the
//! least-squares solution in closed form.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Decoder, Dictionary, Mlp, MlpGrad};
use crate::error::{Error, Result};
use crate::koopman_id::{controllability_loss_gradient, Transition, TransitionDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    /// Weight of the reconstruction term.
    pub alpha_recon: f64,
    /// Weight of the controllability term.
    pub beta_ctrl: f64,
    pub ridge: f64,
    pub epsilon_ctrl: f64,
    pub lambda_cond: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent_dim: 6,
            alpha_recon: 0.1,
            beta_ctrl: 0.1,
            ridge: 1e-4,
            epsilon_ctrl: 1e-6,
            lambda_cond: 1.0,
            iterations: 300,
            batch_size: 256,
            step_size: 0.05,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden > 32 {
            return Err(Error::Config(format!("encoder hidden width must be in 1..=32, got {}", self.hidden)));
        }
        if self.latent_dim == 0 || self.batch_size < 2 {
            return Err(Error::Config("encoder latent_dim > 0 and batch_size ≥ 2 required".into()));
        }
        for (name, v) in [
            ("alpha_recon", self.alpha_recon),
            ("beta_ctrl", self.beta_ctrl),
            ("ridge", self.ridge),
            ("lambda_cond", self.lambda_cond),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("encoder.{name} must be finite and ≥ 0")));
            }
        }
        if !(self.ridge > 0.0 && self.epsilon_ctrl > 0.0 && self.step_size > 0.0) {
            return Err(Error::Config("encoder ridge, epsilon_ctrl and step_size must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rss: f64,
    pub recon: f64,
    pub ctrl: f64,
    pub total: f64,
}

pub struct TrainingOutcome {
    pub dictionary: Dictionary,
    pub decoder: Decoder,
    pub history: Vec<LossParts>,
}

/// Loss and parameter gradients of `L_NN` on one batch.
pub fn batch_loss_and_gradient(
    encoder: &Mlp,
    decoder: &Mlp,
    batch: &[&Transition],
    cfg: &AutoencoderConfig,
) -> Result<(LossParts, MlpGrad, MlpGrad)> {
    let t = batch.len();
    let big_n = encoder.output_dim();
    let m = batch[0].u.len();
    let p = big_n + m;
    let xs: Vec<DVector<f64>> = batch.iter().map(|r| DVector::from_column_slice(&r.x)).collect();
    let xns: Vec<DVector<f64>> = batch.iter().map(|r| DVector::from_column_slice(&r.x_next)).collect();
    let enc_fwd: Vec<_> = xs.iter().map(|x| encoder.forward_hidden(x)).collect();
    let enc_fwd_next: Vec<_> = xns.iter().map(|x| encoder.forward_hidden(x)).collect();

    let mut phi = DMatrix::zeros(p, t);
    let mut y = DMatrix::zeros(big_n, t);
    for j in 0..t {
        phi.view_mut((0, j), (big_n, 1)).copy_from(&enc_fwd[j].1);
        for (i, uv) in batch[j].u.iter().enumerate() {
            phi[(big_n + i, j)] = *uv;
        }
        y.set_column(j, &enc_fwd_next[j].1);
    }
    let mut gram = &phi * phi.transpose();
    for i in 0..p {
        gram[(i, i)] += cfg.ridge;
    }
    let gram_inv = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("batch Gram matrix is not positive definite"))?
        .inverse();
    let w = &y * phi.transpose() * &gram_inv;
    let resid = &y - &w * &phi;
    let tf = t as f64;
    let rss = (resid.norm_squared() + cfg.ridge * w.norm_squared()) / tf;

    let mut g_y = &resid * (2.0 / tf);
    let mut g_phi = -(w.transpose() * &resid) * (2.0 / tf);

    let mut ctrl = 0.0;
    if cfg.beta_ctrl > 0.0 {
        let a = w.view((0, 0), (big_n, big_n)).into_owned();
        let b = w.view((0, big_n), (big_n, m)).into_owned();
        let (value, ga, gb) = controllability_loss_gradient(&a, &b, cfg.epsilon_ctrl, cfg.lambda_cond)?;
        ctrl = value;
        let mut g_w = DMatrix::zeros(big_n, p);
        g_w.view_mut((0, 0), (big_n, big_n)).copy_from(&ga);
        g_w.view_mut((0, big_n), (big_n, m)).copy_from(&gb);
        g_w *= cfg.beta_ctrl;
        // W = Y Φᵀ G⁻¹ with G = ΦΦᵀ + ridge·I.
        g_y += &g_w * &gram_inv * &phi;
        let gi_gwt = &gram_inv * g_w.transpose();
        g_phi += &gi_gwt * &y - w.transpose() * &g_w * &gram_inv * &phi - &gi_gwt * &w * &phi;
    }

    let mut enc_grad = MlpGrad::zeros_like(encoder);
    let mut dec_grad = MlpGrad::zeros_like(decoder);
    let mut recon = 0.0;
    for j in 0..t {
        let z = &enc_fwd[j].1;
        let (dh, xhat) = decoder.forward_hidden(z);
        let diff = &xhat - &xs[j];
        recon += diff.norm_squared() / tf;
        let g_xhat = diff * (2.0 * cfg.alpha_recon / tf);
        let g_z_recon = decoder.backward(z, &dh, &g_xhat, &mut dec_grad);
        let g_z = g_phi.view((0, j), (big_n, 1)).into_owned() + g_z_recon;
        encoder.backward(&xs[j], &enc_fwd[j].0, &g_z, &mut enc_grad);
        let g_zn = g_y.column(j).into_owned();
        encoder.backward(&xns[j], &enc_fwd_next[j].0, &g_zn, &mut enc_grad);
    }
    let total = rss + cfg.alpha_recon * recon + cfg.beta_ctrl * ctrl;
    Ok((LossParts { rss, recon, ctrl, total }, enc_grad, dec_grad))
}

/// Mini-batch gradient descent on `L_NN`, deterministic for a fixed seed.
pub fn train_autoencoder(data: &TransitionDataset, cfg: &AutoencoderConfig, seed: u64) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if data.len() < cfg.batch_size.min(2) {
        return Err(Error::input("not enough transitions to train the encoder"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.state_dim;
    let mut encoder = Mlp::random(n, cfg.hidden, cfg.latent_dim, &mut rng);
    let mut decoder = Mlp::random(cfg.latent_dim, cfg.hidden, n, &mut rng);
    let batch_size = cfg.batch_size.min(data.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let batch: Vec<&Transition> = index::sample(&mut rng, data.len(), batch_size)
            .into_iter()
            .map(|i| &data.records[i])
            .collect();
        let (parts, mut ge, mut gd) = batch_loss_and_gradient(&encoder, &decoder, &batch, cfg)?;
        if !parts.total.is_finite() {
            return Err(Error::Optimization {
                message: "encoder training diverged".into(),
                trace: history.iter().map(|p: &LossParts| p.total).collect(),
            });
        }
        let norm = (ge.norm_sq() + gd.norm_sq()).sqrt();
        if norm > 10.0 {
            ge.scale(10.0 / norm);
            gd.scale(10.0 / norm);
        }
        encoder.apply_step(&ge, cfg.step_size);
        decoder.apply_step(&gd, cfg.step_size);
        history.push(parts);
    }
    Ok(TrainingOutcome {
        dictionary: Dictionary::trained(encoder)?,
        decoder: Decoder::TrainedDecoder { net: decoder },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_batch(seed: u64, t: usize) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|k| {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u = vec![rng.random_range(-1.0..1.0)];
                let x_next = vec![x[0] + 0.1 * x[1], x[1] + 0.1 * (u[0] - x[0].sin())];
                Transition { episode: k as u64, k: 0, x, u, x_next }
            })
            .collect()
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let encoder = Mlp::random(2, 4, 3, &mut rng);
        let decoder = Mlp::random(3, 4, 2, &mut rng);
        let data = toy_batch(2, 12);
        let batch: Vec<&Transition> = data.iter().collect();
        let cfg = AutoencoderConfig { ridge: 1e-2, ..Default::default() };
        let (_, ge, gd) = batch_loss_and_gradient(&encoder, &decoder, &batch, &cfg).unwrap();
        let loss = |e: &Mlp, d: &Mlp| batch_loss_and_gradient(e, d, &batch, &cfg).unwrap().0.total;
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 1), (3, 0), (2, 1)] {
            let mut ep = encoder.clone();
            ep.w1[(i, j)] += h;
            let mut em = encoder.clone();
            em.w1[(i, j)] -= h;
            let fd = (loss(&ep, &decoder) - loss(&em, &decoder)) / (2.0 * h);
            assert!((fd - ge.w1[(i, j)]).abs() <= 1e-4 * fd.abs().max(1e-2), "enc w1({i},{j}) fd={fd} g={}", ge.w1[(i, j)]);
        }
        for (i, j) in [(0, 0), (2, 3), (1, 2)] {
            let mut ep = encoder.clone();
            ep.w2[(i, j)] += h;
            let mut em = encoder.clone();
            em.w2[(i, j)] -= h;
            let fd = (loss(&ep, &decoder) - loss(&em, &decoder)) / (2.0 * h);
            assert!((fd - ge.w2[(i, j)]).abs() <= 1e-4 * fd.abs().max(1e-2), "enc w2({i},{j}) fd={fd} g={}", ge.w2[(i, j)]);
        }
        for (i, j) in [(0, 0), (1, 3)] {
            let mut dp = decoder.clone();
            dp.w2[(i, j)] += h;
            let mut dm = decoder.clone();
            dm.w2[(i, j)] -= h;
            let fd = (loss(&encoder, &dp) - loss(&encoder, &dm)) / (2.0 * h);
            assert!((fd - gd.w2[(i, j)]).abs() <= 1e-4 * fd.abs().max(1e-2));
        }
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let mut ds = TransitionDataset::new(2, 1, 0);
        for t in toy_batch(5, 200) {
            ds.push(t).unwrap();
        }
        let cfg = AutoencoderConfig { hidden: 8, latent_dim: 3, iterations: 150, batch_size: 64, ..Default::default() };
        let a = train_autoencoder(&ds, &cfg, 42).unwrap();
        let b = train_autoencoder(&ds, &cfg, 42).unwrap();
        assert_eq!(a.dictionary, b.dictionary);
        let mean = |h: &[LossParts]| h.iter().map(|p| p.total).sum::<f64>() / h.len() as f64;
        let first = mean(&a.history[..10]);
        let last = mean(&a.history[a.history.len() - 10..]);
        assert!(last < first, "loss {first} -> {last}");
    }
}
