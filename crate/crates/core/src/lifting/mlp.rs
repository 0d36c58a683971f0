use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix_serde;

/// One-hidden-layer perceptron with `tanh` activation: `W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    #[serde(with = "matrix_serde::matrix")]
    pub w1: DMatrix<f64>,
    #[serde(with = "matrix_serde::vector")]
    pub b1: DVector<f64>,
    #[serde(with = "matrix_serde::matrix")]
    pub w2: DMatrix<f64>,
    #[serde(with = "matrix_serde::vector")]
    pub b2: DVector<f64>,
}

/// Parameter gradient laid out like [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            w1: DMatrix::zeros(net.w1.nrows(), net.w1.ncols()),
            b1: DVector::zeros(net.b1.len()),
            w2: DMatrix::zeros(net.w2.nrows(), net.w2.ncols()),
            b2: DVector::zeros(net.b2.len()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
    }

    pub fn norm_sq(&self) -> f64 {
        self.w1.norm_squared() + self.b1.norm_squared() + self.w2.norm_squared() + self.b2.norm_squared()
    }
}

impl Mlp {
    pub fn random<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let s1 = (1.0 / input as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(hidden, input, |_, _| rng.random_range(-s1..s1)),
            b1: DVector::from_fn(hidden, |_, _| rng.random_range(-0.1..0.1)),
            w2: DMatrix::from_fn(output, hidden, |_, _| rng.random_range(-s2..s2)),
            b2: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn is_consistent(&self) -> bool {
        self.b1.len() == self.w1.nrows()
            && self.w2.ncols() == self.w1.nrows()
            && self.b2.len() == self.w2.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_hidden(x).1
    }

    /// Returns `(tanh activations, output)`.
    pub fn forward_hidden(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let h = (&self.w1 * x + &self.b1).map(f64::tanh);
        let out = &self.w2 * &h + &self.b2;
        (h, out)
    }

    /// Accumulates `∂L/∂θ` into `grad` for upstream gradient `g_out = ∂L/∂out`
    /// and returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: &DVector<f64>,
        hidden: &DVector<f64>,
        g_out: &DVector<f64>,
        grad: &mut MlpGrad,
    ) -> DVector<f64> {
        grad.w2 += g_out * hidden.transpose();
        grad.b2 += g_out;
        let g_h = self.w2.transpose() * g_out;
        let g_pre = g_h.zip_map(hidden, |g, h| g * (1.0 - h * h));
        grad.w1 += &g_pre * x.transpose();
        grad.b1 += &g_pre;
        self.w1.transpose() * g_pre
    }

    pub fn apply_step(&mut self, grad: &MlpGrad, step: f64) {
        self.w1 -= &grad.w1 * step;
        self.b1 -= &grad.b1 * step;
        self.w2 -= &grad.w2 * step;
        self.b2 -= &grad.b2 * step;
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::new();
        p.extend(self.w1.transpose().iter());
        p.extend(self.b1.iter());
        p.extend(self.w2.transpose().iter());
        p.extend(self.b2.iter());
        p
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::random(3, 5, 2, &mut rng);
        let x = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let g_out = DVector::from_vec(vec![0.4, -1.3]);
        let loss = |n: &Mlp, x: &DVector<f64>| n.forward(x).dot(&g_out);
        let (h, _) = net.forward_hidden(&x);
        let mut grad = MlpGrad::zeros_like(&net);
        let gx = net.backward(&x, &h, &g_out, &mut grad);
        let eps = 1e-6;
        for i in 0..net.w1.nrows() {
            for j in 0..net.w1.ncols() {
                let mut p = net.clone();
                p.w1[(i, j)] += eps;
                let mut m = net.clone();
                m.w1[(i, j)] -= eps;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
                assert!((fd - grad.w1[(i, j)]).abs() < 1e-8);
            }
        }
        for j in 0..3 {
            let mut xp = x.clone();
            xp[j] += eps;
            let mut xm = x.clone();
            xm[j] -= eps;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * eps);
            assert!((fd - gx[j]).abs() < 1e-8);
        }
    }
}
