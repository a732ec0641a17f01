//! Linear max-margin classifier trained by subgradient descent on the
//! hinge loss with an L2 penalty (Pegasos-style schedule).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// Inverse regularization strength.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            epochs: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub params: SvmParams,
}

impl LinearSvm {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(row)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.decision(row) > 0.0)
    }
}

/// Fit by stochastic subgradient descent; deterministic given the seed.
pub fn fit_svm(x: &[Vec<f64>], y: &[u8], params: &SvmParams) -> LinearSvm {
    let n = x.len();
    let d = x[0].len();
    let lambda = 1.0 / (params.c * n as f64);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let target = if y[i] == 1 { 1.0 } else { -1.0 };
            let margin = target * (w.iter().zip(&x[i]).map(|(wj, xj)| wj * xj).sum::<f64>() + b);
            for wj in w.iter_mut() {
                *wj *= 1.0 - eta * lambda;
            }
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += eta * target * xj;
                }
                // Unregularized bias with a 1/t step.
                b += target / t as f64;
            }
        }
    }
    LinearSvm {
        weights: w,
        bias: b,
        params: params.clone(),
    }
}
