//! L2-regularized logistic regression trained with SAGA.
//!
//! Objective (intercept unpenalized):
//! `sum_i [softplus(z_i) - y_i z_i] + ||w||^2 / (2C)` with `z_i = w.x_i + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub random_state: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 1000,
            tol: 1e-3,
            random_state: 0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The regularized negative log-likelihood and its gradient.
pub struct LogisticObjective<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [bool],
    pub c: f64,
}

impl LogisticObjective<'_> {
    pub fn value(&self, w: &[f64], b: f64) -> f64 {
        let nll: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(xi, &yi)| {
                let z = dot(w, xi) + b;
                softplus(z) - if yi { z } else { 0.0 }
            })
            .sum();
        nll + dot(w, w) / (2.0 * self.c)
    }

    /// Gradient with respect to `(w, b)`; the last entry is the intercept.
    pub fn gradient(&self, w: &[f64], b: f64) -> Vec<f64> {
        let mut g: Vec<f64> = w.iter().map(|wj| wj / self.c).collect();
        g.push(0.0);
        let d = w.len();
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let r = sigmoid(dot(w, xi) + b) - f64::from(u8::from(yi));
            for (gj, xij) in g[..d].iter_mut().zip(xi) {
                *gj += r * xij;
            }
            g[d] += r;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub epochs: usize,
    pub converged: bool,
}

/// SAGA on the averaged objective with step size `1 / (2L + min(2 n alpha, L))`.
pub(crate) fn fit_saga(x: &Matrix, y: &[bool], cfg: &LogisticConfig) -> LogisticFit {
    let n = x.n_rows;
    let d = x.n_cols;
    let nf = n as f64;
    let alpha = 1.0 / (cfg.c * nf);
    let max_sq = (0..n)
        .map(|i| dot(x.row(i), x.row(i)))
        .fold(0.0f64, f64::max);
    let lipschitz = 0.25 * (max_sq + 1.0) + alpha;
    let mun = (2.0 * nf * alpha).min(lipschitz);
    let step = 1.0 / (2.0 * lipschitz + mun);
    let decay = 1.0 - step * alpha;

    let target: Vec<f64> = y.iter().map(|&v| f64::from(u8::from(v))).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut memory = vec![0.0; n];
    let mut sum_grad = vec![0.0; d];
    let mut sum_grad_b = 0.0;
    let mut prev = vec![0.0; d + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_state);

    let mut epochs = 0;
    let mut converged = false;
    while epochs < cfg.max_iter {
        prev[..d].copy_from_slice(&w);
        prev[d] = b;
        for _ in 0..n {
            let i = rng.random_range(0..n);
            let xi = x.row(i);
            let g = sigmoid(dot(&w, xi) + b) - target[i];
            let diff = g - memory[i];
            memory[i] = g;
            for ((wj, &xij), sj) in w.iter_mut().zip(xi).zip(sum_grad.iter_mut()) {
                *wj = *wj * decay - step * (diff * xij + *sj / nf);
                *sj += diff * xij;
            }
            b -= step * (diff + sum_grad_b / nf);
            sum_grad_b += diff;
        }
        epochs += 1;
        let change = w
            .iter()
            .chain(std::iter::once(&b))
            .zip(&prev)
            .map(|(a, p)| (a - p).abs())
            .fold(0.0f64, f64::max);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("logistic regression hit max_iter={} without converging", cfg.max_iter);
    }
    LogisticFit {
        weights: w,
        intercept: b,
        epochs,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_problem(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<bool>, Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let y = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let w = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (x, y, w, rng.sample(StandardNormal))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (x, y, w, b) = random_problem(seed, 12, 3);
            let obj = LogisticObjective { x: &x, y: &y, c: 0.7 };
            let g = obj.gradient(&w, b);
            let h = 1e-5;
            for j in 0..=w.len() {
                let eval = |delta: f64| {
                    let mut w2 = w.clone();
                    let mut b2 = b;
                    if j < w.len() {
                        w2[j] += delta;
                    } else {
                        b2 += delta;
                    }
                    obj.value(&w2, b2)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1e-8);
                assert!(rel < 1e-5, "seed {seed} coord {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn objective_is_convex_along_lines(seed in 0u64..1000, t in 0.0f64..1.0) {
            let (x, y, w, b) = random_problem(seed, 8, 2);
            let obj = LogisticObjective { x: &x, y: &y, c: 1.0 };
            let w2: Vec<f64> = w.iter().map(|v| -v).collect();
            let mix: Vec<f64> = w.iter().zip(&w2).map(|(a, c)| t * a + (1.0 - t) * c).collect();
            let lhs = obj.value(&mix, b);
            let rhs = t * obj.value(&w, b) + (1.0 - t) * obj.value(&w2, b);
            prop_assert!(lhs <= rhs + 1e-9);
        }
    }
}
