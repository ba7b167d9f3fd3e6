//! Variance schedule and closed-form forward process.
//!
//! Training draws a continuous noise level `ᾱ = exp(−(λξ)²)` with
//! `ξ ~ U[0,1)`. Sampling walks a discrete ladder built from the same curve,
//! `ᾱ_t = exp(−(λ·t/T)²)`, so the endpoint `ᾱ_T = exp(−λ²)` matches what the
//! network saw during training.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, Rng};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_LAMBDA: f64 = 2.25;

/// `exp(−(λξ)²)`.
pub fn alpha_bar_at(xi: f64, lambda: f64) -> f64 {
    (-(lambda * xi).powi(2)).exp()
}

/// Draws a training noise level in `(exp(−λ²), 1]`.
pub fn sample_alpha_bar(lambda: f64, rng: &mut Rng) -> f64 {
    let xi: f64 = rng.random();
    alpha_bar_at(xi, lambda)
}

/// `σ_t = √((1−ᾱ_{t−1}) / (1−ᾱ_t) · β_t)` with `β_t = 1 − ᾱ_t/ᾱ_{t−1}`.
pub fn posterior_sigma(alpha_bar_prev: f64, alpha_bar: f64) -> f64 {
    let beta = 1.0 - alpha_bar / alpha_bar_prev;
    ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta).sqrt()
}

/// Discrete `{β_t, α_t, ᾱ_t, σ_t}` ladder for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    steps: usize,
    lambda: f64,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(DEFAULT_STEPS, DEFAULT_LAMBDA).expect("default schedule is valid")
    }
}

impl Schedule {
    pub fn new(steps: usize, lambda: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("schedule lambda must be positive, got {lambda}")));
        }
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| alpha_bar_at(t as f64 / steps as f64, lambda))
            .collect();
        // index 0 is a placeholder so that alpha[t] lines up with step t
        let mut alpha = vec![1.0; steps + 1];
        let mut beta = vec![0.0; steps + 1];
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            alpha[t] = alpha_bar[t] / alpha_bar[t - 1];
            beta[t] = 1.0 - alpha[t];
            sigma[t] = posterior_sigma(alpha_bar[t - 1], alpha_bar[t]);
        }
        Ok(Self {
            steps,
            lambda,
            alpha_bar,
            alpha,
            beta,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check_step(t);
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check_step(t);
        self.beta[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.check_step(t);
        self.sigma[t]
    }

    pub fn final_alpha_bar(&self) -> f64 {
        self.alpha_bar[self.steps]
    }

    fn check_step(&self, t: usize) {
        assert!((1..=self.steps).contains(&t), "step {t} outside 1..={}", self.steps);
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for a given `ε`.
pub fn noised<T: Element>(x0: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_alpha_bar(alpha_bar)?;
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, "forward_sample", |x, e| a * x + b * e)
}

/// Draws `ε ~ N(0, I)` and returns `(x_t, ε)`.
pub fn forward_sample<T: Element>(x0: &Tensor<T>, alpha_bar: f64, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    check_alpha_bar(alpha_bar)?;
    let eps = standard_normal(x0.shape().to_vec(), rng);
    Ok((noised(x0, alpha_bar, &eps)?, eps))
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha_bar must lie in (0, 1], got {alpha_bar}")))
    }
}
