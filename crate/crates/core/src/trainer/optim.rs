//! Rectified Adam with LookAhead ("Ranger").

use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub lookahead_alpha: f64,
    pub lookahead_k: u64,
    pub n_sma_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lookahead_alpha: 0.5,
            lookahead_k: 6,
            n_sma_threshold: 5.0,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lookahead_alpha", self.lookahead_alpha),
            ("n_sma_threshold", self.n_sma_threshold),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lookahead_alpha > 1.0 {
            return Err(Error::invalid(format!("lookahead_alpha must be at most 1, got {}", self.lookahead_alpha)));
        }
        if self.lookahead_k == 0 {
            return Err(Error::invalid("lookahead_k must be at least 1"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Step size multiplier of one RAdam update and whether the adaptive
/// (variance-rectified) branch is active.
pub fn radam_step_size(config: &OptimizerConfig, step: u64) -> (f64, bool) {
    let t = step as i32;
    let beta2_t = config.beta2.powi(t);
    let n_sma_max = 2.0 / (1.0 - config.beta2) - 1.0;
    let n_sma = n_sma_max - 2.0 * step as f64 * beta2_t / (1.0 - beta2_t);
    let bias1 = 1.0 - config.beta1.powi(t);
    if n_sma > config.n_sma_threshold {
        let r = (1.0 - beta2_t) * (n_sma - 4.0) / (n_sma_max - 4.0) * (n_sma - 2.0) / n_sma * n_sma_max / (n_sma_max - 2.0);
        (r.sqrt() / bias1, true)
    } else {
        (1.0 / bias1, false)
    }
}

#[derive(Clone, Debug)]
pub struct Ranger<T> {
    config: OptimizerConfig,
    step: u64,
    exp_avg: Vec<Tensor<T>>,
    exp_avg_sq: Vec<Tensor<T>>,
    slow: Vec<Tensor<T>>,
}

impl<T: Element> Ranger<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape().to_vec())).collect();
        Ok(Self {
            config,
            step: 0,
            exp_avg: zeros(),
            exp_avg_sq: zeros(),
            slow: (0..params.len()).map(|i| params.tensor(i).clone()).collect(),
        })
    }

    /// Rebuilds an optimizer from saved buffers.
    pub fn from_parts(
        config: OptimizerConfig,
        step: u64,
        exp_avg: Vec<Tensor<T>>,
        exp_avg_sq: Vec<Tensor<T>>,
        slow: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if exp_avg.len() != exp_avg_sq.len() || exp_avg.len() != slow.len() {
            return Err(Error::invalid("optimizer buffers have inconsistent lengths"));
        }
        Ok(Self { config, step, exp_avg, exp_avg_sq, slow })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn exp_avg(&self) -> &[Tensor<T>] {
        &self.exp_avg
    }

    pub fn exp_avg_sq(&self) -> &[Tensor<T>] {
        &self.exp_avg_sq
    }

    pub fn slow(&self) -> &[Tensor<T>] {
        &self.slow
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.exp_avg.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.exp_avg.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (step_size, adaptive) = radam_step_size(c, self.step);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(c.weight_decay * c.learning_rate);
        let scaled = T::lit(step_size * c.learning_rate);
        let eps = T::lit(c.eps);
        let sync = self.step.is_multiple_of(c.lookahead_k);
        let alpha = T::lit(c.lookahead_alpha);

        for (i, grad) in grads.iter().enumerate() {
            if params.is_frozen(i) {
                continue;
            }
            let p = params.tensor_mut(i);
            p.expect_same_shape(grad, "optimizer")?;
            let m = self.exp_avg[i].data_mut();
            let v = self.exp_avg_sq[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *v = b2 * *v + one_b2 * g * g;
                *m = b1 * *m + one_b1 * g;
                if c.weight_decay != 0.0 {
                    *w -= decay * *w;
                }
                if adaptive {
                    *w -= scaled * *m / (v.sqrt() + eps);
                } else {
                    *w -= scaled * *m;
                }
            }
            if sync {
                let slow = self.slow[i].data_mut();
                for (w, s) in p.data_mut().iter_mut().zip(slow.iter_mut()) {
                    *s += alpha * (*w - *s);
                    *w = *s;
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let factor = T::lit(max_norm / (total + 1e-6));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single(0.75);
        let mut opt = Ranger::new(OptimizerConfig::default(), &params).unwrap();
        for _ in 0..20 {
            opt.step(&mut params, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(params.tensor(0).data(), &[0.75]);
    }

    #[test]
    fn frozen_parameters_ignore_decay_and_gradients() {
        let mut params = ParamStore::new();
        params.add_frozen("b", Tensor::scalar(2.0));
        let cfg = OptimizerConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = Ranger::new(cfg, &params).unwrap();
        for _ in 0..10 {
            opt.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        }
        assert_eq!(params.tensor(0).data(), &[2.0]);
    }

    #[test]
    fn first_step_takes_the_momentum_only_branch() {
        let cfg = OptimizerConfig::default();
        let (size, adaptive) = radam_step_size(&cfg, 1);
        assert!(!adaptive);
        // 1 / (1 − β1)
        assert!((size - 20.0).abs() < 1e-9);
        let mut params = single(1.0);
        let mut opt = Ranger::new(cfg, &params).unwrap();
        opt.step(&mut params, &[Tensor::scalar(0.5)]).unwrap();
        // m = 0.05·0.5 = 0.025; w = 1 − 20·1e-4·0.025
        assert!((params.tensor(0).data()[0] - (1.0 - 20.0 * 1e-4 * 0.025)).abs() < 1e-15);
    }

    #[test]
    fn rectification_switches_on_after_the_threshold() {
        let cfg = OptimizerConfig::default();
        let first_adaptive = (1..20).find(|&s| radam_step_size(&cfg, s).1).unwrap();
        assert_eq!(first_adaptive, 6);
    }

    #[test]
    fn lookahead_blends_on_every_kth_step() {
        let cfg = OptimizerConfig { lookahead_k: 3, ..Default::default() };
        let mut params = single(0.0);
        let mut opt = Ranger::new(cfg, &params).unwrap();
        opt.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        opt.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let before_sync = params.tensor(0).data()[0];
        assert_eq!(opt.slow()[0].data(), &[0.0]);
        opt.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let synced = params.tensor(0).data()[0];
        assert_eq!(opt.slow()[0].data(), &[synced]);
        // slow moved half-way from 0 towards the fast weight it replaced
        assert!(synced < 0.0 && synced > before_sync * 2.0);
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut g = vec![Tensor::new([2], vec![3.0f64, 4.0]).unwrap()];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-6);
        let mut small = vec![Tensor::new([2], vec![0.3f64, 0.4]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn rejects_invalid_configuration() {
        let params = single(0.0);
        for cfg in [
            OptimizerConfig { beta1: 1.0, ..Default::default() },
            OptimizerConfig { learning_rate: 0.0, ..Default::default() },
            OptimizerConfig { lookahead_k: 0, ..Default::default() },
            OptimizerConfig { weight_decay: -1.0, ..Default::default() },
        ] {
            assert!(Ranger::new(cfg, &params).is_err());
        }
    }
}
