//! Ancestral sampling with an optional Langevin corrector.
//!
//! A run starts from `x_T` (optionally biased towards a colour), walks
//! `t = T..1` with the predictor, optionally applies `M` corrector updates per
//! step, and can pin a masked region to a target image at every step. Several
//! models can share one trajectory, each taking over below its switch step.

use crate::error::{Error, Result};
use crate::network::{DenoiserModel, EncoderFeatures};
use crate::rng::{self, standard_normal, Rng};
use crate::schedule::Schedule;
use crate::tensor::{Element, Tensor};

/// Step at which the fine model takes over in a two-model run.
pub const DEFAULT_SWITCH_AT: usize = 40;

/// Region `(v_rgb, v_alpha)` pinned during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTarget<T> {
    rgb: Tensor<T>,
    alpha: Tensor<T>,
}

impl<T: Element> MaskedTarget<T> {
    /// `rgb` is `[3,H,W]` or `[1,3,H,W]` in `[−1,1]`; `alpha` is `[1,H,W]` or `[1,1,H,W]` in `[0,1]`.
    pub fn new(rgb: Tensor<T>, alpha: Tensor<T>) -> Result<Self> {
        let rgb = batch_of_one(rgb, 3, "mask rgb")?;
        let alpha = batch_of_one(alpha, 1, "mask alpha")?;
        if rgb.shape()[2..] != alpha.shape()[2..] {
            return Err(Error::shape("mask", format!("rgb {:?} and alpha {:?} differ in size", rgb.shape(), alpha.shape())));
        }
        if let Some(v) = alpha.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::invalid(format!("mask alpha {v} outside [0, 1]")));
        }
        if let Some(v) = rgb.data().iter().find(|v| !(**v >= -T::one() && **v <= T::one())) {
            return Err(Error::invalid(format!("mask rgb {v} outside [-1, 1]")));
        }
        Ok(Self { rgb, alpha })
    }

    pub fn rgb(&self) -> &Tensor<T> {
        &self.rgb
    }

    pub fn alpha(&self) -> &Tensor<T> {
        &self.alpha
    }
}

fn batch_of_one<T: Element>(t: Tensor<T>, channels: usize, what: &'static str) -> Result<Tensor<T>> {
    let t = match t.rank() {
        3 => {
            let s = t.shape().to_vec();
            t.reshape([1, s[0], s[1], s[2]])?
        }
        _ => t,
    };
    let (n, c, _, _) = t.dims4(what)?;
    if n != 1 || c != channels {
        return Err(Error::shape(what, format!("expected [1,{channels},H,W], got {:?}", t.shape())));
    }
    Ok(t)
}

/// `x ⊙ (1 − v_alpha) + v_rgb ⊙ v_alpha`, broadcast over the batch of `x` (`[N,3,H,W]`).
pub fn apply_mask<T: Element>(x: &Tensor<T>, mask: &MaskedTarget<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("apply_mask")?;
    if c != 3 || mask.rgb.shape()[2..] != [h, w] {
        return Err(Error::shape("apply_mask", format!("state {:?} does not match mask {:?}", x.shape(), mask.rgb.shape())));
    }
    let plane = h * w;
    let (rgb, alpha) = (mask.rgb.data(), mask.alpha.data());
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let p = i % plane;
        let ch = (i / plane) % c;
        let a = alpha[p];
        *v = *v * (T::one() - a) + rgb[ch * plane + p] * a;
    }
    debug_assert_eq!(out.len(), n * c * plane);
    Ok(out)
}

/// `√ᾱ_T·V + √(1−ᾱ_T)·ε`, or `ε` itself when no colour bias is given.
pub fn biased_init<T: Element>(eps: Tensor<T>, bias: Option<[f64; 3]>, alpha_bar_t: f64) -> Result<Tensor<T>> {
    let Some(v) = bias else { return Ok(eps) };
    check_bias(v)?;
    let (_, c, h, w) = eps.dims4("init_state")?;
    if c != 3 {
        return Err(Error::ShapeMismatch { op: "init_state", axis: "channels", expected: 3, actual: c });
    }
    let plane = h * w;
    let a = alpha_bar_t.sqrt();
    let b = (1.0 - alpha_bar_t).sqrt();
    let mut out = eps;
    for (i, e) in out.data_mut().iter_mut().enumerate() {
        let mean = T::lit(a * v[(i / plane) % 3]);
        *e = mean + T::lit(b) * *e;
    }
    Ok(out)
}

fn check_bias(v: [f64; 3]) -> Result<()> {
    match v.iter().find(|c| !(**c >= -1.0 && **c <= 1.0)) {
        Some(c) => Err(Error::invalid(format!("bias colour component {c} outside [-1, 1]"))),
        None => Ok(()),
    }
}

/// Draws `x_T` of `shape` from `rng`.
pub fn init_state<T: Element>(shape: &[usize], bias: Option<[f64; 3]>, alpha_bar_t: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    biased_init(standard_normal(shape.to_vec(), rng), bias, alpha_bar_t)
}

/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε_θ)/√α_t + σ_t·z`; `z = None` means zero noise.
pub fn predictor_update<T: Element>(x_t: &Tensor<T>, eps: &Tensor<T>, schedule: &Schedule, t: usize, z: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let sqrt_alpha = T::lit(schedule.alpha(t).sqrt());
    let coef = T::lit(schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt());
    let mean = x_t.zip_map(eps, "predictor", |x, e| (x - coef * e) / sqrt_alpha)?;
    match z {
        None => Ok(mean),
        Some(z) => {
            let sigma = T::lit(schedule.sigma(t));
            mean.zip_map(z, "predictor", |m, z| m + sigma * z)
        }
    }
}

/// Score estimate `s_θ = −ε_θ / √(1−ᾱ)`.
pub fn score<T: Element>(eps: &Tensor<T>, alpha_bar: f64) -> Tensor<T> {
    let k = T::lit(1.0 / (1.0 - alpha_bar).sqrt());
    eps.map(|e| -e * k)
}

/// One Langevin update with step `2α_t‖z‖²/‖ε_θ‖²`:
/// `x + step·s_θ + √(2·step)·z`. Returns `None` when `‖ε_θ‖ = 0`.
pub fn corrector_update<T: Element>(x: &Tensor<T>, eps: &Tensor<T>, z: &Tensor<T>, alpha_t: f64, alpha_bar_t: f64) -> Result<Option<(Tensor<T>, f64)>> {
    let eps_norm = eps.norm();
    if eps_norm == 0.0 {
        return Ok(None);
    }
    let step = 2.0 * alpha_t * z.norm().powi(2) / eps_norm.powi(2);
    let drift = T::lit(step / (1.0 - alpha_bar_t).sqrt());
    let noise = T::lit((2.0 * step).sqrt());
    let moved = x.zip_map(eps, "corrector", |x, e| x - drift * e)?;
    Ok(Some((moved.zip_map(z, "corrector", |m, z| m + noise * z)?, step)))
}

/// A model and the largest `t` it handles.
#[derive(Clone, Copy, Debug)]
pub struct Stage<'m, T> {
    pub model: &'m DenoiserModel<T>,
    pub from_t: usize,
}

/// What happened during one outer iteration of [`SamplerRun::sample_observed`].
#[derive(Debug)]
pub struct StepEvent<'a, T> {
    pub t: usize,
    pub stage: usize,
    /// State at the top of the iteration, after the mask was applied.
    pub x_t: &'a Tensor<T>,
    pub eps_norm: f64,
    pub correctors_applied: usize,
    pub correctors_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct SamplerRun<'m, T> {
    pub schedule: Schedule,
    pub stages: Vec<Stage<'m, T>>,
    /// Corrector iterations `M` per step.
    pub corrector_steps: usize,
    pub bias: Option<[f64; 3]>,
    pub mask: Option<MaskedTarget<T>>,
    pub seed: u64,
    /// Conditioning line drawing `[1,1,S,S]`.
    pub line: Tensor<T>,
}

impl<'m, T: Element> SamplerRun<'m, T> {
    /// One model for the whole trajectory, no corrector, bias or mask.
    pub fn new(schedule: Schedule, model: &'m DenoiserModel<T>, line: Tensor<T>, seed: u64) -> Self {
        let from_t = schedule.steps();
        Self {
            schedule,
            stages: vec![Stage { model, from_t }],
            corrector_steps: 0,
            bias: None,
            mask: None,
            seed,
            line,
        }
    }

    /// `coarse` for `t > switch_at`, `fine` from `switch_at` down.
    pub fn mixed(schedule: Schedule, coarse: &'m DenoiserModel<T>, fine: &'m DenoiserModel<T>, switch_at: usize, line: Tensor<T>, seed: u64) -> Self {
        let mut run = Self::new(schedule, coarse, line, seed);
        run.stages.push(Stage { model: fine, from_t: switch_at });
        run
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.schedule.steps();
        if self.stages.is_empty() {
            return Err(Error::invalid("sampler needs at least one model"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(1..=steps).contains(&s.from_t) {
                return Err(Error::invalid(format!("switch step {} outside [1, {steps}]", s.from_t)));
            }
            if i > 0 && s.from_t >= self.stages[i - 1].from_t {
                return Err(Error::invalid("switch steps must be strictly decreasing"));
            }
        }
        if let Some(v) = self.bias {
            check_bias(v)?;
        }
        let size = self.stages[0].model.config().image_size;
        if let Some(s) = self.stages.iter().find(|s| s.model.config().image_size != size) {
            return Err(Error::invalid(format!(
                "models disagree on resolution: {size} vs {}",
                s.model.config().image_size
            )));
        }
        if self.line.shape() != [1, 1, size, size] {
            return Err(Error::shape("sample", format!("line must be [1,1,{size},{size}], got {:?}", self.line.shape())));
        }
        if let Some(m) = &self.mask {
            if m.rgb.shape()[2..] != [size, size] {
                return Err(Error::shape("sample", format!("mask is {:?}, resolution is {size}", m.rgb.shape())));
            }
        }
        Ok(())
    }

    /// Index of the stage that handles step `t`: the last one whose `from_t ≥ t`,
    /// or the first stage when `t` lies above every switch point.
    pub fn select_model(&self, t: usize) -> Result<usize> {
        if self.stages.is_empty() {
            return Err(Error::invalid("sampler needs at least one model"));
        }
        Ok(self.stages.iter().rposition(|s| s.from_t >= t).unwrap_or(0))
    }

    /// Line-encoder activations for every stage; reusable across samples.
    pub fn encode(&self) -> Result<Vec<EncoderFeatures<T>>> {
        self.validate()?;
        self.stages.iter().map(|s| s.model.encode(&self.line)).collect()
    }

    /// Sample `index`, drawn from stream `index` of the run seed.
    pub fn sample(&self, index: u64) -> Result<Tensor<T>> {
        let features = self.encode()?;
        self.sample_with(&features, index, &mut |_| {})
    }

    pub fn sample_observed(&self, index: u64, observer: &mut dyn FnMut(&StepEvent<'_, T>)) -> Result<Tensor<T>> {
        let features = self.encode()?;
        self.sample_with(&features, index, observer)
    }

    /// Runs one trajectory with precomputed encoder features. The stream is
    /// consumed as: `x_T`, then per step the predictor `z` (for `t > 1`)
    /// followed by one `z` per corrector iteration.
    pub fn sample_with(&self, features: &[EncoderFeatures<T>], index: u64, observer: &mut dyn FnMut(&StepEvent<'_, T>)) -> Result<Tensor<T>> {
        let size = self.stages[0].model.config().image_size;
        let shape = [1, 3, size, size];
        let mut rng = rng::stream(self.seed, index);
        let mut x = init_state(&shape, self.bias, self.schedule.final_alpha_bar(), &mut rng)?;

        for t in (1..=self.schedule.steps()).rev() {
            if let Some(mask) = &self.mask {
                x = apply_mask(&x, mask)?;
            }
            let stage = self.select_model(t)?;
            let model = self.stages[stage].model;
            let alpha_bar = self.schedule.alpha_bar(t);
            let eps = model.predict_eps_cached(&x, alpha_bar, &features[stage])?;
            check_finite(&eps, t, stage)?;
            let z = (t > 1).then(|| standard_normal(shape.to_vec(), &mut rng));
            let mut next = predictor_update(&x, &eps, &self.schedule, t, z.as_ref())?;

            let (mut applied, mut skipped) = (0, 0);
            for _ in 0..self.corrector_steps {
                let z = standard_normal(shape.to_vec(), &mut rng);
                let eps_c = model.predict_eps_cached(&next, alpha_bar, &features[stage])?;
                check_finite(&eps_c, t, stage)?;
                match corrector_update(&next, &eps_c, &z, self.schedule.alpha(t), alpha_bar)? {
                    Some((moved, _)) => {
                        next = moved;
                        applied += 1;
                    }
                    None => skipped += 1,
                }
            }
            observer(&StepEvent {
                t,
                stage,
                x_t: &x,
                eps_norm: eps.norm(),
                correctors_applied: applied,
                correctors_skipped: skipped,
            });
            if !next.all_finite() {
                return Err(Error::NonFinite(format!("sampler state at t={t} (model {stage})")));
            }
            x = next;
        }
        if let Some(mask) = &self.mask {
            x = apply_mask(&x, mask)?;
        }
        Ok(x.map(|v| v.max(-T::one()).min(T::one())))
    }

    /// Samples `0..n`, in parallel when the `parallel` feature is on. Output
    /// order and values do not depend on scheduling.
    pub fn sample_many(&self, n: usize) -> Result<Vec<Tensor<T>>> {
        let features = self.encode()?;
        let one = |i: usize| self.sample_with(&features, i as u64, &mut |_| {});
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n).map(one).collect()
        }
    }
}

fn check_finite<T: Element>(eps: &Tensor<T>, t: usize, stage: usize) -> Result<()> {
    if eps.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("noise prediction at t={t} (model {stage})")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::rng::seeded;

    fn tiny(seed: u64) -> DenoiserModel<f64> {
        let cfg = NetworkConfig { channels: 2, depth: 1, fourier_dim: 4, fourier_seed: 0, image_size: 8 };
        DenoiserModel::new(cfg, &mut seeded(seed)).unwrap()
    }

    fn line() -> Tensor<f64> {
        Tensor::from_fn([1, 1, 8, 8], |i| if i % 9 == 0 { -1.0 } else { 1.0 })
    }

    #[test]
    fn stage_selection() {
        let (a, b) = (tiny(1), tiny(2));
        let single = SamplerRun::new(Schedule::new(1000, 2.25).unwrap(), &a, line(), 0);
        assert!([1, 40, 500, 1000].iter().all(|&t| single.select_model(t).unwrap() == 0));
        let mixed = SamplerRun::mixed(Schedule::new(1000, 2.25).unwrap(), &a, &b, DEFAULT_SWITCH_AT, line(), 0);
        assert_eq!(mixed.select_model(1000).unwrap(), 0);
        assert_eq!(mixed.select_model(41).unwrap(), 0);
        assert_eq!(mixed.select_model(40).unwrap(), 1);
        assert_eq!(mixed.select_model(1).unwrap(), 1);
        let mut empty = single.clone();
        empty.stages.clear();
        assert!(empty.select_model(1).is_err());
        assert!(empty.validate().is_err());
    }

    #[test]
    fn invalid_switch_points_are_rejected() {
        let (a, b) = (tiny(1), tiny(2));
        let s = Schedule::new(100, 2.25).unwrap();
        for switch in [0, 100, 101] {
            assert!(SamplerRun::mixed(s.clone(), &a, &b, switch, line(), 0).validate().is_err(), "{switch}");
        }
        assert!(SamplerRun::mixed(s, &a, &b, 99, line(), 0).validate().is_ok());
    }

    #[test]
    fn unbiased_init_is_standard_normal() {
        let x: Tensor<f64> = init_state(&[1, 3, 60, 60], None, 0.0063, &mut seeded(3)).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.04 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }

    #[test]
    fn biased_init_mean_and_noiseless_limit() {
        let ab = (-5.0625f64).exp();
        let x: Tensor<f64> = init_state(&[1, 3, 60, 60], Some([1.0, 1.0, 1.0]), ab, &mut seeded(4)).unwrap();
        assert!((x.mean() - 0.079_56).abs() < 0.04);
        let exact = biased_init(Tensor::<f64>::zeros([1, 3, 2, 2]), Some([1.0, -0.5, 0.0]), ab).unwrap();
        let r = ab.sqrt();
        assert_eq!(&exact.data()[..4], &[r; 4]);
        assert_eq!(&exact.data()[4..8], &[-0.5 * r; 4]);
        assert_eq!(&exact.data()[8..], &[0.0; 4]);
        assert!(biased_init(Tensor::<f64>::zeros([1, 3, 2, 2]), Some([1.5, 0.0, 0.0]), ab).is_err());
    }

    #[test]
    fn predictor_collapses_to_rescaling_without_noise() {
        let s = Schedule::new(50, 2.25).unwrap();
        let x0 = Tensor::from_fn([1, 3, 2, 2], |i| i as f64 / 6.0 - 1.0);
        let eps = Tensor::zeros([1, 3, 2, 2]);
        for t in [1, 2, 25, 50] {
            let x_t = x0.map(|v| v * s.alpha_bar(t).sqrt());
            let prev = predictor_update(&x_t, &eps, &s, t, None).unwrap();
            for ((p, x), o) in prev.data().iter().zip(x_t.data()).zip(x0.data()) {
                assert_eq!(*p, x / s.alpha(t).sqrt());
                assert!((p - o * s.alpha_bar(t - 1).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corrector_scalar_oracle() {
        let x = Tensor::scalar(0.0f64);
        let (out, step) = corrector_update(&x, &Tensor::scalar(2.0), &Tensor::scalar(1.0), 0.9, 0.5).unwrap().unwrap();
        assert!((step - 0.45).abs() < 1e-12);
        let drift = -0.45 * 2.0 / 0.5f64.sqrt();
        assert!((drift + 1.272_792_206).abs() < 1e-8);
        assert!((out.data()[0] - (drift + 0.9f64.sqrt())).abs() < 1e-12);
        assert!(corrector_update(&x, &Tensor::scalar(0.0), &Tensor::scalar(1.0), 0.9, 0.5).unwrap().is_none());
    }

    #[test]
    fn score_relation() {
        assert_eq!(score(&Tensor::scalar(0.5f64), 0.75).data(), &[-1.0]);
    }

    #[test]
    fn mask_blend_cases() {
        let x = Tensor::from_fn([2, 3, 1, 2], |i| i as f64 * 0.1 - 0.5);
        let rgb = Tensor::full([3, 1, 2], 1.0f64);
        let none = MaskedTarget::new(rgb.clone(), Tensor::zeros([1, 1, 2])).unwrap();
        assert_eq!(apply_mask(&x, &none).unwrap(), x);
        let all = MaskedTarget::new(rgb.clone(), Tensor::full([1, 1, 2], 1.0)).unwrap();
        assert!(apply_mask(&x, &all).unwrap().data().iter().all(|&v| v == 1.0));
        let half = MaskedTarget::new(rgb.clone(), Tensor::full([1, 1, 2], 0.5)).unwrap();
        let zero = Tensor::zeros([1, 3, 1, 2]);
        assert!(apply_mask(&zero, &half).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(MaskedTarget::new(rgb.clone(), Tensor::full([1, 1, 2], 1.5)).is_err());
        assert!(MaskedTarget::new(rgb, Tensor::full([1, 2, 2], 1.0)).is_err());
    }

    #[test]
    fn without_corrector_matches_hand_rolled_predictor_loop() {
        let model = tiny(7);
        let s = Schedule::new(12, 2.25).unwrap();
        let run = SamplerRun::new(s.clone(), &model, line(), 99);
        let out = run.sample(3).unwrap();

        let mut rng = rng::stream(99, 3);
        let mut x: Tensor<f64> = init_state(&[1, 3, 8, 8], None, s.final_alpha_bar(), &mut rng).unwrap();
        for t in (1..=12).rev() {
            let eps = model.predict_eps(&x, s.alpha_bar(t), &line()).unwrap();
            let z = (t > 1).then(|| standard_normal([1, 3, 8, 8], &mut rng));
            x = predictor_update(&x, &eps, &s, t, z.as_ref()).unwrap();
        }
        let x = x.map(|v| v.clamp(-1.0, 1.0));
        assert_eq!(out, x);
    }

    #[test]
    fn deterministic_in_seed_and_index() {
        let model = tiny(2);
        let mut run = SamplerRun::new(Schedule::new(8, 2.25).unwrap(), &model, line(), 5);
        run.corrector_steps = 1;
        let a = run.sample_many(3).unwrap();
        assert_eq!(a, run.sample_many(3).unwrap());
        assert_eq!(a[1], run.sample(1).unwrap());
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|x| x.data().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn mask_holds_at_every_iteration() {
        let model = tiny(3);
        let mut run = SamplerRun::new(Schedule::new(10, 2.25).unwrap(), &model, line(), 1);
        let rgb = Tensor::from_fn([3, 8, 8], |i| (i % 7) as f64 / 3.5 - 1.0);
        let alpha = Tensor::from_fn([1, 8, 8], |i| if i < 24 { 1.0 } else { 0.0 });
        run.mask = Some(MaskedTarget::new(rgb.clone(), alpha).unwrap());
        run.corrector_steps = 2;
        let mut seen = Vec::new();
        let out = run
            .sample_observed(0, &mut |e| {
                seen.push(e.t);
                for c in 0..3 {
                    for p in 0..24 {
                        assert_eq!(e.x_t.data()[c * 64 + p], rgb.data()[c * 64 + p]);
                    }
                }
                assert_eq!(e.correctors_applied + e.correctors_skipped, 2);
            })
            .unwrap();
        assert_eq!(seen, (1..=10).rev().collect::<Vec<_>>());
        for c in 0..3 {
            for p in 0..24 {
                assert_eq!(out.data()[c * 64 + p], rgb.data()[c * 64 + p]);
            }
        }
    }

    #[test]
    fn zero_model_sampling_stays_finite_and_in_range() {
        let model = DenoiserModel::<f64>::zeroed(tiny(0).config().clone()).unwrap();
        let out = SamplerRun::new(Schedule::new(20, 2.25).unwrap(), &model, line(), 8).sample(0).unwrap();
        assert!(out.all_finite());
        assert!(out.data().iter().all(|v| v.abs() <= 1.0));
    }
}
