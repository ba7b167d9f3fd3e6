//! Epsilon-matching training.
//!
//! Each step draws one noise level per sample, `ᾱ = exp(−(λξ)²)`, noises the
//! clean colour image in closed form and regresses the added noise with an
//! L1 loss, then takes one Ranger step.

mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::network::{DenoiserModel, NetworkConfig};
use crate::rng::{self, standard_normal, Rng, RngState};
use crate::schedule::{noised, sample_alpha_bar, Schedule, DEFAULT_LAMBDA, DEFAULT_STEPS};
use crate::tensor::{Element, Tape, Tensor};

pub use optim::{clip_grad_norm, radam_step_size, OptimizerConfig, Ranger};

/// One training example: a colour image `[1,3,S,S]` and its line drawing `[1,1,S,S]`, both in `[−1,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub color: Tensor<T>,
    pub line: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lambda: f64,
    /// Sampling steps `T` recorded in checkpoints.
    pub steps: usize,
    /// Joint gradient norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lambda: DEFAULT_LAMBDA,
            steps: DEFAULT_STEPS,
            grad_clip: Some(1.0),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("grad_clip must be positive, got {c}")));
            }
        }
        Schedule::new(self.steps, self.lambda)?;
        self.optimizer.validate()
    }
}

/// A batch after the forward process: network input, condition and target.
#[derive(Clone, Debug)]
pub struct NoisedBatch<T> {
    pub x_t: Tensor<T>,
    pub line: Tensor<T>,
    pub eps: Tensor<T>,
    pub alpha_bars: Vec<f64>,
}

impl<T: Element> NoisedBatch<T> {
    /// Forms `x_t = √ᾱ x₀ + √(1−ᾱ) ε` for given noise levels and noise `[B,3,S,S]`.
    pub fn new(pairs: &[&Pair<T>], alpha_bars: Vec<f64>, eps: Tensor<T>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        if alpha_bars.len() != pairs.len() {
            return Err(Error::ShapeMismatch { op: "noise_batch", axis: "alpha_bar count", expected: pairs.len(), actual: alpha_bars.len() });
        }
        let colors: Vec<Tensor<T>> = pairs.iter().map(|p| p.color.clone()).collect();
        let lines: Vec<Tensor<T>> = pairs.iter().map(|p| p.line.clone()).collect();
        let x0 = Tensor::stack_batch(&colors)?;
        x0.expect_same_shape(&eps, "noise_batch")?;
        let mut items = Vec::with_capacity(pairs.len());
        for (i, &ab) in alpha_bars.iter().enumerate() {
            items.push(noised(&x0.batch_item(i)?, ab, &eps.batch_item(i)?)?);
        }
        Ok(Self {
            x_t: Tensor::stack_batch(&items)?,
            line: Tensor::stack_batch(&lines)?,
            eps,
            alpha_bars,
        })
    }

    /// Draws `ᾱ` then `ε` for each sample in order.
    pub fn draw(pairs: &[&Pair<T>], lambda: f64, rng: &mut Rng) -> Result<Self> {
        let mut alpha_bars = Vec::with_capacity(pairs.len());
        let mut eps = Vec::with_capacity(pairs.len());
        for p in pairs {
            alpha_bars.push(sample_alpha_bar(lambda, rng));
            eps.push(standard_normal(p.color.shape().to_vec(), rng));
        }
        if pairs.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        Self::new(pairs, alpha_bars, Tensor::stack_batch(&eps)?)
    }

    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }

    pub fn mean_alpha_bar(&self) -> f64 {
        self.alpha_bars.iter().sum::<f64>() / self.alpha_bars.len() as f64
    }
}

/// Mean absolute error between `ε` and `ε_θ(x_t, ᾱ, line)`, with the gradient
/// of every model parameter.
pub fn loss_and_grads<T: Element>(model: &DenoiserModel<T>, batch: &NoisedBatch<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let x = tape.constant(batch.x_t.clone());
    let line = tape.constant(batch.line.clone());
    let target = tape.constant(batch.eps.clone());
    let pred = model.forward_on(&mut tape, &p, x, &batch.alpha_bars, line)?;
    let loss = tape.l1_loss(pred, target)?;
    let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    let mut grads = tape.backward(loss)?;
    Ok((value, model.params().collect_grads(&p, &mut grads)))
}

/// Loss without gradients, for validation.
pub fn batch_loss<T: Element>(model: &DenoiserModel<T>, batch: &NoisedBatch<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let x = tape.constant(batch.x_t.clone());
    let line = tape.constant(batch.line.clone());
    let target = tape.constant(batch.eps.clone());
    let pred = model.forward_on(&mut tape, &p, x, &batch.alpha_bars, line)?;
    let loss = tape.l1_loss(pred, target)?;
    Ok(tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub mean_alpha_bar: f64,
}

/// Stream of the run seed that initializes weights in [`TrainState::from_seed`].
pub const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: DenoiserModel<T>,
    config: TrainConfig,
    optimizer: Ranger<T>,
    seed: u64,
    rng: Rng,
    history: Vec<LossRecord>,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: DenoiserModel<T>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = Ranger::new(config.optimizer.clone(), model.params())?;
        Ok(Self {
            model,
            config,
            optimizer,
            seed,
            rng: rng::seeded(seed),
            history: Vec::new(),
        })
    }

    /// Fresh weights drawn from stream [`INIT_STREAM`] of `seed`.
    pub fn from_seed(network: NetworkConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        let model = DenoiserModel::new(network, &mut rng::stream(seed, INIT_STREAM))?;
        Self::new(model, config, seed)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Ranger<T> {
        &self.optimizer
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    /// Indices of the next batch, drawn without replacement from the state's stream.
    pub fn next_batch(&mut self, dataset_len: usize) -> Vec<usize> {
        let n = self.config.batch_size.min(dataset_len);
        rand::seq::index::sample(&mut self.rng, dataset_len, n).into_vec()
    }

    /// One optimizer step on `batch`. Returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&Pair<T>]) -> Result<f64> {
        let noised = NoisedBatch::draw(batch, self.config.lambda, &mut self.rng)?;
        self.apply(&noised)
    }

    /// One optimizer step on an already noised batch.
    pub fn apply(&mut self, batch: &NoisedBatch<T>) -> Result<f64> {
        let (loss, mut grads) = loss_and_grads(&self.model, batch)?;
        let step = self.step() + 1;
        if !loss.is_finite() || !grads.iter().all(|g| g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step} with alpha_bar {:?}",
                batch.alpha_bars
            )));
        }
        if let Some(limit) = self.config.grad_clip {
            clip_grad_norm(&mut grads, limit);
        }
        self.optimizer.step(self.model.params_mut(), &grads)?;
        self.history.push(LossRecord { step, loss, mean_alpha_bar: batch.mean_alpha_bar() });
        Ok(loss)
    }

    /// Mean loss over `data` in fixed order with noise from a dedicated stream,
    /// so values are comparable across calls.
    pub fn validation_loss(&self, data: &[Pair<T>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        let mut rng = rng::stream(self.seed, VALIDATION_STREAM);
        let mut total = 0.0;
        for chunk in data.chunks(self.config.batch_size) {
            let refs: Vec<&Pair<T>> = chunk.iter().collect();
            let batch = NoisedBatch::draw(&refs, self.config.lambda, &mut rng)?;
            total += batch_loss(&self.model, &batch)? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }
}

const VALIDATION_STREAM: u64 = 1;

impl TrainState<f32> {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.config.steps, self.config.lambda)
    }

    /// Model weights plus everything needed to continue training bit-for-bit.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_model(&self.model, &self.schedule()?, self.step());
        let o = &self.config.optimizer;
        ckpt.set_meta("train.seed", self.seed);
        ckpt.set_meta("train.batch_size", self.config.batch_size);
        ckpt.set_meta("train.grad_clip", self.config.grad_clip.unwrap_or(0.0));
        ckpt.set_meta("opt.learning_rate", o.learning_rate);
        ckpt.set_meta("opt.lookahead_alpha", o.lookahead_alpha);
        ckpt.set_meta("opt.lookahead_k", o.lookahead_k);
        ckpt.set_meta("opt.n_sma_threshold", o.n_sma_threshold);
        ckpt.set_meta("opt.beta1", o.beta1);
        ckpt.set_meta("opt.beta2", o.beta2);
        ckpt.set_meta("opt.eps", o.eps);
        ckpt.set_meta("opt.weight_decay", o.weight_decay);
        let state = RngState::capture(&self.rng);
        let seed_hex = state.seed.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        ckpt.set_meta("rng.seed", seed_hex);
        ckpt.set_meta("rng.stream", state.stream);
        ckpt.set_meta("rng.word_pos", state.word_pos);

        let names: Vec<String> = self.model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (prefix, buffers) in [
            ("opt.m.", self.optimizer.exp_avg()),
            ("opt.v.", self.optimizer.exp_avg_sq()),
            ("opt.slow.", self.optimizer.slow()),
        ] {
            for (name, t) in names.iter().zip(buffers) {
                ckpt.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        Ok(ckpt)
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.to_model()?;
        let clip: f64 = ckpt.meta("train.grad_clip")?;
        let optimizer = OptimizerConfig {
            learning_rate: ckpt.meta("opt.learning_rate")?,
            lookahead_alpha: ckpt.meta("opt.lookahead_alpha")?,
            lookahead_k: ckpt.meta("opt.lookahead_k")?,
            n_sma_threshold: ckpt.meta("opt.n_sma_threshold")?,
            beta1: ckpt.meta("opt.beta1")?,
            beta2: ckpt.meta("opt.beta2")?,
            eps: ckpt.meta("opt.eps")?,
            weight_decay: ckpt.meta("opt.weight_decay")?,
        };
        let config = TrainConfig {
            batch_size: ckpt.meta("train.batch_size")?,
            lambda: ckpt.meta("lambda")?,
            steps: ckpt.meta("T")?,
            grad_clip: (clip > 0.0).then_some(clip),
            optimizer: optimizer.clone(),
        };
        config.validate()?;

        let hex: String = ckpt.meta("rng.seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(Error::format("checkpoint", "rng.seed must have 64 hex digits"));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::format("checkpoint", "rng.seed is not hexadecimal"))?;
        }
        let rng = RngState { seed, stream: ckpt.meta("rng.stream")?, word_pos: ckpt.meta("rng.word_pos")? }.restore();

        let buffers = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            model
                .params()
                .iter()
                .map(|(name, _)| {
                    ckpt.tensor(&format!("{prefix}{name}"))
                        .cloned()
                        .ok_or_else(|| Error::format("checkpoint", format!("missing optimizer tensor {prefix}{name}")))
                })
                .collect()
        };
        let optimizer = Ranger::from_parts(optimizer, ckpt.meta("step")?, buffers("opt.m.")?, buffers("opt.v.")?, buffers("opt.slow.")?)?;
        Ok(Self {
            model,
            config,
            optimizer,
            seed: ckpt.meta("train.seed")?,
            rng,
            history: Vec::new(),
        })
    }
}

/// Budget and outputs of a [`train`] run.
#[derive(Clone, Debug, Default)]
pub struct TrainPlan {
    pub epochs: usize,
    /// Stops early once the optimizer reaches this many steps.
    pub max_steps: Option<u64>,
    /// Directory for `last.gpic`, `best.gpic`, `loss.jsonl` and `val.jsonl`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_run: usize,
    pub best_score: Option<f64>,
}

/// Runs whole epochs of `ceil(len / batch_size)` steps. After each epoch the
/// state is checkpointed and scored on `val` (or on the epoch's mean training
/// loss when `val` is empty); the best-scoring weights go to `best.gpic`.
pub fn train(state: &mut TrainState<f32>, data: &[Pair<f32>], val: &[Pair<f32>], plan: &TrainPlan) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let out = plan.out_dir.as_deref();
    if let Some(dir) = out {
        state.to_checkpoint()?.save(&dir.join("last.gpic"))?;
    }
    let steps_per_epoch = data.len().div_ceil(state.config.batch_size);
    let mut best: Option<f64> = None;
    let mut val_log = String::new();
    let mut epochs_run = 0;
    for epoch in 0..plan.epochs {
        if plan.max_steps.is_some_and(|m| state.step() >= m) {
            break;
        }
        let first = state.history.len();
        for _ in 0..steps_per_epoch {
            if plan.max_steps.is_some_and(|m| state.step() >= m) {
                break;
            }
            let idx = state.next_batch(data.len());
            let batch: Vec<&Pair<f32>> = idx.iter().map(|&i| &data[i]).collect();
            state.train_step(&batch)?;
        }
        epochs_run += 1;
        let recent = &state.history[first..];
        let score = if val.is_empty() {
            recent.iter().map(|r| r.loss).sum::<f64>() / recent.len().max(1) as f64
        } else {
            state.validation_loss(val)?
        };
        let _ = writeln!(val_log, "{{\"epoch\":{},\"step\":{},\"score\":{}}}", epoch + 1, state.step(), score);
        let improved = best.is_none_or(|b| score < b);
        if improved {
            best = Some(score);
        }
        if let Some(dir) = out {
            let ckpt = state.to_checkpoint()?;
            ckpt.save(&dir.join("last.gpic"))?;
            if improved {
                ckpt.save(&dir.join("best.gpic"))?;
            }
            write_logs(dir, state.history(), &val_log)?;
        }
    }
    if let Some(dir) = out {
        write_logs(dir, state.history(), &val_log)?;
    }
    Ok(TrainSummary { steps: state.step(), epochs_run, best_score: best })
}

/// One JSON object per optimizer step: `step`, `loss`, `mean_alpha_bar`.
pub fn format_loss_log(history: &[LossRecord]) -> String {
    let mut s = String::new();
    for r in history {
        let _ = writeln!(s, "{{\"step\":{},\"loss\":{},\"mean_alpha_bar\":{}}}", r.step, r.loss, r.mean_alpha_bar);
    }
    s
}

fn write_logs(dir: &Path, history: &[LossRecord], val_log: &str) -> Result<()> {
    fsutil::write_atomic(&dir.join("loss.jsonl"), format_loss_log(history).as_bytes())?;
    fsutil::write_atomic(&dir.join("val.jsonl"), val_log.as_bytes())
}
