//! The conditional noise predictor `ε_θ(x_t, ᾱ, line)`.
//!
//! A U-Net style encoder reads only the line drawing. The decoder has its own
//! convolutional branch over `x_t`, upsamples with transposed convolutions and
//! modulates every upsampled feature map with FiLM scale/shift vectors computed
//! from a Fourier embedding of `ᾱ` passed through a 5-layer Mish perceptron.
//!
//! Channel width at level `i` is `C·2^i`; every spatial step is a stride-2
//! 3×3 convolution (down) or a stride-2 2×2 transposed convolution (up).

mod params;

use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::{Distribution, Normal, StandardNormal};

pub use params::{Bound, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::{ConvGeometry, Element, Tape, Tensor, Var};

pub const MLP_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Base channel width `C`.
    pub channels: usize,
    /// Number of down/up sampling levels.
    pub depth: usize,
    /// Fourier embedding dimension `D` (the embedding has `2D` entries).
    pub fourier_dim: usize,
    pub fourier_seed: u64,
    pub image_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            depth: 4,
            fourier_dim: 64,
            fourier_seed: 0,
            image_size: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("network channels must be at least 1"));
        }
        if self.fourier_dim == 0 {
            return Err(Error::invalid("fourier dimension must be at least 1"));
        }
        if self.depth > 16 {
            return Err(Error::invalid(format!("network depth {} is too large", self.depth)));
        }
        let factor = 1usize << self.depth;
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by 2^depth = {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    /// Width of the noise-level embedding fed to every FiLM layer.
    pub fn embedding_dim(&self) -> usize {
        4 * self.channels
    }
}

/// `[cos(2π·b·ᾱ), sin(2π·b·ᾱ)]`.
pub fn fourier_embed<T: Element>(alpha_bar: f64, b: &[T]) -> Vec<T> {
    let phases: Vec<f64> = b.iter().map(|&bi| 2.0 * PI * bi.to_f64().unwrap() * alpha_bar).collect();
    phases
        .iter()
        .map(|p| T::lit(p.cos()))
        .chain(phases.iter().map(|p| T::lit(p.sin())))
        .collect()
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    geometry: ConvGeometry,
}

impl Conv {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.geometry)
    }
}

#[derive(Clone, Debug)]
struct UpConv {
    weight: ParamId,
    bias: ParamId,
}

impl UpConv {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), ConvGeometry::new(2, 0))
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Produces per-channel scale and shift vectors from the noise-level embedding.
#[derive(Clone, Debug)]
pub struct Film {
    scale: Linear,
    shift: Linear,
}

impl Film {
    /// `scale(embedding) ⊙ features + shift(embedding)`, broadcast over space.
    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, features: Var, embedding: Var) -> Result<Var> {
        let scale = self.scale.apply(tape, p, embedding)?;
        let shift = self.shift.apply(tape, p, embedding)?;
        tape.channel_affine(features, scale, shift)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: UpConv,
    film: Film,
    merge: Conv,
}

/// Line-encoder activations, one tensor per level, finest first.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    levels: Vec<Arc<Tensor<T>>>,
}

impl<T: Element> EncoderFeatures<T> {
    pub fn levels(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.levels.iter().map(|t| &**t)
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    fourier: ParamId,
    mlp: Vec<Linear>,
    line_encoder: Vec<Vec<Conv>>,
    image_encoder: Vec<Conv>,
    bottleneck: Conv,
    decoder: Vec<DecoderLevel>,
    output: Conv,
}

enum Init {
    Random(Rng),
    Zero,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    init: &'a mut Init,
}

impl<T: Element> Builder<'_, T> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let tensor = match self.init {
            Init::Zero => Tensor::zeros(shape),
            Init::Random(rng) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
            }
        };
        self.params.add(name, tensor)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        let value = match self.init {
            Init::Zero => 0.0,
            Init::Random(_) => value,
        };
        self.params.add(name, Tensor::full(shape, T::lit(value)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, gain: f64) -> Conv {
        let fan_in = (cin * 9) as f64;
        Conv {
            weight: self.normal(format!("{name}.weight"), vec![cout, cin, 3, 3], gain / fan_in.sqrt()),
            bias: self.constant(format!("{name}.bias"), vec![cout], 0.0),
            geometry: ConvGeometry::new(stride, 1),
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> UpConv {
        // every output pixel of a stride-2 2×2 transposed conv sees one input pixel
        let fan_in = cin as f64;
        UpConv {
            weight: self.normal(format!("{name}.weight"), vec![cin, cout, 2, 2], (2.0 / fan_in).sqrt()),
            bias: self.constant(format!("{name}.bias"), vec![cout], 0.0),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64, bias: f64) -> Linear {
        Linear {
            weight: self.normal(format!("{name}.weight"), vec![dout, din], gain / (din as f64).sqrt()),
            bias: self.constant(format!("{name}.bias"), vec![dout], bias),
        }
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl<T: Element> DenoiserModel<T> {
    /// Fresh model with He-normal weights drawn from `rng`; the Fourier
    /// vector is drawn from `N(0, 1)` with `config.fourier_seed`.
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        let mut init = Init::Random(rng.clone());
        let model = Self::build(config, &mut init)?;
        if let Init::Random(advanced) = init {
            *rng = advanced;
        }
        Ok(model)
    }

    /// A model whose every parameter, including the Fourier vector, is zero.
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        Self::build(config, &mut Init::Zero)
    }

    fn build(config: NetworkConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut fourier_rng = seeded(config.fourier_seed);
        let b = match init {
            Init::Zero => Tensor::zeros([config.fourier_dim]),
            Init::Random(_) => Tensor::from_fn([config.fourier_dim], |_| {
                let v: f64 = StandardNormal.sample(&mut fourier_rng);
                T::lit(v)
            }),
        };
        let mut bld = Builder {
            params: ParamStore::new(),
            init,
        };
        let fourier = bld.params.add_frozen("fourier.b", b);

        let e = config.embedding_dim();
        let mlp = (0..MLP_LAYERS)
            .map(|i| {
                let din = if i == 0 { 2 * config.fourier_dim } else { e };
                let gain = if i + 1 == MLP_LAYERS { 1.0 } else { RELU_GAIN };
                bld.linear(&format!("mlp.{i}"), din, e, gain, 0.0)
            })
            .collect();

        let ch = |l| config.level_channels(l);
        let mut line_encoder = Vec::with_capacity(config.depth + 1);
        line_encoder.push(vec![bld.conv("line.0.a", 1, ch(0), 1, RELU_GAIN), bld.conv("line.0.b", ch(0), ch(0), 1, RELU_GAIN)]);
        for l in 1..=config.depth {
            line_encoder.push(vec![
                bld.conv(&format!("line.{l}.a"), ch(l - 1), ch(l), 2, RELU_GAIN),
                bld.conv(&format!("line.{l}.b"), ch(l), ch(l), 1, RELU_GAIN),
            ]);
        }

        let mut image_encoder = Vec::with_capacity(config.depth + 1);
        image_encoder.push(bld.conv("image.0", 3, ch(0), 1, RELU_GAIN));
        for l in 1..=config.depth {
            image_encoder.push(bld.conv(&format!("image.{l}"), ch(l - 1), ch(l), 2, RELU_GAIN));
        }

        let bottleneck = bld.conv("bottleneck", 2 * ch(config.depth), ch(config.depth), 1, RELU_GAIN);

        let mut decoder = Vec::with_capacity(config.depth);
        for l in (0..config.depth).rev() {
            decoder.push(DecoderLevel {
                up: bld.up(&format!("up.{l}"), ch(l + 1), ch(l)),
                film: Film {
                    scale: bld.linear(&format!("film.{l}.scale"), e, ch(l), 0.1, 1.0),
                    shift: bld.linear(&format!("film.{l}.shift"), e, ch(l), 0.1, 0.0),
                },
                merge: bld.conv(&format!("merge.{l}"), 3 * ch(l), ch(l), 1, RELU_GAIN),
            });
        }
        let output = bld.conv("output", ch(0), 3, 1, 1.0);

        Ok(Self {
            config,
            params: bld.params,
            fourier,
            mlp,
            line_encoder,
            image_encoder,
            bottleneck,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn fourier_vector(&self) -> &Tensor<T> {
        self.params.get(self.fourier)
    }

    /// Checks `x_t` (`[N,3,S,S]`) and an optional line batch (`[N,1,S,S]`).
    fn check_inputs(&self, x_t: &Tensor<T>, line: Option<&Tensor<T>>) -> Result<usize> {
        const OP: &str = "predict_eps";
        let (n, c, h, w) = x_t.dims4(OP)?;
        let s = self.config.image_size;
        if c != 3 {
            return Err(Error::ShapeMismatch { op: OP, axis: "x_t channels", expected: 3, actual: c });
        }
        if h != s || w != s {
            return Err(Error::shape(OP, format!("x_t resolution {h}x{w} does not match model resolution {s}x{s}")));
        }
        if let Some(line) = line {
            let (ln, lc, lh, lw) = line.dims4(OP)?;
            if lc != 1 {
                return Err(Error::ShapeMismatch { op: OP, axis: "line channels", expected: 1, actual: lc });
            }
            if lh != s || lw != s {
                return Err(Error::shape(OP, format!("line resolution {lh}x{lw} does not match model resolution {s}x{s}")));
            }
            if ln != n {
                return Err(Error::ShapeMismatch { op: OP, axis: "line batch", expected: n, actual: ln });
            }
        }
        Ok(n)
    }

    /// Noise-level embedding for each entry of `alpha_bars` (`[N,E]`).
    pub fn embed_on(&self, tape: &mut Tape<T>, p: &Bound, alpha_bars: &[f64]) -> Result<Var> {
        let b = self.fourier_vector().data();
        let d2 = 2 * self.config.fourier_dim;
        let mut gamma = Vec::with_capacity(alpha_bars.len() * d2);
        for &ab in alpha_bars {
            gamma.extend(fourier_embed(ab, b));
        }
        let gamma = tape.constant(Tensor::new([alpha_bars.len(), d2], gamma)?);
        self.mlp_on(tape, p, gamma)
    }

    /// The 5-layer perceptron, Mish after every layer but the last.
    pub fn mlp_on(&self, tape: &mut Tape<T>, p: &Bound, gamma: Var) -> Result<Var> {
        let mut h = gamma;
        for (i, layer) in self.mlp.iter().enumerate() {
            h = layer.apply(tape, p, h)?;
            if i + 1 < self.mlp.len() {
                h = tape.mish(h);
            }
        }
        Ok(h)
    }

    /// Runs the line encoder; returns one activation per level, finest first.
    pub fn encode_on(&self, tape: &mut Tape<T>, p: &Bound, line: Var) -> Result<Vec<Var>> {
        let mut levels = Vec::with_capacity(self.line_encoder.len());
        let mut h = line;
        for convs in &self.line_encoder {
            for conv in convs {
                h = conv.apply(tape, p, h)?;
                h = tape.mish(h);
            }
            levels.push(h);
        }
        Ok(levels)
    }

    /// Decoder pass. `alpha_bars` holds one entry shared by the batch or one per sample.
    pub fn decode_on(&self, tape: &mut Tape<T>, p: &Bound, x_t: Var, alpha_bars: &[f64], skips: &[Var]) -> Result<Var> {
        let n = tape.value(x_t).shape()[0];
        if alpha_bars.len() != 1 && alpha_bars.len() != n {
            return Err(Error::ShapeMismatch { op: "predict_eps", axis: "alpha_bar count", expected: n, actual: alpha_bars.len() });
        }
        if let Some(&bad) = alpha_bars.iter().find(|a| !(a.is_finite() && **a >= 0.0 && **a <= 1.0)) {
            return Err(Error::invalid(format!("alpha_bar {bad} outside [0, 1]")));
        }
        let embedding = self.embed_on(tape, p, alpha_bars)?;

        let mut image = Vec::with_capacity(self.image_encoder.len());
        let mut h = x_t;
        for conv in &self.image_encoder {
            h = conv.apply(tape, p, h)?;
            h = tape.mish(h);
            image.push(h);
        }

        let depth = self.config.depth;
        let joined = tape.concat(&[skips[depth], image[depth]])?;
        let mut h = self.bottleneck.apply(tape, p, joined)?;
        h = tape.mish(h);

        for (level, dec) in (0..depth).rev().zip(&self.decoder) {
            let up = dec.up.apply(tape, p, h)?;
            let up = dec.film.apply(tape, p, up, embedding)?;
            let up = tape.mish(up);
            let joined = tape.concat(&[up, skips[level], image[level]])?;
            h = dec.merge.apply(tape, p, joined)?;
            h = tape.mish(h);
        }
        self.output.apply(tape, p, h)
    }

    /// `ε_θ` on a tape, for training.
    pub fn forward_on(&self, tape: &mut Tape<T>, p: &Bound, x_t: Var, alpha_bars: &[f64], line: Var) -> Result<Var> {
        self.check_inputs(tape.value(x_t), Some(tape.value(line)))?;
        let skips = self.encode_on(tape, p, line)?;
        self.decode_on(tape, p, x_t, alpha_bars, &skips)
    }

    /// Predicts the noise in `x_t` (`[N,3,S,S]`) at noise level `alpha_bar`
    /// given the line drawing `line` (`[N,1,S,S]`).
    pub fn predict_eps(&self, x_t: &Tensor<T>, alpha_bar: f64, line: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(x_t, Some(line))?;
        let features = self.encode(line)?;
        self.predict_eps_cached(x_t, alpha_bar, &features)
    }

    /// Encoder activations for `line`; they do not depend on `x_t` or `ᾱ` and
    /// can be reused across every sampling step.
    pub fn encode(&self, line: &Tensor<T>) -> Result<EncoderFeatures<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let line = tape.constant(line.clone());
        let levels = self.encode_on(&mut tape, &p, line)?;
        Ok(EncoderFeatures {
            levels: levels.into_iter().map(|v| Arc::new(tape.value(v).clone())).collect(),
        })
    }

    pub fn predict_eps_cached(&self, x_t: &Tensor<T>, alpha_bar: f64, features: &EncoderFeatures<T>) -> Result<Tensor<T>> {
        let n = self.check_inputs(x_t, None)?;
        if features.batch() != n || features.levels.len() != self.config.depth + 1 {
            return Err(Error::ShapeMismatch { op: "predict_eps", axis: "encoder feature batch", expected: n, actual: features.batch() });
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let skips: Vec<Var> = features.levels.iter().map(|t| tape.leaf_shared(Arc::clone(t), false)).collect();
        let x = tape.constant(x_t.clone());
        let out = self.decode_on(&mut tape, &p, x, &[alpha_bar], &skips)?;
        Ok(tape.value(out).clone())
    }

    /// Noise-level embedding without a tape (`[N,E]`).
    pub fn embed(&self, alpha_bars: &[f64]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.embed_on(&mut tape, &p, alpha_bars)?;
        Ok(tape.value(out).clone())
    }

    /// Applies the FiLM layer of decoder level `level` without a tape.
    pub fn film(&self, level: usize, features: &Tensor<T>, embedding: &Tensor<T>) -> Result<Tensor<T>> {
        let dec = self
            .decoder
            .iter()
            .rev()
            .nth(level)
            .ok_or_else(|| Error::invalid(format!("no decoder level {level}")))?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let e = tape.constant(embedding.clone());
        let out = dec.film.apply(&mut tape, &p, f, e)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Element>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
            fourier: self.fourier,
            mlp: self.mlp.clone(),
            line_encoder: self.line_encoder.clone(),
            image_encoder: self.image_encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            output: self.output.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
