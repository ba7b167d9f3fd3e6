//! Pairwise perceptual distance between generated images.
//!
//! `d(a, b) = Σ_l 1/(H_l·W_l) Σ_{h,w} ‖w_l ⊙ (ŷ_l(a) − ŷ_l(b))‖²`, where
//! `ŷ_l` are layer activations, optionally scaled to unit length along the
//! channel axis at every pixel.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::DenoiserModel;
use crate::rng::seeded;
use crate::tensor::{kernels, ConvGeometry, Tensor};

const NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    /// The image itself is the only layer; no normalization.
    Identity,
    /// Frozen random convolutions drawn from a seed.
    RandomConv { seed: u64 },
    /// The image branch of a trained denoiser.
    Trained,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    layers: Vec<Layer>,
    /// Per-layer channel weights `w_l`.
    channel_weights: Vec<Vec<f64>>,
    normalize: bool,
}

impl FeatureExtractor {
    pub fn identity() -> Self {
        Self { kind: ExtractorKind::Identity, layers: Vec::new(), channel_weights: vec![vec![1.0; 3]], normalize: false }
    }

    /// Three 3×3 convolutions (3→16 stride 1, 16→32 stride 2, 32→32 stride 2)
    /// with He-normal weights, each followed by mish.
    pub fn random_conv(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let spec = [(3, 16, 1), (16, 32, 2), (32, 32, 2)];
        let layers: Vec<Layer> = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let dist = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt()).expect("finite std");
                Layer {
                    weight: Tensor::from_fn([cout, cin, 3, 3], |_| dist.sample(&mut rng) as f32),
                    bias: Tensor::zeros([cout]),
                    geometry: ConvGeometry::new(stride, 1),
                }
            })
            .collect();
        let channel_weights = spec.iter().map(|&(_, c, _)| vec![1.0; c]).collect();
        Self { kind: ExtractorKind::RandomConv { seed }, layers, channel_weights, normalize: true }
    }

    /// Uses the convolutions `image.0..=image.depth` of `model`, which see
    /// the colour image directly.
    pub fn trained(model: &DenoiserModel<f32>) -> Result<Self> {
        let p = model.params();
        let mut layers = Vec::new();
        for level in 0..=model.config().depth {
            let get = |suffix: &str| {
                let name = format!("image.{level}.{suffix}");
                p.index_of(&name)
                    .map(|i| p.tensor(i).clone())
                    .ok_or_else(|| Error::invalid(format!("model has no parameter {name}")))
            };
            layers.push(Layer {
                weight: get("weight")?,
                bias: get("bias")?,
                geometry: ConvGeometry::new(if level == 0 { 1 } else { 2 }, 1),
            });
        }
        let channel_weights = layers.iter().map(|l| vec![1.0; l.weight.shape()[0]]).collect();
        Ok(Self { kind: ExtractorKind::Trained, layers, channel_weights, normalize: true })
    }

    pub fn kind(&self) -> &ExtractorKind {
        &self.kind
    }

    pub fn layer_count(&self) -> usize {
        self.channel_weights.len()
    }

    /// Replaces `w_l` for every layer; lengths must match the channel counts.
    pub fn with_channel_weights(mut self, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != self.channel_weights.len() || weights.iter().zip(&self.channel_weights).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::invalid("channel weights do not match the extractor layers"));
        }
        self.channel_weights = weights;
        Ok(self)
    }

    /// Layer activations of a `[1,3,H,W]` or `[3,H,W]` image in `[−1,1]`.
    pub fn features(&self, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let x = match *image.shape() {
            [3, h, w] => image.reshape([1, 3, h, w])?,
            [1, 3, _, _] => image.clone(),
            _ => return Err(Error::shape("perceptual_distance", format!("expected one RGB image, got {:?}", image.shape()))),
        };
        if self.layers.is_empty() {
            return Ok(vec![x]);
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = kernels::conv2d(&h, &layer.weight, Some(&layer.bias), layer.geometry)?.map(kernels::mish);
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Distance between two feature stacks from [`FeatureExtractor::features`].
    pub fn feature_distance(&self, a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
        let mut total = 0.0;
        for ((fa, fb), w) in a.iter().zip(b).zip(&self.channel_weights) {
            fa.expect_same_shape(fb, "perceptual_distance")?;
            let (_, c, h, wd) = fa.dims4("perceptual_distance")?;
            let plane = h * wd;
            let (da, db) = (fa.data(), fb.data());
            let mut layer = 0.0;
            for p in 0..plane {
                let (na, nb) = if self.normalize {
                    let norm = |d: &[f32]| (0..c).map(|ch| (d[ch * plane + p] as f64).powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                    (norm(da), norm(db))
                } else {
                    (1.0, 1.0)
                };
                for (ch, wc) in w.iter().enumerate().take(c) {
                    let diff = da[ch * plane + p] as f64 / na - db[ch * plane + p] as f64 / nb;
                    layer += (wc * diff).powi(2);
                }
            }
            total += layer / plane as f64;
        }
        Ok(total)
    }
}

pub fn perceptual_distance(a: &Tensor<f32>, b: &Tensor<f32>, fx: &FeatureExtractor) -> Result<f64> {
    a.expect_same_shape(b, "perceptual_distance")?;
    fx.feature_distance(&fx.features(a)?, &fx.features(b)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    pub ids: Vec<String>,
    /// `(i, j, d)` for every `i < j`, in row-major order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// All `n(n−1)/2` distances plus an equal-width histogram on `[0, max]`.
pub fn pairwise_report(images: &[Tensor<f32>], fx: &FeatureExtractor, bins: usize) -> Result<DistanceReport> {
    if images.len() < 2 {
        return Err(Error::invalid(format!("need ≥ 2 images, got {}", images.len())));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let features = images.iter().map(|im| fx.features(im)).collect::<Result<Vec<_>>>()?;
    let n = images.len();
    let index: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let one = |&(i, j): &(usize, usize)| fx.feature_distance(&features[i], &features[j]).map(|d| (i, j, d));
    #[cfg(feature = "parallel")]
    let pairs = {
        use rayon::prelude::*;
        index.par_iter().map(one).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let pairs = index.iter().map(one).collect::<Result<Vec<_>>>()?;

    let count = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.2).sum::<f64>() / count;
    let std = (pairs.iter().map(|p| (p.2 - mean).powi(2)).sum::<f64>() / count).sqrt();
    let max = pairs.iter().map(|p| p.2).fold(0.0, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|k| hi * k as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for &(_, _, d) in &pairs {
        counts[((d / hi * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(DistanceReport { ids: (0..n).map(|i| i.to_string()).collect(), pairs, edges, counts, mean, std })
}

impl DistanceReport {
    /// Symmetric `n×n` matrix with a zero diagonal.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let n = self.ids.len();
        let mut m = vec![vec![0.0; n]; n];
        for &(i, j, d) in &self.pairs {
            m[i][j] = d;
            m[j][i] = d;
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,a,b,distance\n");
        for (k, &(i, j, d)) in self.pairs.iter().enumerate() {
            let _ = writeln!(s, "{k},{},{},{d}", self.ids[i], self.ids[j]);
        }
        s
    }

    pub fn histogram_table(&self) -> String {
        let mut s = format!("# pairs {}\n# mean {}\n# std {}\nlower\tupper\tcount\n", self.pairs.len(), self.mean, self.std);
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{c}", self.edges[k], self.edges[k + 1]);
        }
        s
    }

    /// Bar chart of the histogram.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 320.0, 40.0);
        let bar = (w - 2.0 * pad) / self.counts.len() as f64;
        let top = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
            y = h - pad,
            x2 = w - pad
        );
        for (k, &c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * c as f64 / top;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"steelblue\"><title>{:.4}-{:.4}: {c}</title></rect>",
                pad + k as f64 * bar,
                h - pad - bh,
                (bar - 1.0).max(0.5),
                self.edges[k],
                self.edges[k + 1]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{pad}\" y=\"{:.0}\" font-size=\"12\">0</text>\n<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\" text-anchor=\"end\">{:.4}</text>\n<text x=\"{:.0}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\">pairs {} mean {:.4} std {:.4}</text>\n</svg>",
            h - pad + 16.0,
            w - pad,
            h - pad + 16.0,
            self.edges.last().copied().unwrap_or(0.0),
            w / 2.0,
            self.pairs.len(),
            self.mean,
            self.std
        );
        s
    }
}
