//! Browser demo: synthetic figures, their line drawings, and the forward
//! noising process along the schedule.
//!
//! Every export returns RGBA bytes (or plain numbers) ready for a canvas.
//! Out-of-range arguments are clamped rather than rejected so sliders can
//! never raise an exception.

use gpic_core::dataprep::{extract_line, render_figure, simplify_stub, ImageBuffer, BLUE, RED};
use gpic_core::rng::{standard_normal, stream};
use gpic_core::schedule::{noised, Schedule};
use gpic_core::Tensor;
use wasm_bindgen::prelude::*;

const MAX_RESOLUTION: u32 = 256;
const MAX_RADIUS: u32 = 8;
const BINARY_THRESHOLD: u8 = 240;

fn figure_buffer(resolution: u32, palette: u32, seed: u32, layout: u32) -> ImageBuffer {
    let palette = if palette.is_multiple_of(2) { RED } else { BLUE };
    render_figure(resolution.clamp(1, MAX_RESOLUTION) as usize, &palette, seed as u64, layout as u64)
}

fn rgba(img: &ImageBuffer) -> Vec<u8> {
    let rgb = img.to_rgb();
    rgb.data().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// A synthetic figure; even `palette` is red, odd is blue.
#[wasm_bindgen]
pub fn figure(resolution: u32, palette: u32, seed: u32, layout: u32) -> Vec<u8> {
    rgba(&figure_buffer(resolution, palette, seed, layout))
}

/// The line drawing of [`figure`] at dilation radius `radius`.
#[wasm_bindgen]
pub fn line_drawing(resolution: u32, palette: u32, seed: u32, layout: u32, radius: u32, binarize: bool) -> Vec<u8> {
    let img = figure_buffer(resolution, palette, seed, layout);
    let line = extract_line(&img, radius.min(MAX_RADIUS) as usize).expect("figures are never empty");
    rgba(&simplify_stub(&line, binarize.then_some(BINARY_THRESHOLD)))
}

/// `ᾱ_t` for `t = 1..=steps`.
#[wasm_bindgen]
pub fn alpha_bar_curve(steps: u32, lambda: f64) -> Vec<f64> {
    match Schedule::new(steps.max(1) as usize, lambda.clamp(0.01, 10.0)) {
        Ok(s) => (1..=s.steps()).map(|t| s.alpha_bar(t)).collect(),
        Err(_) => Vec::new(),
    }
}

/// [`figure`] noised to step `t` of a `steps`-step schedule, clipped for display.
#[wasm_bindgen]
pub fn noised_figure(resolution: u32, palette: u32, seed: u32, layout: u32, t: u32, steps: u32, lambda: f64, noise_seed: u32) -> Vec<u8> {
    let img = figure_buffer(resolution, palette, seed, layout);
    let curve = alpha_bar_curve(steps, lambda);
    let alpha_bar = match t.min(curve.len() as u32) {
        0 => 1.0,
        t => curve[t as usize - 1],
    };
    let x0: Tensor<f32> = img.to_tensor();
    let eps = standard_normal(x0.shape().to_vec(), &mut stream(noise_seed as u64, 0));
    let xt = noised(&x0, alpha_bar, &eps).expect("same shape");
    rgba(&ImageBuffer::from_tensor(&xt).expect("[1,3,H,W]"))
}
