use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::{extract_line, simplify_stub, write_image, DatasetManifest, ImageBuffer, Split, DEFAULT_DILATION_RADIUS};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Three fill shades. The shades of [`RED`] and [`BLUE`] have equal luma
/// pairwise, so one layout yields the same line drawing in either palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Palette {
    pub name: &'static str,
    pub shades: [[u8; 3]; 3],
}

pub const RED: Palette = Palette { name: "red", shades: [[184, 0, 0], [254, 13, 13], [255, 55, 55]] };
pub const BLUE: Palette = Palette { name: "blue", shades: [[10, 40, 252], [43, 73, 255], [77, 107, 255]] };

const BACKGROUND: [u8; 3] = [255, 255, 255];
const LINE_THRESHOLD: u8 = 240;

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Polygon(Vec<(f64, f64)>),
}

/// Shapes in unit coordinates, painted back to front.
#[derive(Clone, Debug)]
struct Layout {
    shapes: Vec<(Shape, usize)>,
}

impl Layout {
    fn draw(rng: &mut Rng) -> Self {
        let count = rng.random_range(2..=4);
        let shapes = (0..count)
            .map(|_| {
                let shade = rng.random_range(0..3);
                let cx = rng.random_range(0.25..0.75);
                let cy = rng.random_range(0.25..0.75);
                let shape = if rng.random_bool(0.5) {
                    Shape::Ellipse { cx, cy, rx: rng.random_range(0.12..0.35), ry: rng.random_range(0.12..0.35) }
                } else {
                    let corners = rng.random_range(3..=5);
                    let mut angles: Vec<f64> = (0..corners).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                    angles.sort_by(f64::total_cmp);
                    Shape::Polygon(
                        angles
                            .into_iter()
                            .map(|a| {
                                let r = rng.random_range(0.15..0.35);
                                (cx + r * a.cos(), cy + r * a.sin())
                            })
                            .collect(),
                    )
                };
                (shape, shade)
            })
            .collect();
        Self { shapes }
    }

    fn render(&self, resolution: usize, palette: &Palette) -> ImageBuffer {
        let mut img = ImageBuffer::filled(resolution, resolution, &BACKGROUND).expect("three channels");
        let s = resolution as f64;
        for y in 0..resolution {
            for x in 0..resolution {
                let (px, py) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
                for (shape, shade) in &self.shapes {
                    if shape.contains(px, py) {
                        img.pixel_mut(x, y).copy_from_slice(&palette.shades[*shade]);
                    }
                }
            }
        }
        img
    }
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Polygon(points) => {
                let mut inside = false;
                let mut j = points.len() - 1;
                for i in 0..points.len() {
                    let (xi, yi) = points[i];
                    let (xj, yj) = points[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

/// Renders layout `layout` of `seed` in `palette`.
pub fn render_figure(resolution: usize, palette: &Palette, seed: u64, layout: u64) -> ImageBuffer {
    Layout::draw(&mut rng::stream(seed, layout)).render(resolution, palette)
}

/// Writes `count` colour/line pairs plus `manifest.tsv` into `dir`.
///
/// Image `i` uses layout `i / palettes.len()` painted with palette
/// `i % palettes.len()`, so consecutive images share a line drawing and
/// differ only in colour. Lines are binarized. Paths in the returned
/// manifest are relative to `dir`, as written.
pub fn generate_synthetic(dir: &Path, count: usize, resolution: usize, seed: u64, palettes: &[Palette]) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution must be at least 1"));
    }
    if palettes.is_empty() {
        return Err(Error::invalid("at least one palette is required"));
    }
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::with_capacity(count);
    for i in 0..count {
        let palette = &palettes[i % palettes.len()];
        let color = render_figure(resolution, palette, seed, (i / palettes.len()) as u64);
        let line = simplify_stub(&extract_line(&color, DEFAULT_DILATION_RADIUS)?, Some(LINE_THRESHOLD));
        let color_name = PathBuf::from(format!("color_{i:04}.png"));
        let line_name = PathBuf::from(format!("line_{i:04}.png"));
        write_image(&color, &dir.join(&color_name))?;
        write_image(&line, &dir.join(&line_name))?;
        pairs.push((color_name, line_name));
    }
    let manifest = DatasetManifest { resolution, split: Split::Train, pairs };
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
