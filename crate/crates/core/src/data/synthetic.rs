//! Procedural handwritten-glyph stand-in.
//!
//! Every class is a random polyline skeleton (two strokes of 2-4 segments)
//! turned by a class-specific multiple of 90 degrees. Samples of a class
//! differ by a random shift, scale and per-vertex wobble (all proportional to
//! `jitter`) and by additive Gaussian pixel noise with std `noise`. Pixels are
//! quantised to multiples of 1/255 so a dataset survives an IDX round trip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Side length in pixels.
    pub size: usize,
    pub seed: u64,
    pub noise: f64,
    pub jitter: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            classes: 25,
            per_class: 40,
            size: 32,
            seed: 0,
            noise: 0.05,
            jitter: 1.0,
        }
    }
}

type Point = (f64, f64);

const STROKE_HALF_WIDTH: f64 = 0.045;
const MAX_SHIFT: f64 = 0.06;
const MAX_SCALE: f64 = 0.08;
const MAX_WOBBLE: f64 = 0.025;

fn skeleton(rng: &mut ChaCha8Rng, quarter_turns: usize) -> Vec<Vec<Point>> {
    let strokes = 2;
    (0..strokes)
        .map(|_| {
            let verts = rng.random_range(3..=5);
            (0..verts)
                .map(|_| {
                    let mut p = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
                    for _ in 0..quarter_turns {
                        p = (1.0 - p.1, p.0);
                    }
                    p
                })
                .collect()
        })
        .collect()
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn render(strokes: &[Vec<Point>], size: usize) -> Vec<f64> {
    let px = 1.0 / size as f64;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = ((c as f64 + 0.5) * px, (r as f64 + 0.5) * px);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            out[r * size + c] = (1.0 - (d - STROKE_HALF_WIDTH) / px).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn gen_synthetic_glyphs(cfg: &GlyphConfig) -> Result<Dataset> {
    if cfg.size < 16 {
        return Err(Error::Config(format!("glyph size must be >= 16, got {}", cfg.size)));
    }
    if cfg.classes == 0 || cfg.per_class == 0 {
        return Err(Error::Config("need at least one class and one sample per class".into()));
    }
    if cfg.classes > 256 {
        return Err(Error::Config("at most 256 classes (IDX labels are bytes)".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.jitter >= 0.0) {
        return Err(Error::Config("noise and jitter must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let skeletons: Vec<_> = (0..cfg.classes).map(|k| skeleton(&mut rng, k % 4)).collect();

    let mut images = Vec::with_capacity(cfg.classes * cfg.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (class, skel) in skeletons.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let j = cfg.jitter;
            let shift = (
                rng.random_range(-1.0..1.0) * MAX_SHIFT * j,
                rng.random_range(-1.0..1.0) * MAX_SHIFT * j,
            );
            let scale = 1.0 + rng.random_range(-1.0..1.0) * MAX_SCALE * j;
            let strokes: Vec<Vec<Point>> = skel
                .iter()
                .map(|stroke| {
                    stroke
                        .iter()
                        .map(|&(x, y)| {
                            let wx = rng.random_range(-1.0..1.0) * MAX_WOBBLE * j;
                            let wy = rng.random_range(-1.0..1.0) * MAX_WOBBLE * j;
                            (
                                0.5 + (x - 0.5) * scale + shift.0 + wx,
                                0.5 + (y - 0.5) * scale + shift.1 + wy,
                            )
                        })
                        .collect()
                })
                .collect();
            let mut pixels = render(&strokes, cfg.size);
            for v in pixels.iter_mut() {
                let noisy = *v + cfg.noise * normal.sample(&mut rng);
                *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
            images.push(Tensor::new(vec![cfg.size, cfg.size, 1], pixels)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, None)
}
