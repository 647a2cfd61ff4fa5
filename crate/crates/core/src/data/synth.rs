//! Procedural iris-like corpus: each class is a textured annulus on a dark
//! background with its own radial frequency, angular frequency and phase.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::LabeledImage;
use crate::autodiff::Tensor;
use crate::rng;

pub const NOISE_SIGMA: f64 = 0.05;
pub const CENTER_JITTER: f64 = 3.0;
/// Inner and outer ring radius as fractions of the shorter image side.
pub const INNER_RADIUS: f64 = 0.14;
pub const OUTER_RADIUS: f64 = 0.34;
const BACKGROUND: f64 = 0.08;
const PUPIL: f64 = 0.02;

/// Texture parameters of one class: the ring intensity follows
/// `0.5 + 0.4·cos(2π·radial·ρ + angular·θ + phase)` with `ρ ∈ [0, 1]` across the ring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSignature {
    pub radial: u32,
    pub angular: i32,
    pub phase: f64,
}

/// Low-frequency `(radial, angular)` pairs; every pair appears with four phases.
const FREQUENCIES: [(u32, i32); 10] = [
    (0, 1),
    (1, 0),
    (0, 2),
    (1, 1),
    (0, 3),
    (1, -1),
    (1, 2),
    (1, -2),
    (1, 3),
    (1, -3),
];

/// Number of distinct signatures available; class indices wrap beyond it.
pub const SIGNATURE_COUNT: usize = 4 * FREQUENCIES.len();

/// Signature of global class index `class`.
///
/// Classes cycle through the frequency pairs first and then step the phase
/// by a quarter turn, so any ten consecutive classes have distinct
/// frequencies and same-frequency classes differ in phase by at least π/2.
pub fn signature(class: usize) -> ClassSignature {
    let class = class % SIGNATURE_COUNT;
    let (radial, angular) = FREQUENCIES[class % FREQUENCIES.len()];
    ClassSignature {
        radial,
        angular,
        phase: 0.5 * PI * (class / FREQUENCIES.len()) as f64,
    }
}

/// Where the annulus of a generated image lies, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingGeometry {
    pub center_y: f64,
    pub center_x: f64,
    pub inner: f64,
    pub outer: f64,
}

impl RingGeometry {
    /// Whether the axis-aligned box `[top, top+h) × [left, left+w)` touches the annulus.
    pub fn intersects_box(&self, top: usize, left: usize, h: usize, w: usize) -> bool {
        let (y0, y1) = (top as f64, (top + h) as f64);
        let (x0, x1) = (left as f64, (left + w) as f64);
        let cy = self.center_y.clamp(y0, y1);
        let cx = self.center_x.clamp(x0, x1);
        let near = ((cy - self.center_y).powi(2) + (cx - self.center_x).powi(2)).sqrt();
        let far = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
            .iter()
            .map(|&(y, x)| ((y - self.center_y).powi(2) + (x - self.center_x).powi(2)).sqrt())
            .fold(0.0, f64::max);
        near <= self.outer && far >= self.inner
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthParams {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Global index of the first class; corpora with non-overlapping index
    /// ranges have disjoint signatures (up to [`SIGNATURE_COUNT`]).
    pub class_offset: usize,
}

impl SynthParams {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            height: size,
            width: size,
            seed,
            class_offset: 0,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.class_offset = offset;
        self
    }
}

fn render(params: &SynthParams, class: usize, index: usize) -> (LabeledImage, RingGeometry) {
    let (h, w) = (params.height, params.width);
    let sig = signature(params.class_offset + class);
    let mut rng = rng::stream(
        params.seed,
        "synth",
        (class * params.per_class + index) as u64,
    );
    let side = h.min(w) as f64;
    let geom = RingGeometry {
        center_y: h as f64 / 2.0 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
        center_x: w as f64 / 2.0 + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
        inner: INNER_RADIUS * side,
        outer: OUTER_RADIUS * side,
    };
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - geom.center_y;
            let dx = x as f64 + 0.5 - geom.center_x;
            let r = (dy * dy + dx * dx).sqrt();
            let base = if r < geom.inner {
                PUPIL
            } else if r <= geom.outer {
                let rho = (r - geom.inner) / (geom.outer - geom.inner);
                let theta = dy.atan2(dx);
                let arg =
                    2.0 * PI * sig.radial as f64 * rho + sig.angular as f64 * theta + sig.phase;
                0.5 + 0.4 * arg.cos()
            } else {
                BACKGROUND
            };
            for c in 0..3 {
                let v = base + noise.sample(&mut rng);
                data[c * plane + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let image = LabeledImage {
        pixels: Tensor::from_vec(&[3, h, w], data).expect("shape"),
        class_id: class,
        source_path: format!(
            "synth/class_{:03}/img_{index:03}.ppm",
            params.class_offset + class
        ),
    };
    (image, geom)
}

/// Generates `classes × per_class` images (class-major order) with their ring geometry.
pub fn synth_corpus_with_geometry(params: &SynthParams) -> Vec<(LabeledImage, RingGeometry)> {
    let total = params.classes * params.per_class;
    crate::par::map_range(total, |i| {
        render(params, i / params.per_class, i % params.per_class)
    })
}

pub fn synth_corpus(
    classes: usize,
    per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<LabeledImage> {
    let params = SynthParams {
        classes,
        per_class,
        height: h,
        width: w,
        seed,
        class_offset: 0,
    };
    synth_corpus_with_geometry(&params)
        .into_iter()
        .map(|(img, _)| img)
        .collect()
}
