use rand::Rng as _;

use super::LabeledImage;
use crate::autodiff::Tensor;
use crate::rng::Rng;

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const CROP_PADDING: usize = 8;
pub const BRIGHTNESS_RANGE: f32 = 0.1;

/// Which label-preserving transforms [`augment`] may apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentPolicy {
    /// Mirror left-right with probability 0.5.
    pub horizontal_flip: bool,
    /// Zero-pad by 8 pixels and crop back to the original size at a random offset.
    pub random_crop: bool,
    /// Add a uniform offset in `[-0.1, 0.1]` to every pixel.
    pub brightness: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            horizontal_flip: true,
            random_crop: true,
            brightness: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.horizontal_flip || self.random_crop || self.brightness)
    }

    /// Parses a comma-separated list of `flip`, `crop`, `brightness`, or `none`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut p = Self::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "flip" => p.horizontal_flip = true,
                "crop" => p.random_crop = true,
                "brightness" => p.brightness = true,
                "none" => {}
                _ => return None,
            }
        }
        Some(p)
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.horizontal_flip {
            parts.push("flip");
        }
        if self.random_crop {
            parts.push("crop");
        }
        if self.brightness {
            parts.push("brightness");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

pub fn hflip(img: &Tensor) -> Tensor {
    let w = img.shape()[2];
    let data = img
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::from_vec(img.shape(), data).expect("same shape")
}

/// Shifts the window by `(dy, dx)` over a zero-padded copy of the image.
pub fn shifted_crop(img: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = vec![0f32; d.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = d[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::from_vec(img.shape(), out).expect("same shape")
}

pub fn shift_brightness(img: &Tensor, delta: f32) -> Tensor {
    let data = img
        .data()
        .iter()
        .map(|&v| (v + delta).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(img.shape(), data).expect("same shape")
}

/// Applies the enabled transforms in the order flip, crop, brightness.
/// Draws from `rng` only for enabled transforms.
pub fn augment(img: &LabeledImage, policy: &AugmentPolicy, rng: &mut Rng) -> LabeledImage {
    let mut pixels = img.pixels.clone();
    if policy.horizontal_flip && rng.random_bool(FLIP_PROBABILITY) {
        pixels = hflip(&pixels);
    }
    if policy.random_crop {
        let dy = rng.random_range(0..=2 * CROP_PADDING);
        let dx = rng.random_range(0..=2 * CROP_PADDING);
        pixels = shifted_crop(&pixels, CROP_PADDING, dy, dx);
    }
    if policy.brightness {
        let delta = rng.random_range(-BRIGHTNESS_RANGE..=BRIGHTNESS_RANGE);
        pixels = shift_brightness(&pixels, delta);
    }
    LabeledImage {
        pixels,
        class_id: img.class_id,
        source_path: img.source_path.clone(),
    }
}
