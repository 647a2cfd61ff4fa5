//! Occlusion sensitivity: slide an N×N fill window over the image and record
//! how the true-class confidence and the predicted label react.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::data::pnm;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model};

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_STRIDE: usize = 16;

/// Occluded images evaluated per forward pass.
const SWEEP_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionConfig {
    pub window: usize,
    pub stride: usize,
    /// Written into raw `[0, 1]` pixels, before the model's input normalization.
    pub fill_value: f32,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            fill_value: 0.0,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window and stride must be positive (got {} and {})",
                self.window, self.stride
            )));
        }
        if self.window > h.min(w) {
            return Err(Error::Config(format!(
                "window {} does not fit a {h}×{w} image",
                self.window
            )));
        }
        Ok(())
    }
}

/// Number of window positions along an axis of length `dim`.
pub fn grid_dim(dim: usize, window: usize, stride: usize) -> usize {
    assert!(
        window >= 1 && stride >= 1 && window <= dim,
        "window must fit the axis"
    );
    (dim - window) / stride + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window: usize,
    pub stride: usize,
    /// Row-major `grid_h × grid_w`; true where occlusion changed the label away from the true class.
    pub flip: Vec<bool>,
    /// Row-major; unoccluded minus occluded true-class probability.
    pub confidence_drop: Vec<f32>,
    pub base_prediction: usize,
    /// True-class probability of the unoccluded image.
    pub base_confidence: f32,
}

impl SaliencyMap {
    pub fn flip_at(&self, r: usize, c: usize) -> bool {
        self.flip[r * self.grid_w + c]
    }

    pub fn drop_at(&self, r: usize, c: usize) -> f32 {
        self.confidence_drop[r * self.grid_w + c]
    }

    /// Pixel box `(top, left)` of grid cell `(r, c)`.
    pub fn window_origin(&self, r: usize, c: usize) -> (usize, usize) {
        (r * self.stride, c * self.stride)
    }
}

/// Copy of `img` with the window at `(top, left)` set to the fill value on every channel.
pub fn occlude(img: &Tensor, top: usize, left: usize, cfg: &OcclusionConfig) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a [c, h, w] image, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = cfg.window;
    if n == 0 || top + n > h || left + n > w {
        return Err(Error::WindowOutOfBounds {
            top,
            left,
            size: n,
            h,
            w,
        });
    }
    let mut out = img.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in top..top + n {
            let row = (ch * h + y) * w;
            d[row + left..row + left + n].fill(cfg.fill_value);
        }
    }
    Ok(out)
}

/// Runs the occlusion sweep of `img` (already at the model's input size).
pub fn sweep(
    model: &Model,
    img: &Tensor,
    true_class: usize,
    cfg: &OcclusionConfig,
) -> Result<SaliencyMap> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a [c, h, w] image, got {s:?}"
        )));
    }
    let classes = model.classes();
    if true_class >= classes {
        return Err(Error::LabelOutOfRange {
            label: true_class,
            classes,
        });
    }
    let (h, w) = (s[1], s[2]);
    cfg.validate(h, w)?;
    let grid_h = grid_dim(h, cfg.window, cfg.stride);
    let grid_w = grid_dim(w, cfg.window, cfg.stride);

    let base = model.probabilities(&Tensor::stack(&[img])?)?;
    let base_prediction = argmax_rows(base.data(), classes)[0];
    let base_confidence = base.data()[true_class];

    let cells = grid_h * grid_w;
    let chunks = cells.div_ceil(SWEEP_CHUNK);
    let parts = crate::par::try_map_range(chunks, |k| {
        let range = k * SWEEP_CHUNK..((k + 1) * SWEEP_CHUNK).min(cells);
        let occluded = range
            .map(|cell| {
                occlude(
                    img,
                    (cell / grid_w) * cfg.stride,
                    (cell % grid_w) * cfg.stride,
                    cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = occluded.iter().collect();
        let probs = model.probabilities(&Tensor::stack(&refs)?)?;
        let preds = argmax_rows(probs.data(), classes);
        Ok(preds
            .into_iter()
            .zip(probs.data().chunks(classes))
            .map(|(p, row)| (p != true_class, base_confidence - row[true_class]))
            .collect::<Vec<_>>())
    })?;
    let (flip, confidence_drop) = parts.into_iter().flatten().unzip();
    Ok(SaliencyMap {
        grid_h,
        grid_w,
        window: cfg.window,
        stride: cfg.stride,
        flip,
        confidence_drop,
        base_prediction,
        base_confidence,
    })
}

/// `%g`-style formatting with six significant digits.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    let fixed = format!("{v:.decimals$}");
    if fixed.contains('.') {
        fixed
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        fixed
    }
}

pub fn drop_csv(map: &SaliencyMap) -> String {
    grid_csv(map, |i| format_g6(map.confidence_drop[i] as f64))
}

pub fn flip_csv(map: &SaliencyMap) -> String {
    grid_csv(map, |i| if map.flip[i] { "1".into() } else { "0".into() })
}

fn grid_csv(map: &SaliencyMap, cell: impl Fn(usize) -> String) -> String {
    let mut out = String::new();
    for r in 0..map.grid_h {
        for c in 0..map.grid_w {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&cell(r * map.grid_w + c));
        }
        out.push('\n');
    }
    out
}

/// Per-pixel mean confidence drop over the windows covering each pixel;
/// `None` where no window reaches.
pub fn pixel_mean_drop(map: &SaliencyMap, h: usize, w: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0f64; h * w];
    let mut count = vec![0u32; h * w];
    for r in 0..map.grid_h {
        for c in 0..map.grid_w {
            let (top, left) = map.window_origin(r, c);
            let d = map.drop_at(r, c) as f64;
            for y in top..(top + map.window).min(h) {
                for x in left..(left + map.window).min(w) {
                    sum[y * w + x] += d;
                    count[y * w + x] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &k)| (k > 0).then(|| s / k as f64))
        .collect()
}

/// 8-bit overlay: mean drop min-max rescaled so the largest drop is black
/// and the smallest white. Uncovered pixels and flat maps are white.
pub fn overlay(map: &SaliencyMap, h: usize, w: usize) -> Vec<u8> {
    let means = pixel_mean_drop(map, h, w);
    let (lo, hi) = means
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
            (lo.min(m), hi.max(m))
        });
    means
        .iter()
        .map(|m| match m {
            Some(m) if hi > lo => (255.0 * (1.0 - (m - lo) / (hi - lo))).round() as u8,
            _ => 255,
        })
        .collect()
}

/// Paths written by [`export_map`] for a prefix.
pub fn export_paths(prefix: &Path) -> [PathBuf; 3] {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    [with("_drop.csv"), with("_flip.csv"), with("_overlay.pgm")]
}

/// Writes `<prefix>_drop.csv`, `<prefix>_flip.csv` and `<prefix>_overlay.pgm`.
pub fn export_map(map: &SaliencyMap, img: &Tensor, prefix: &Path) -> Result<[PathBuf; 3]> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if (map.grid_h - 1) * map.stride + map.window > h
        || (map.grid_w - 1) * map.stride + map.window > w
    {
        return Err(Error::ShapeMismatch(format!(
            "{}×{} map does not fit a {h}×{w} image",
            map.grid_h, map.grid_w
        )));
    }
    let paths = export_paths(prefix);
    let pgm = pnm::encode_pgm(w, h, &overlay(map, h, w));
    let (drops, flips) = (drop_csv(map), flip_csv(map));
    let contents: [&[u8]; 3] = [drops.as_bytes(), flips.as_bytes(), &pgm];
    for (path, bytes) in paths.iter().zip(contents) {
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(paths)
}

/// One-line summary used in logs.
pub fn describe(map: &SaliencyMap) -> String {
    let flips = map.flip.iter().filter(|&&f| f).count();
    let mut s = String::new();
    let _ = write!(
        s,
        "{}x{} grid, base class {} ({:.4}), {flips} flips, max drop {}",
        map.grid_h,
        map.grid_w,
        map.base_prediction,
        map.base_confidence,
        format_g6(
            map.confidence_drop
                .iter()
                .fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64
        )
    );
    s
}
