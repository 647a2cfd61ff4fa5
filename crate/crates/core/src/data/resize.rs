use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bilinear resampling of a `[c, h, w]` image with half-pixel centers:
/// output pixel `i` samples source coordinate `(i + 0.5)·in/out − 0.5`,
/// clamped to the valid range. Every output is a convex combination of
/// inputs, so the value range never grows.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] < 2 || s[2] < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidGeometry(format!(
            "cannot resize {s:?} to {out_h}x{out_w}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                let v = top + fy * (bot - top);
                // Guard against rounding just outside the bracketing samples.
                let lo = plane[y0 * w + x0]
                    .min(plane[y0 * w + x1])
                    .min(plane[y1 * w + x0])
                    .min(plane[y1 * w + x1]);
                let hi = plane[y0 * w + x0]
                    .max(plane[y0 * w + x1])
                    .max(plane[y1 * w + x0])
                    .max(plane[y1 * w + x1]);
                out.push(v.clamp(lo, hi));
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}
