use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};

/// A scalar-valued function that can be recorded at any element precision.
///
/// The analytic gradient is taken from the `f32` recording; the numerical
/// reference evaluates the same function in `f64`.
pub trait ScalarFn {
    fn eval<E: Element>(&self, g: &mut Graph<E>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a − g_n| / max(1e-8, |g_a| + |g_n|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    /// Coordinates where every tried step straddles a kink, so no central
    /// difference is trustworthy.
    pub unreliable: Vec<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    /// `max |g_a − g_n| / max |g_n|` over the reliable probed coordinates:
    /// error measured against the overall gradient scale.
    pub fn scale_rel_error(&self) -> f64 {
        let mut diff = 0f64;
        let mut scale = 0f64;
        for (i, (a, n)) in self.analytic.iter().zip(&self.numeric).enumerate() {
            for (j, (&a, &n)) in a.iter().zip(n).enumerate() {
                if n.is_nan() || self.unreliable.contains(&(i, j)) {
                    continue;
                }
                diff = diff.max((a - n).abs());
                scale = scale.max(n.abs());
            }
        }
        diff / scale.max(1e-8)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Retries at `h/10` and `h/100` before a coordinate is declared unreliable.
const RETRIES: usize = 3;

/// Central difference at `(input, index)` with step `h`, and whether it is
/// trustworthy. The curvature estimate `f(x+h) − 2f(x) + f(x−h)` scales
/// with `h²` for a smooth function; halving the step and comparing exposes
/// a slope jump (relu or maxpool kink) inside the stencil.
fn central<F: ScalarFn>(
    f: &F,
    shadow: &mut [Tensor<f64>],
    at: (usize, usize),
    base: f64,
    h: f64,
) -> Result<(f64, bool)> {
    let (i, j) = at;
    let orig = shadow[i].data()[j];
    let mut eval = |dx: f64| -> Result<f64> {
        shadow[i].data_mut()[j] = orig + dx;
        let v = eval_f64(f, shadow);
        shadow[i].data_mut()[j] = orig;
        v
    };
    let (p, m) = (eval(h)?, eval(-h)?);
    let (p2, m2) = (eval(h / 2.0)?, eval(-h / 2.0)?);
    let c = (p - m) / (2.0 * h);
    let bend = (p - 2.0 * base + m) / h;
    let bend_half = (p2 - 2.0 * base + m2) / (h / 2.0);
    let smooth = (bend - 2.0 * bend_half).abs() <= 1e-8 + 1e-6 * c.abs();
    Ok((c, smooth))
}

/// Like [`grad_check_report`] but only probes the listed `(input, flat index)`
/// coordinates; `numeric` holds `NaN` elsewhere.
pub fn grad_check_coords<F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f32>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    grad_check_coords_at::<f32, F>(f, inputs, h, coords)
}

/// [`grad_check_coords`] with the reverse-mode pass recorded at element type `A`.
///
/// With `A = f64` the engine's derivative rules are checked free of `f32`
/// storage rounding, which dominates coordinates many orders of magnitude
/// smaller than the largest gradient.
pub fn grad_check_coords_at<A: Element, F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f32>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::<A>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = f.eval(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();

    let mut shadow: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let base = eval_f64(f, &shadow)?;
    let mut numeric: Vec<Vec<f64>> = analytic.iter().map(|a| vec![f64::NAN; a.len()]).collect();
    let mut unreliable = Vec::new();
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for &(i, j) in coords {
        let mut step = h;
        let mut estimate = None;
        for _ in 0..RETRIES {
            let (c, smooth) = central(f, &mut shadow, (i, j), base, step)?;
            numeric[i][j] = c;
            if smooth {
                estimate = Some(c);
                break;
            }
            step /= 10.0;
        }
        let Some(c) = estimate else {
            unreliable.push((i, j));
            continue;
        };
        let err = rel_error(analytic[i][j], c);
        if err > max_rel_error {
            max_rel_error = err;
            worst = (i, j);
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        unreliable,
        analytic,
        numeric,
    })
}

/// Compares `f32` reverse-mode gradients against `f64` central differences
/// at every coordinate. Coordinates where no step avoids a kink are listed
/// in `unreliable` and left out of `max_rel_error`.
pub fn grad_check_report<F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f32>],
    h: f64,
) -> Result<GradCheckReport> {
    grad_check_report_at::<f32, F>(f, inputs, h)
}

/// [`grad_check_report`] with the reverse-mode pass recorded at element type `A`.
pub fn grad_check_report_at<A: Element, F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f32>],
    h: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_coords_at::<A, F>(f, inputs, h, &coords)
}

/// Maximum relative gradient error of `f` at `inputs`; see [`grad_check_report`].
pub fn grad_check<F: ScalarFn>(f: &F, inputs: &[Tensor<f32>], h: f64) -> Result<f64> {
    grad_check_report(f, inputs, h).map(|r| r.max_rel_error)
}
