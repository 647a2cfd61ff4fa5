//! Naive convolution oracle in f64 and the exhaustive small-geometry grid.

use irisnet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct cross-correlation with explicit loops, accumulated in f64.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    [b, c, h, wd]: [usize; 4],
    [oc, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0f64; b * oc * oh * ow];
    for n in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o] as f64);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x[((n * c + ci) * h + iy as usize) * wd + ix as usize] as f64;
                                let wv = w[((o * c + ci) * kh + ky) * kw + kx] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_engine(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    xs: [usize; 4],
    [oc, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
) -> Tensor {
    let mut g = Graph::<f32>::new();
    let xv = g.leaf(Tensor::from_vec(&xs, x.to_vec()).unwrap());
    let wv = g.leaf(Tensor::from_vec(&[oc, xs[1], kh, kw], w.to_vec()).unwrap());
    let bv = bias.map(|b| g.leaf(Tensor::from_vec(&[oc], b.to_vec()).unwrap()));
    let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
    g.value(y).clone()
}

/// Runs every geometry with kernel sides in {1, 3}, stride in {1, 2}, padding
/// in {0, 1} and input sides 4..=7, with and without bias. Returns the
/// number of cases and the largest absolute deviation from the oracle.
pub fn exhaustive_grid() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut uniform =
        |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let mut cases = 0;
    let mut worst = 0f64;
    for kh in [1, 3] {
        for kw in [1, 3] {
            for stride in [1, 2] {
                for pad in [0, 1] {
                    for h in 4..=7 {
                        for wd in 4..=7 {
                            let xs = [2, 2, h, wd];
                            let ks = [3, kh, kw];
                            let x = uniform(xs.iter().product());
                            let w = uniform(3 * 2 * kh * kw);
                            let b = uniform(3);
                            for bias in [None, Some(b.as_slice())] {
                                let got = conv_engine(&x, &w, bias, xs, ks, stride, pad);
                                let (want, oh, ow) = conv_oracle(&x, &w, bias, xs, ks, stride, pad);
                                assert_eq!(got.shape(), &[2, 3, oh, ow]);
                                for (&a, &e) in got.data().iter().zip(&want) {
                                    worst = worst.max((a as f64 - e).abs());
                                }
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (cases, worst)
}
