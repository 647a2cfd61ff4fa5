//! Raw numeric kernels over flat row-major buffers.
//!
//! Each output element is produced by exactly one sequential loop with a
//! fixed summation order, so results do not depend on the thread count.

use std::borrow::Cow;

use crate::autodiff::Element;
use crate::par;

/// Dot product with eight fixed partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = E::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `dst += k * src`
#[inline]
pub(crate) fn axpy<E: Element>(dst: &mut [E], k: E, src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `c += a · b` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
///
/// Both operands are copied into zero-padded panels (`MR` rows of `a`
/// interleaved, `NR` columns of `b` contiguous) and multiplied in
/// register-sized tiles. Every element of `c` accumulates its `k` products
/// one at a time in increasing `k`, the same order as a plain triple loop.
fn gemm_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let blocks = m.div_ceil(MR);
    let mut apack = vec![E::zero(); blocks * k * MR];
    for (blk, panel) in apack.chunks_exact_mut(k * MR).enumerate() {
        for r in 0..MR.min(m - blk * MR) {
            let row = &a[(blk * MR + r) * k..][..k];
            for (p, &v) in row.iter().enumerate() {
                panel[p * MR + r] = v;
            }
        }
    }
    let mut bpack = vec![E::zero(); k * NR];
    for j in (0..n).step_by(NR) {
        let nr = NR.min(n - j);
        for (p, dst) in bpack.chunks_exact_mut(NR).enumerate() {
            dst[..nr].copy_from_slice(&b[p * n + j..][..nr]);
        }
        for (blk, panel) in apack.chunks_exact(k * MR).enumerate() {
            let i = blk * MR;
            let mr = MR.min(m - i);
            let mut acc = [[E::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate().take(mr) {
                row[..nr].copy_from_slice(&c[(i + r) * n + j..][..nr]);
            }
            for p in 0..k {
                let av: &[E; MR] = panel[p * MR..][..MR].try_into().expect("panel row");
                let bv: &[E; NR] = bpack[p * NR..][..NR].try_into().expect("panel row");
                for r in 0..MR {
                    for l in 0..NR {
                        acc[r][l] = acc[r][l] + av[r] * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate().take(mr) {
                c[(i + r) * n + j..][..nr].copy_from_slice(&row[..nr]);
            }
        }
    }
}

fn transpose<E: Element>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub(crate) fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    par::for_each_chunk(&mut c, n, |i, row| {
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    });
    c
}

/// `dC · Bᵀ`
pub(crate) fn matmul_grad_lhs<E: Element>(
    dc: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut da = vec![E::zero(); m * k];
    par::for_each_chunk(&mut da, k, |i, row| {
        let dci = &dc[i * n..(i + 1) * n];
        for (p, v) in row.iter_mut().enumerate() {
            *v = dot(dci, &b[p * n..(p + 1) * n]);
        }
    });
    da
}

/// `Aᵀ · dC`
pub(crate) fn matmul_grad_rhs<E: Element>(
    a: &[E],
    dc: &[E],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<E> {
    let mut db = vec![E::zero(); k * n];
    par::for_each_chunk(&mut db, n, |p, row| {
        for i in 0..m {
            axpy(row, a[i * k + p], &dc[i * n..(i + 1) * n]);
        }
    });
    db
}

/// Output extent of a sliding window along one axis, `None` if it does not fit.
pub fn window_output(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
    fn in_plane(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column for kernel column `kx`
/// lies inside the image (stride 1 only).
fn valid_span(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).min(g.out_w);
    let hi = (g.in_w + g.padding).saturating_sub(kx).min(g.out_w).max(lo);
    (lo, hi)
}

/// Unfolds one image into a `[in_ch*kh*kw, out_h*out_w]` patch matrix.
fn im2col<E: Element>(img: &[E], g: &ConvGeometry, cols: &mut [E]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &img[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kx);
                        dst[..lo].fill(E::zero());
                        dst[hi..].fill(E::zero());
                        dst[lo..hi].copy_from_slice(&src[lo + kx - g.padding..hi + kx - g.padding]);
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulates patch gradients back onto the image.
fn col2im<E: Element>(cols: &[E], g: &ConvGeometry, img: &mut [E]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kx);
                        let src = &row[oy * g.out_w..][lo..hi];
                        for (d, &v) in dst[lo + kx - g.padding..hi + kx - g.padding]
                            .iter_mut()
                            .zip(src)
                        {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn all_cols<'a, E: Element>(x: &'a [E], g: &ConvGeometry) -> Cow<'a, [E]> {
    if g.is_pointwise() {
        return Cow::Borrowed(x);
    }
    let per = g.patch() * g.positions();
    let mut cols = vec![E::zero(); g.batch * per];
    par::for_each_chunk(&mut cols, per, |b, chunk| {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, chunk)
    });
    Cow::Owned(cols)
}

/// Direct cross-correlation (no kernel flip), NCHW layout.
pub(crate) fn conv2d_forward<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    g: &ConvGeometry,
) -> Vec<E> {
    let (k, p) = (g.patch(), g.positions());
    let cols = all_cols(x, g);
    let mut out = vec![E::zero(); g.batch * g.out_ch * p];
    par::for_each_chunk(&mut out, g.out_ch * p, |b, ob| {
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_mut(p).zip(bias) {
                row.fill(bv);
            }
        }
        gemm_acc(ob, w, &cols[b * k * p..(b + 1) * k * p], g.out_ch, k, p);
    });
    out
}

pub(crate) fn conv2d_grad_input<E: Element>(dout: &[E], w: &[E], g: &ConvGeometry) -> Vec<E> {
    let (k, p) = (g.patch(), g.positions());
    let mut wt = vec![E::zero(); k * g.out_ch];
    for oc in 0..g.out_ch {
        for kk in 0..k {
            wt[kk * g.out_ch + oc] = w[oc * k + kk];
        }
    }
    let mut dx = vec![E::zero(); g.batch * g.in_plane()];
    par::for_each_chunk(&mut dx, g.in_plane(), |b, dxb| {
        let db = &dout[b * g.out_ch * p..(b + 1) * g.out_ch * p];
        if g.is_pointwise() {
            gemm_acc(dxb, &wt, db, k, g.out_ch, p);
        } else {
            let mut dcols = vec![E::zero(); k * p];
            gemm_acc(&mut dcols, &wt, db, k, g.out_ch, p);
            col2im(&dcols, g, dxb);
        }
    });
    dx
}

/// Weight gradient. Each image contributes `cols · doutᵀ`, summed over
/// positions in order; image contributions are then added in batch order.
pub(crate) fn conv2d_grad_weight<E: Element>(x: &[E], dout: &[E], g: &ConvGeometry) -> Vec<E> {
    let (k, p) = (g.patch(), g.positions());
    let cols = all_cols(x, g);
    let per_image = par::map_range(g.batch, |b| {
        let mut part = vec![E::zero(); k * g.out_ch];
        let dt = transpose(&dout[b * g.out_ch * p..(b + 1) * g.out_ch * p], g.out_ch, p);
        gemm_acc(
            &mut part,
            &cols[b * k * p..(b + 1) * k * p],
            &dt,
            k,
            p,
            g.out_ch,
        );
        part
    });
    let mut dwt = vec![E::zero(); k * g.out_ch];
    for part in per_image {
        for (d, v) in dwt.iter_mut().zip(part) {
            *d = *d + v;
        }
    }
    transpose(&dwt, k, g.out_ch)
}

pub(crate) fn conv2d_grad_bias<E: Element>(dout: &[E], g: &ConvGeometry) -> Vec<E> {
    let p = g.positions();
    let mut db = vec![E::zero(); g.out_ch];
    for b in 0..g.batch {
        for (oc, v) in db.iter_mut().enumerate() {
            let s: E = dout[(b * g.out_ch + oc) * p..][..p].iter().copied().sum();
            *v = *v + s;
        }
    }
    db
}

pub(crate) struct BatchNormOut<E> {
    pub y: Vec<E>,
    pub xhat: Vec<E>,
    pub inv_std: Vec<E>,
    pub mean: Vec<E>,
    /// Biased (population) variance of the batch.
    pub var: Vec<E>,
}

/// Normalizes each channel of `[b, c, plane]` data. With `stats = None` the
/// batch statistics are used, otherwise the supplied `(mean, var)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    b: usize,
    c: usize,
    plane: usize,
    eps: E,
    stats: Option<(&[E], &[E])>,
) -> BatchNormOut<E> {
    let count = (b * plane) as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((m, v)) => (
            m.iter().map(|v| v.as_f64()).collect(),
            v.iter().map(|v| v.as_f64()).collect(),
        ),
        None => (0..c)
            .map(|ch| {
                let rows = || {
                    (0..b).flat_map(move |n| {
                        x[(n * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| v.as_f64())
                    })
                };
                let mu = rows().sum::<f64>() / count;
                let var = rows().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
                (mu, var)
            })
            .unzip(),
    };
    let eps = eps.as_f64();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![E::zero(); x.len()];
    let mut y = vec![E::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let (g, bt) = (gamma[ch].as_f64(), beta[ch].as_f64());
            for i in off..off + plane {
                let h = (x[i].as_f64() - mean[ch]) * inv_std[ch];
                xhat[i] = E::of_f64(h);
                y[i] = E::of_f64(g * h + bt);
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(E::of_f64).collect::<Vec<E>>();
    let (mean, var, inv_std) = (narrow(mean), narrow(var), narrow(inv_std));
    BatchNormOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<E: Element>(
    dy: &[E],
    xhat: &[E],
    inv_std: &[E],
    gamma: &[E],
    b: usize,
    c: usize,
    plane: usize,
    batch_stats: bool,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let count = (b * plane) as f64;
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            for (&d, &h) in dy[off..off + plane].iter().zip(&xhat[off..off + plane]) {
                dgamma[ch] += d.as_f64() * h.as_f64();
                dbeta[ch] += d.as_f64();
            }
        }
    }
    let mut dx = vec![E::zero(); dy.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let scale = gamma[ch].as_f64() * inv_std[ch].as_f64();
            let (mean_dy, mean_dyh) = (dbeta[ch] / count, dgamma[ch] / count);
            for i in off..off + plane {
                let d = dy[i].as_f64();
                dx[i] = E::of_f64(if batch_stats {
                    scale * (d - mean_dy - xhat[i].as_f64() * mean_dyh)
                } else {
                    scale * d
                });
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(E::of_f64).collect::<Vec<E>>();
    let (dgamma, dbeta) = (narrow(dgamma), narrow(dbeta));
    (dx, dgamma, dbeta)
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per
/// output element, the flat input index it was taken from (first maximum in
/// row-major window order).
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward<E: Element>(
    x: &[E],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> (Vec<E>, Vec<usize>) {
    let mut out = vec![E::zero(); planes * out_h * out_w];
    let mut argmax = vec![0usize; out.len()];
    for pl in 0..planes {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best: Option<(E, usize)> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (pl * h + iy as usize) * w + ix as usize;
                        if best.is_none_or(|(v, _)| x[idx] > v) {
                            best = Some((x[idx], idx));
                        }
                    }
                }
                let (v, idx) = best.expect("every window overlaps the input");
                let o = (pl * out_h + oy) * out_w + ox;
                out[o] = v;
                argmax[o] = idx;
            }
        }
    }
    (out, argmax)
}
