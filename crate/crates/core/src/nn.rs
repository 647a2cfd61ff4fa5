//! Layer primitives recorded on a [`Graph`]: convolution, batch
//! normalization, pooling, dense layers, softmax and cross-entropy.

use crate::autodiff::{Element, Graph, Op, Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution weights `[out_ch, in_ch, kh, kw]` with optional `[out_ch]` bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

/// Batch-norm affine parameters plus running statistics.
///
/// In training mode the running statistics are updated in place as
/// `new = (1 − momentum)·old + momentum·batch`, using the unbiased batch
/// variance; the forward pass itself normalizes by the biased variance.
#[derive(Clone, Debug)]
pub struct BatchNormParams<E = f32> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
}

impl<E: Element> BatchNormParams<E> {
    pub fn new(gamma: Var, beta: Var, channels: usize, training: bool) -> Self {
        Self {
            gamma,
            beta,
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            training,
        }
    }
}

/// Statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Biased variance (divides by the element count).
    pub var: Vec<E>,
    pub count: usize,
}

impl<E: Element> BatchStats<E> {
    pub fn unbiased_var(&self) -> Vec<E> {
        let k = if self.count > 1 {
            E::of_f64(self.count as f64 / (self.count - 1) as f64)
        } else {
            E::one()
        };
        self.var.iter().map(|&v| v * k).collect()
    }
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape)
        .map_err(|_| Error::ShapeMismatch(format!("{what} expects [b, c, h, w], got {shape:?}")))
}

impl<E: Element> Graph<E> {
    /// 2-D cross-correlation with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "conv2d input")?;
        let [oc, ic, kh, kw] = rank4(self.shape(weight), "conv2d weight")?;
        if ic != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight expects {ic} input channels, input has {c}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [oc] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias {:?} for {oc} output channels",
                    self.shape(bv)
                )));
            }
        }
        let geometry_err = || {
            Error::InvalidGeometry(format!(
                "{kh}x{kw} kernel, stride {stride}, padding {padding} on a {h}x{w} input"
            ))
        };
        let out_h = kernels::window_output(h, kh, stride, padding).ok_or_else(geometry_err)?;
        let out_w = kernels::window_output(w, kw, stride, padding).ok_or_else(geometry_err)?;
        let geom = ConvGeometry {
            batch: b,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: oc,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let out = Tensor::from_vec(&[b, oc, out_h, out_w], data)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w: weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `[b, c, h, w]` data followed by `gamma·x̂ + beta`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned; otherwise the given `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[E], &[E])>,
    ) -> Result<(Var, Option<BatchStats<E>>)> {
        let [b, c, h, w] = rank4(self.shape(x), "batch_norm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm affine parameters must be [{c}]"
            )));
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "batch_norm running statistics must have {c} entries"
                )));
            }
        } else if b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        let plane = h * w;
        let res = kernels::batchnorm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            b,
            c,
            plane,
            E::of_f64(eps),
            running,
        );
        let batch_stats = running.is_none();
        let stats = batch_stats.then(|| BatchStats {
            mean: res.mean.clone(),
            var: res.var.clone(),
            count: b * plane,
        });
        let out = Tensor::from_vec(&[b, c, h, w], res.y)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: res.xhat,
                inv_std: res.inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Max pooling with `-inf` padding; gradient routes to the first maximum.
    pub fn maxpool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "maxpool2d input")?;
        let geometry_err = || {
            Error::InvalidGeometry(format!(
                "{kernel}x{kernel} pool, stride {stride}, padding {padding} on a {h}x{w} input"
            ))
        };
        if 2 * padding > kernel {
            return Err(geometry_err());
        }
        let out_h = kernels::window_output(h, kernel, stride, padding).ok_or_else(geometry_err)?;
        let out_w = kernels::window_output(w, kernel, stride, padding).ok_or_else(geometry_err)?;
        let (data, argmax) = kernels::maxpool_forward(
            self.value(x).data(),
            b * c,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        );
        let out = Tensor::from_vec(&[b, c, out_h, out_w], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean of each channel plane: `[b, c, h, w] → [b, c]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "global_avgpool input")?;
        let plane = h * w;
        let inv = E::one() / E::of_f64(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<E>() * inv)
            .collect();
        let out = Tensor::from_vec(&[b, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `x·W + bias` for `x: [b, d]`, `W: [d, n]`, `bias: [n]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Row-wise softmax of `[b, n]` logits, computed after subtracting the row max.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax expects [b, n], got {s:?}"
            )));
        }
        let data = softmax_rows(self.value(logits).data(), s[1]);
        let out = Tensor::from_vec(&s, data)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(out, Op::Softmax(logits), rg))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy of logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let n = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let data = self.value(logits).data();
        let mut total = E::zero();
        for (row, &label) in data.chunks(n).zip(labels) {
            total = total + (log_sum_exp(row) - row[label]);
        }
        let loss = total / E::of_f64(labels.len() as f64);
        let probs = softmax_rows(data, n);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }
}

pub fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    let s: E = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub fn softmax_rows<E: Element>(data: &[E], n: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let m = row.iter().copied().fold(E::neg_infinity(), E::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let s: E = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// Records `conv2d` for a parameter bundle.
pub fn conv2d<E: Element>(g: &mut Graph<E>, x: Var, p: &Conv2dParams) -> Result<Var> {
    g.conv2d(x, p.weight, p.bias, p.stride, p.padding)
}

/// Records batch norm and, in training mode, updates the running statistics.
pub fn batchnorm<E: Element>(g: &mut Graph<E>, x: Var, p: &mut BatchNormParams<E>) -> Result<Var> {
    if p.training {
        let (y, stats) = g.batch_norm(x, p.gamma, p.beta, p.eps, None)?;
        let stats = stats.expect("training mode yields batch statistics");
        let m = E::of_f64(p.momentum);
        let keep = E::one() - m;
        for (r, &b) in p.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, b) in p.running_var.iter_mut().zip(stats.unbiased_var()) {
            *r = keep * *r + m * b;
        }
        Ok(y)
    } else {
        let (y, _) = g.batch_norm(
            x,
            p.gamma,
            p.beta,
            p.eps,
            Some((&p.running_mean, &p.running_var)),
        )?;
        Ok(y)
    }
}
