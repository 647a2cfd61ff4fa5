//! Residual CNN classifiers built from a declarative [`ModelSpec`].

mod spec;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;

pub use spec::{BlockKind, ModelSpec, PoolSpec, ResidualBlockSpec, StageSpec, StemSpec};

use crate::autodiff::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchStats, BN_EPS, BN_MOMENTUM};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses (and updates) batch statistics.
    Train,
    /// Batch norm uses running statistics; samples are independent.
    Eval,
}

/// Graph handles for every parameter of a model.
pub type ParamVars = BTreeMap<String, Var>;

/// Output of recording a forward pass on a graph.
#[derive(Debug)]
pub struct Recorded<E> {
    pub logits: Var,
    /// `(batch-norm prefix, statistics)` for layers that ran on batch statistics.
    pub bn_stats: Vec<(String, BatchStats<E>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

pub const HEAD_PREFIX: &str = "head.";

fn he_uniform(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let fan_in: usize = if shape.len() == 4 {
        shape[1] * shape[2] * shape[3]
    } else {
        shape[0]
    };
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let mut rng = rng::stream(seed, name, 0);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape from spec")
}

fn init_param(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    if name.ends_with(".gamma") {
        Tensor::full(shape, 1.0)
    } else if name.ends_with(".beta") || name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        he_uniform(seed, name, shape)
    }
}

fn init_buffer(name: &str, shape: &[usize]) -> Tensor {
    if name.ends_with(".running_var") || name == "input.std" {
        Tensor::full(shape, 1.0)
    } else {
        Tensor::zeros(shape)
    }
}

impl Model {
    /// Initializes a model: He-uniform conv/dense weights, zero biases and
    /// betas, unit gammas. Each tensor draws from its own stream keyed by
    /// name, so the result depends only on `(spec, seed)`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_param(seed, &name, &shape);
                (name, t)
            })
            .collect();
        let buffers = spec
            .buffer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_buffer(&name, &shape);
                (name, t)
            })
            .collect();
        Ok(Self {
            spec,
            params,
            buffers,
            frozen: BTreeSet::new(),
        })
    }

    /// Assembles a model from stored tensors, checking them against the spec.
    pub fn from_parts(spec: ModelSpec, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()
            .map_err(|e| Error::SpecMismatch(e.to_string()))?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::SpecMismatch(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::SpecMismatch(format!(
                    "`{name}` has shape {:?}, spec expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut params = BTreeMap::new();
        for (name, shape) in spec.parameter_shapes() {
            let t = take(&name, &shape)?;
            params.insert(name, t);
        }
        let mut buffers = BTreeMap::new();
        for (name, shape) in spec.buffer_shapes() {
            let t = take(&name, &shape)?;
            buffers.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::SpecMismatch(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            spec,
            params,
            buffers,
            frozen: BTreeSet::new(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.head_classes
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.buffers
    }

    /// Parameters and buffers together, ordered by name.
    pub fn tensors(&self) -> BTreeMap<&str, &Tensor> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Classifier weight matrix `[feature_dim, classes]`.
    pub fn head_weight(&self) -> &Tensor {
        &self.params["head.weight"]
    }

    /// Per-channel input standardization `(x − mean) / std` applied before the stem.
    pub fn set_input_normalization(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        let c = self.spec.stem.in_ch;
        if mean.len() != c || std.len() != c || std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "input normalization needs {c} means and {c} positive deviations"
            )));
        }
        self.buffers
            .insert("input.mean".into(), Tensor::from_vec(&[c], mean.to_vec())?);
        self.buffers
            .insert("input.std".into(), Tensor::from_vec(&[c], std.to_vec())?);
        Ok(())
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Excludes every parameter whose name starts with one of `prefixes`
    /// from optimizer updates. The empty prefix matches everything.
    pub fn freeze(&mut self, prefixes: &[&str]) -> Result<()> {
        for p in prefixes {
            if !self.params.keys().any(|n| n.starts_with(p)) {
                return Err(Error::UnknownPrefix(p.to_string()));
            }
        }
        for name in self.params.keys() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                self.frozen.insert(name.clone());
            }
        }
        Ok(())
    }

    /// Freezes everything except parameters under `keep` (feature-extractor mode).
    pub fn freeze_all_except(&mut self, keep: &[&str]) -> Result<()> {
        for p in keep {
            if !self.params.keys().any(|n| n.starts_with(p)) {
                return Err(Error::UnknownPrefix(p.to_string()));
            }
        }
        for name in self.params.keys() {
            if !keep.iter().any(|p| name.starts_with(p)) {
                self.frozen.insert(name.clone());
            }
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Swaps the classifier for a freshly initialized `new_classes`-way head.
    /// All other parameters and buffers are kept as they are.
    pub fn replace_head(&mut self, new_classes: usize, seed: u64) -> Result<()> {
        if new_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "head needs at least 2 classes, got {new_classes}"
            )));
        }
        self.spec.head_classes = new_classes;
        for (name, shape) in self.spec.parameter_shapes() {
            if name.starts_with(HEAD_PREFIX) {
                let t = init_param(seed, &name, &shape);
                self.frozen.remove(&name);
                self.params.insert(name, t);
            }
        }
        Ok(())
    }

    /// Adds every parameter to `g`; trainable ones receive gradients.
    pub fn param_vars<E: Element>(&self, g: &mut Graph<E>, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<E>();
                let v = if trainable && !self.is_frozen(name) {
                    g.param(t)
                } else {
                    g.constant(t)
                };
                (name.clone(), v)
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 4
            || shape[1] != s.stem.in_ch
            || shape[2] != s.input_size
            || shape[3] != s.input_size
        {
            return Err(Error::InvalidGeometry(format!(
                "{} expects [b, {}, {}, {}] input, got {shape:?}",
                s.variant, s.stem.in_ch, s.input_size, s.input_size
            )));
        }
        Ok(())
    }

    /// Applies the stored input standardization.
    pub fn normalize_input<E: Element>(&self, images: &Tensor) -> Result<Tensor<E>> {
        self.check_input(images.shape())?;
        let mean = self.buffers["input.mean"].data();
        let std = self.buffers["input.std"].data();
        let plane = images.shape()[2] * images.shape()[3];
        let c = images.shape()[1];
        let data = images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                E::of_f32((v - mean[ch]) / std[ch])
            })
            .collect();
        Tensor::from_vec(images.shape(), data)
    }

    fn bn<E: Element>(
        &self,
        g: &mut Graph<E>,
        x: Var,
        prefix: &str,
        mode: Mode,
        vars: &ParamVars,
        stats: &mut Vec<(String, BatchStats<E>)>,
    ) -> Result<Var> {
        let gamma_name = format!("{prefix}.gamma");
        let gamma = vars[&gamma_name];
        let beta = vars[&format!("{prefix}.beta")];
        // Frozen batch norms keep their running statistics even while training.
        if mode == Mode::Train && !self.is_frozen(&gamma_name) {
            let (y, s) = g.batch_norm(x, gamma, beta, BN_EPS, None)?;
            stats.push((prefix.to_string(), s.expect("training statistics")));
            Ok(y)
        } else {
            let mean: Vec<E> = self.buffers[&format!("{prefix}.running_mean")]
                .data()
                .iter()
                .map(|&v| E::of_f32(v))
                .collect();
            let var: Vec<E> = self.buffers[&format!("{prefix}.running_var")]
                .data()
                .iter()
                .map(|&v| E::of_f32(v))
                .collect();
            Ok(g.batch_norm(x, gamma, beta, BN_EPS, Some((&mean, &var)))?.0)
        }
    }

    /// Records block `index` of [`ModelSpec::blocks`]: `relu(F(x) + shortcut(x))`.
    pub fn residual_forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        x: Var,
        index: usize,
        mode: Mode,
        vars: &ParamVars,
        stats: &mut Vec<(String, BatchStats<E>)>,
    ) -> Result<Var> {
        let blocks = self.spec.blocks();
        let (prefix, block) = blocks
            .get(index)
            .ok_or_else(|| Error::InvalidSpec(format!("model has no block {index}")))?;
        let in_shape = g.shape(x);
        if in_shape.len() != 4 || in_shape[1] != block.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "block {prefix} expects {} channels, got input {in_shape:?}",
                block.in_ch
            )));
        }
        let convs = block.branch_convs();
        let mut h = x;
        for (i, (name, _)) in convs.iter().enumerate() {
            let (stride, padding) = block.branch_geometry(i);
            h = g.conv2d(
                h,
                vars[&format!("{prefix}{name}.weight")],
                None,
                stride,
                padding,
            )?;
            h = self.bn(g, h, &format!("{prefix}bn{}", i + 1), mode, vars, stats)?;
            if i + 1 < convs.len() {
                h = g.relu(h);
            }
        }
        let shortcut = if block.projection {
            let s = g.conv2d(
                x,
                vars[&format!("{prefix}shortcut.conv.weight")],
                None,
                block.stride,
                0,
            )?;
            self.bn(g, s, &format!("{prefix}shortcut.bn"), mode, vars, stats)?
        } else {
            x
        };
        let sum = g.add(h, shortcut)?;
        Ok(g.relu(sum))
    }

    /// Records the whole network on `g` for raw `[b, c, s, s]` images in `[0, 1]`.
    pub fn record<E: Element>(
        &self,
        g: &mut Graph<E>,
        images: &Tensor,
        mode: Mode,
        vars: &ParamVars,
    ) -> Result<Recorded<E>> {
        let input = self.normalize_input::<E>(images)?;
        let x = g.constant(input);
        self.record_from(g, x, mode, vars)
    }

    /// Like [`Model::record`] for an already normalized input node.
    pub fn record_from<E: Element>(
        &self,
        g: &mut Graph<E>,
        x: Var,
        mode: Mode,
        vars: &ParamVars,
    ) -> Result<Recorded<E>> {
        let mut stats = Vec::new();
        let st = &self.spec.stem;
        let mut h = g.conv2d(x, vars["stem.conv.weight"], None, st.stride, st.padding)?;
        h = self.bn(g, h, "stem.bn", mode, vars, &mut stats)?;
        h = g.relu(h);
        if let Some(p) = st.pool {
            h = g.maxpool2d(h, p.kernel, p.stride, p.padding)?;
        }
        for i in 0..self.spec.blocks().len() {
            h = self.residual_forward(g, h, i, mode, vars, &mut stats)?;
        }
        let features = g.global_avgpool(h)?;
        let logits = g.dense(features, vars["head.weight"], vars["head.bias"])?;
        Ok(Recorded {
            logits,
            bn_stats: stats,
        })
    }

    /// Folds batch statistics into the running buffers with momentum 0.1.
    pub fn apply_bn_stats<E: Element>(&mut self, stats: &[(String, BatchStats<E>)]) {
        let m = BN_MOMENTUM as f32;
        for (prefix, s) in stats {
            let rm = self
                .buffers
                .get_mut(&format!("{prefix}.running_mean"))
                .expect("buffer exists for every batch norm");
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b.as_f32();
            }
            let rv = self
                .buffers
                .get_mut(&format!("{prefix}.running_var"))
                .expect("buffer exists for every batch norm");
            for (r, b) in rv.data_mut().iter_mut().zip(s.unbiased_var()) {
                *r = (1.0 - m) * *r + m * b.as_f32();
            }
        }
    }

    /// Logits for a batch. Training mode updates batch-norm running statistics.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let vars = self.param_vars(&mut g, false);
        let rec = self.record(&mut g, images, mode, &vars)?;
        let stats = rec.bn_stats;
        self.apply_bn_stats(&stats);
        Ok(g.value(rec.logits).clone())
    }

    /// Eval-mode logits; a pure function of parameters and input.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let vars = self.param_vars(&mut g, false);
        let rec = self.record(&mut g, images, Mode::Eval, &vars)?;
        Ok(g.value(rec.logits).clone())
    }

    /// Eval-mode class probabilities `[b, classes]`.
    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let n = logits.shape()[1];
        Tensor::from_vec(logits.shape(), crate::nn::softmax_rows(logits.data(), n))
    }

    /// Argmax class per image (ties go to the lowest class index).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(argmax_rows(logits.data(), logits.shape()[1]))
    }
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows(data: &[f32], n: usize) -> Vec<usize> {
    data.chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
