use crate::error::{Error, Result};
use crate::kernels;

use super::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: kernels::ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, same layout as `x`.
        xhat: Vec<E>,
        inv_std: Vec<E>,
        /// Batch statistics (training mode) or `None` when the running
        /// statistics were used.
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<E> {
    pub(crate) value: Tensor<E>,
    pub(crate) op: Op<E>,
    pub(crate) requires_grad: bool,
}

/// Append-only computation record for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order since an
/// op can only consume nodes that already exist. [`Graph::backward`] walks it
/// in reverse exactly once.
#[derive(Debug, Default)]
pub struct Graph<E = f32> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, mut tensor: Tensor<E>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<E>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        let mut value = value;
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch(format!("{what} of {sa:?} and {sb:?}")))
        }
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let shape = self.binary_shape(a, b, what)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                f(
                    da[if da.len() == 1 { 0 } else { i }],
                    db[if db.len() == 1 { 0 } else { i }],
                )
            })
            .collect();
        Tensor::from_vec(&shape, data)
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, k: E) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&x| x * k).collect())
            .expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(&[m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[b, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch(format!(
                "bias {sb:?} for input {sx:?}"
            )));
        }
        let n = sx[1];
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b))
            .collect();
        let out = Tensor::from_vec(&sx, data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / E::of_f64(t.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum of squared entries (squared Frobenius norm for a matrix).
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// `max(0, x)`; the subgradient at exactly zero is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(
            t.shape(),
            t.data()
                .iter()
                .map(|&x| if x > E::zero() { x } else { E::zero() })
                .collect(),
        )
        .expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Populates gradients of `loss` for every node that requires one.
    ///
    /// Nodes are processed in reverse creation order; contributions from
    /// several consumers are summed in that fixed order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.backward_node(idx, &upstream) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&contribution)
                        .for_each(|(a, c)| *a = *a + *c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.nodes[idx].value.set_grad(upstream);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, up: &[E]) -> Vec<(Var, Vec<E>)> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -E::one()
                } else {
                    E::one()
                };
                if wants(*a) {
                    out.push((*a, reduce_broadcast(up.to_vec(), self.value(*a).numel())));
                }
                if wants(*b) {
                    let g = up.iter().map(|&u| sign * u).collect();
                    out.push((*b, reduce_broadcast(g, self.value(*b).numel())));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[E], i: usize| d[if d.len() == 1 { 0 } else { i }];
                if wants(*a) {
                    let g = up
                        .iter()
                        .enumerate()
                        .map(|(i, &u)| u * pick(db, i))
                        .collect();
                    out.push((*a, reduce_broadcast(g, da.len())));
                }
                if wants(*b) {
                    let g = up
                        .iter()
                        .enumerate()
                        .map(|(i, &u)| u * pick(da, i))
                        .collect();
                    out.push((*b, reduce_broadcast(g, db.len())));
                }
            }
            Op::Scale(a, k) => out.push((*a, up.iter().map(|&u| u * *k).collect())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    out.push((
                        *a,
                        kernels::matmul_grad_lhs(up, self.value(*b).data(), m, k, n),
                    ));
                }
                if wants(*b) {
                    out.push((
                        *b,
                        kernels::matmul_grad_rhs(self.value(*a).data(), up, m, k, n),
                    ));
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    out.push((*x, up.to_vec()));
                }
                if wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut g = vec![E::zero(); n];
                    for row in up.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                    }
                    out.push((*bias, g));
                }
            }
            Op::Sum(a) => out.push((*a, vec![up[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![up[0] / E::of_f64(n as f64); n]));
            }
            Op::SumSquares(a) => {
                let two = E::of_f64(2.0);
                out.push((
                    *a,
                    self.value(*a)
                        .data()
                        .iter()
                        .map(|&x| two * x * up[0])
                        .collect(),
                ));
            }
            Op::Relu(a) => {
                let g = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > E::zero() { u } else { E::zero() })
                    .collect();
                out.push((*a, g));
            }
            Op::Conv2d { x, w, bias, geom } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if wants(*x) {
                    out.push((*x, kernels::conv2d_grad_input(up, wd, geom)));
                }
                if wants(*w) {
                    out.push((*w, kernels::conv2d_grad_weight(xd, up, geom)));
                }
                if let Some(bias) = bias.filter(|b| wants(*b)) {
                    out.push((bias, kernels::conv2d_grad_bias(up, geom)));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gd = self.value(*gamma).data();
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(up, xhat, inv_std, gd, b, c, plane, *batch_stats);
                if wants(*x) {
                    out.push((*x, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut g = vec![E::zero(); self.value(*x).numel()];
                for (&src, &u) in argmax.iter().zip(up) {
                    g[src] = g[src] + u;
                }
                out.push((*x, g));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = E::one() / E::of_f64(plane as f64);
                let g = up
                    .iter()
                    .flat_map(|&u| std::iter::repeat_n(u * inv, plane))
                    .collect();
                out.push((*x, g));
            }
            Op::Softmax(a) => {
                let n = *self.shape(*a).last().expect("rank >= 1");
                let y = node.value.data();
                let mut g = vec![E::zero(); y.len()];
                for ((gr, yr), ur) in g.chunks_mut(n).zip(y.chunks(n)).zip(up.chunks(n)) {
                    let dot: E = yr.iter().zip(ur).map(|(&p, &u)| p * u).sum();
                    for ((gi, &p), &u) in gr.iter_mut().zip(yr).zip(ur) {
                        *gi = p * (u - dot);
                    }
                }
                out.push((*a, g));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let scale = up[0] / E::of_f64(labels.len() as f64);
                let mut g = probs.clone();
                for (row, &label) in g.chunks_mut(n).zip(labels) {
                    row[label] = row[label] - E::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                out.push((*logits, g));
            }
        }
        out
    }
}

/// Sums a full-size gradient down to a one-element operand when it was broadcast.
fn reduce_broadcast<E: Element>(g: Vec<E>, target_len: usize) -> Vec<E> {
    if target_len == 1 && g.len() != 1 {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}
