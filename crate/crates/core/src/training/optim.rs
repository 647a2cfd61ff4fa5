use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tensor;

pub type Grads = BTreeMap<String, Vec<f32>>;

/// Updates named parameters in place from named gradients. Parameters in
/// `frozen`, or without a gradient, are left untouched.
pub trait Optimizer {
    fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &Grads,
        frozen: &BTreeSet<String>,
    );
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of a single parameter.
    pub fn update(&mut self, name: &str, theta: &mut [f32], grad: &[f32]) {
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| AdamState {
                m: vec![0.0; theta.len()],
                v: vec![0.0; theta.len()],
                t: 0,
            });
        st.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(st.t as i32)) as f32;
        let c2 = (1.0 - self.beta2.powi(st.t as i32)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        for i in 0..theta.len() {
            let g = grad[i];
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let m_hat = st.m[i] / c1;
            let v_hat = st.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

impl Optimizer for Adam {
    fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &Grads,
        frozen: &BTreeSet<String>,
    ) {
        for (name, t) in params.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            if let Some(g) = grads.get(name) {
                self.update(name, t.data_mut(), g);
            }
        }
    }
}

/// Plain gradient descent `θ ← θ − lr·g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &Grads,
        frozen: &BTreeSet<String>,
    ) {
        let lr = self.lr as f32;
        for (name, t) in params.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            if let Some(g) = grads.get(name) {
                for (p, &gi) in t.data_mut().iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
        }
    }
}
