//! Random finite-difference cases shared by the gradient tests and the
//! acceptance suite.

use irisnet::autodiff::{
    grad_check_coords_at, grad_check_report, grad_check_report_at, GradCheckReport, ScalarFn,
};
use irisnet::model::ParamVars;
use irisnet::training::final_loss;
use irisnet::{Element, Graph, Mode, Model, ModelSpec, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 100;
pub const STEP: f64 = 1e-4;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with |x| ≥ 0.05, away from the relu kink.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values at least 0.01 apart, so no pooling window holds a near-tie.
pub fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.02 - 0.5).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    MulScalar,
    Scale,
    Matmul,
    AddBias,
    Sum,
    Mean,
    SumSquares,
    Relu,
    Conv {
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNormTrain,
    BatchNormEval,
    MaxPool {
        k: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Dense,
    Softmax,
    CrossEntropy,
    FinalLoss,
}

/// `sum(op(inputs) ⊙ projection)`, so every output coordinate carries a distinct weight.
pub struct Case {
    op: Op,
    projection: Option<Tensor>,
    labels: Vec<usize>,
    running: (Vec<f32>, Vec<f32>),
}

pub fn cast<E: Element>(v: &[f32]) -> Vec<E> {
    v.iter().map(|&x| E::of_f32(x)).collect()
}

impl ScalarFn for Case {
    fn eval<E: Element>(&self, g: &mut Graph<E>, x: &[Var]) -> Result<Var> {
        let out = match self.op {
            Op::Add => g.add(x[0], x[1])?,
            Op::Sub => g.sub(x[0], x[1])?,
            Op::Mul | Op::MulScalar => g.mul(x[0], x[1])?,
            Op::Scale => g.scale(x[0], E::of_f64(-1.75)),
            Op::Matmul => g.matmul(x[0], x[1])?,
            Op::AddBias => g.add_bias(x[0], x[1])?,
            Op::Sum => g.sum(x[0]),
            Op::Mean => g.mean(x[0]),
            Op::SumSquares => g.sum_squares(x[0]),
            Op::Relu => g.relu(x[0]),
            Op::Conv {
                stride,
                padding,
                bias,
            } => g.conv2d(x[0], x[1], bias.then(|| x[2]), stride, padding)?,
            Op::BatchNormTrain => g.batch_norm(x[0], x[1], x[2], 1e-5, None)?.0,
            Op::BatchNormEval => {
                let (m, v) = (cast::<E>(&self.running.0), cast::<E>(&self.running.1));
                g.batch_norm(x[0], x[1], x[2], 1e-5, Some((&m, &v)))?.0
            }
            Op::MaxPool { k, stride, padding } => g.maxpool2d(x[0], k, stride, padding)?,
            Op::GlobalAvgPool => g.global_avgpool(x[0])?,
            Op::Dense => g.dense(x[0], x[1], x[2])?,
            Op::Softmax => g.softmax(x[0])?,
            Op::CrossEntropy => g.cross_entropy(x[0], &self.labels)?,
            Op::FinalLoss => final_loss(g, x[0], &self.labels, x[1], 0.3)?,
        };
        match &self.projection {
            Some(p) => {
                let p = g.constant(p.cast());
                let weighted = g.mul(out, p)?;
                Ok(g.sum(weighted))
            }
            None => Ok(out),
        }
    }
}

pub fn case(op: Op, rng: &mut ChaCha8Rng) -> (Case, Vec<Tensor>) {
    let b = rng.random_range(2..4);
    let c = rng.random_range(1..4);
    let hw = rng.random_range(3..6);
    let m = rng.random_range(1..5);
    let n = rng.random_range(1..5);
    let mut labels = Vec::new();
    let mut running = (Vec::new(), Vec::new());
    let inputs = match op {
        Op::Add | Op::Sub | Op::Mul => vec![
            uniform(rng, &[m, n], -1.0, 1.0),
            uniform(rng, &[m, n], -1.0, 1.0),
        ],
        Op::MulScalar => vec![
            uniform(rng, &[m, n], -1.0, 1.0),
            uniform(rng, &[1], -1.0, 1.0),
        ],
        Op::Scale | Op::Sum | Op::Mean | Op::SumSquares | Op::Softmax => {
            vec![uniform(rng, &[m, n], -2.0, 2.0)]
        }
        Op::Matmul => vec![
            uniform(rng, &[m, c], -1.0, 1.0),
            uniform(rng, &[c, n], -1.0, 1.0),
        ],
        Op::AddBias => vec![
            uniform(rng, &[m, n], -1.0, 1.0),
            uniform(rng, &[n], -1.0, 1.0),
        ],
        Op::Relu => vec![off_kink(rng, &[m, n])],
        Op::Conv { bias, .. } => {
            let out_c = rng.random_range(1..4);
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let mut v = vec![
                uniform(rng, &[b, c, hw + 1, hw], -1.0, 1.0),
                uniform(rng, &[out_c, c, k, k], -1.0, 1.0),
            ];
            if bias {
                v.push(uniform(rng, &[out_c], -1.0, 1.0));
            }
            v
        }
        Op::BatchNormTrain | Op::BatchNormEval => {
            running = (
                (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            );
            vec![
                uniform(rng, &[b, c, hw, hw], -1.0, 1.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ]
        }
        Op::MaxPool { .. } => vec![well_separated(rng, &[b, c, hw + 1, hw + 1])],
        Op::GlobalAvgPool => vec![uniform(rng, &[b, c, hw, hw], -1.0, 1.0)],
        Op::Dense => vec![
            uniform(rng, &[m, c], -1.0, 1.0),
            uniform(rng, &[c, n], -1.0, 1.0),
            uniform(rng, &[n], -1.0, 1.0),
        ],
        Op::CrossEntropy | Op::FinalLoss => {
            let classes = n + 1;
            labels = (0..m).map(|_| rng.random_range(0..classes)).collect();
            let mut v = vec![uniform(rng, &[m, classes], -2.0, 2.0)];
            if matches!(op, Op::FinalLoss) {
                v.push(uniform(rng, &[c, classes], -1.0, 1.0));
            }
            v
        }
    };
    let scalar_out = matches!(
        op,
        Op::Sum | Op::Mean | Op::SumSquares | Op::CrossEntropy | Op::FinalLoss
    );
    let mut probe = Case {
        op,
        projection: None,
        labels,
        running,
    };
    if !scalar_out {
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = probe.eval(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        probe.projection = Some(uniform(rng, &shape, -1.0, 1.0));
    }
    (probe, inputs)
}

pub fn all_ops() -> Vec<Op> {
    let mut ops = vec![
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::MulScalar,
        Op::Scale,
        Op::Matmul,
        Op::AddBias,
        Op::Sum,
        Op::Mean,
        Op::SumSquares,
        Op::Relu,
        Op::BatchNormTrain,
        Op::BatchNormEval,
        Op::GlobalAvgPool,
        Op::Dense,
        Op::Softmax,
        Op::CrossEntropy,
        Op::FinalLoss,
    ];
    for stride in [1, 2] {
        for padding in [0, 1] {
            ops.push(Op::Conv {
                stride,
                padding,
                bias: stride == padding,
            });
        }
    }
    ops.push(Op::MaxPool {
        k: 2,
        stride: 2,
        padding: 0,
    });
    ops.push(Op::MaxPool {
        k: 3,
        stride: 2,
        padding: 1,
    });
    ops
}

/// Worst errors of `op` over [`SEEDS`] random cases: per-coordinate relative
/// error of the engine recorded in `f64`, and scale-relative error of the
/// engine recorded in `f32`.
pub fn worst_op_errors(op: Op) -> (f64, f64) {
    let mut worst = (0f64, 0f64);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 11);
        let (f, inputs) = case(op, &mut rng);
        let exact = grad_check_report_at::<f64, _>(&f, &inputs, STEP).unwrap();
        assert!(
            exact.unreliable.is_empty(),
            "{op:?} seed {seed}: kink at {:?}",
            exact.unreliable
        );
        let single = grad_check_report(&f, &inputs, STEP).unwrap();
        worst.0 = worst.0.max(exact.max_rel_error);
        worst.1 = worst.1.max(single.scale_rel_error());
    }
    worst
}

/// The objective of a model, as a function of its parameters listed in `names`.
pub struct ModelLoss<'a> {
    pub model: &'a Model,
    pub names: Vec<String>,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub lambda1: f64,
}

impl ScalarFn for ModelLoss<'_> {
    fn eval<E: Element>(&self, g: &mut Graph<E>, x: &[Var]) -> Result<Var> {
        let vars: ParamVars = self.names.iter().cloned().zip(x.iter().copied()).collect();
        let input = g.constant(self.model.normalize_input::<E>(&self.images)?);
        let rec = self.model.record_from(g, input, Mode::Train, &vars)?;
        final_loss(
            g,
            rec.logits,
            &self.labels,
            vars["head.weight"],
            self.lambda1,
        )
    }
}

pub fn model_loss(model: &Model, batch: usize, seed: u64) -> (ModelLoss<'_>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = model.spec().input_size;
    let images = uniform(&mut rng, &[batch, 3, s, s], 0.0, 1.0);
    let labels = (0..batch)
        .map(|_| rng.random_range(0..model.classes()))
        .collect();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let inputs = model.params().values().cloned().collect();
    (
        ModelLoss {
            model,
            names,
            images,
            labels,
            lambda1: 1e-4,
        },
        inputs,
    )
}

/// Moves batch-norm affine parameters off their identity initialization.
///
/// At gamma = 1, beta = 0 a relu between two batch norms is positively
/// homogeneous, the second norm cancels the first gamma and its true
/// gradient is zero; the check is meaningful only at a generic point.
pub fn generic_point(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut() {
        if name.ends_with(".gamma") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with(".beta") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

/// Checks the full resnet_micro objective (λ₁ = 1e-4) at `per_seed` random
/// parameter coordinates per seed. Returns the f64-engine relative error,
/// the f32-engine scale-relative error and the number of unreliable coordinates.
pub fn micro_model_errors(seeds: std::ops::Range<u64>, per_seed: usize) -> (f64, f64, usize) {
    let mut worst = (0f64, 0f64);
    let mut skipped = 0;
    for seed in seeds {
        let mut model = Model::build(ModelSpec::resnet_micro(5), seed).unwrap();
        generic_point(&mut model, seed);
        let (f, inputs) = model_loss(&model, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let coords: Vec<(usize, usize)> = (0..per_seed)
            .map(|_| {
                let i = rng.random_range(0..inputs.len());
                (i, rng.random_range(0..inputs[i].numel()))
            })
            .collect();
        let exact: GradCheckReport =
            grad_check_coords_at::<f64, _>(&f, &inputs, 1e-5, &coords).unwrap();
        let single = grad_check_coords_at::<f32, _>(&f, &inputs, 1e-5, &coords).unwrap();
        worst.0 = worst.0.max(exact.max_rel_error);
        worst.1 = worst.1.max(single.scale_rel_error());
        skipped += exact.unreliable.len();
    }
    (worst.0, worst.1, skipped)
}
