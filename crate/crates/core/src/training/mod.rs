//! Training objective, optimizers, the epoch loop with validation-based
//! checkpoint selection, and accuracy evaluation.

mod loss;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

pub use loss::{cross_entropy, final_loss};
pub use optim::{Adam, AdamState, Grads, Optimizer, Sgd};

use crate::autodiff::Graph;
use crate::data::{self, augment, AugmentPolicy, DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::Adam),
            "sgd" => Some(Self::Sgd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        }
    }
}

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 24;
pub const DEFAULT_LEARNING_RATE: f64 = 0.0002;
pub const DEFAULT_LAMBDA1: f64 = 1e-4;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the squared Frobenius norm of the classifier weights.
    pub lambda1: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub freeze_prefixes: Vec<String>,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda1: DEFAULT_LAMBDA1,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: DEFAULT_SEED,
            freeze_prefixes: Vec::new(),
            augment: AugmentPolicy::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (batch norm needs two samples)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_acc` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.val_accuracy);
        }
        s
    }

    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(s, "{}", epoch_line(e));
        }
        let _ = writeln!(
            s,
            "best_epoch {} best_val_acc {:.6} test_acc {:.6}",
            self.best_epoch, self.best_val_accuracy, self.test_accuracy
        );
        s
    }
}

pub fn epoch_line(e: &EpochRecord) -> String {
    format!(
        "epoch {} train_loss {:.6} val_acc {:.6}",
        e.epoch, e.train_loss, e.val_accuracy
    )
}

/// Records one mini-batch, back-propagates the objective and returns the
/// loss together with gradients of every trainable parameter.
pub fn loss_and_grads(
    model: &mut Model,
    images: &[&LabeledImage],
    lambda1: f64,
) -> Result<(f64, Grads)> {
    let batch = data::batch(images)?;
    let labels: Vec<usize> = images.iter().map(|i| i.class_id).collect();
    let mut g = Graph::<f32>::new();
    let vars = model.param_vars(&mut g, true);
    let rec = model.record(&mut g, &batch, Mode::Train, &vars)?;
    let loss = final_loss(&mut g, rec.logits, &labels, vars["head.weight"], lambda1)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
        .collect();
    model.apply_bn_stats(&rec.bn_stats);
    Ok((g.value(loss).data()[0] as f64, grads))
}

const EVAL_CHUNK: usize = 32;

/// Per-image predictions in eval mode.
pub fn predict_all(model: &Model, images: &[LabeledImage]) -> Result<Vec<usize>> {
    let chunks = images.len().div_ceil(EVAL_CHUNK);
    let parts = crate::par::try_map_range(chunks, |c| {
        let part: Vec<&LabeledImage> = images
            [c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(images.len())]
            .iter()
            .collect();
        model.predict(&data::batch(&part)?)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Fraction of images whose prediction equals their label.
pub fn evaluate(model: &Model, images: &[LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptySplit("evaluation set is empty"));
    }
    let preds = predict_all(model, images)?;
    let correct = preds
        .iter()
        .zip(images)
        .filter(|(p, i)| **p == i.class_id)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Trains `model` on `split.train`, checks validation accuracy after every
/// epoch and returns the parameters of the best epoch (earliest on ties),
/// evaluated on `split.test`.
///
/// Each epoch reshuffles the training set from the seed; the trailing
/// partial batch is dropped unless the whole set is smaller than one batch.
/// Input standardization is recomputed from the training images unless the
/// stem is frozen.
pub fn train(
    mut model: Model,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    train_with_progress(&mut model, split, config, |_| {})
}

pub fn train_with_progress(
    model: &mut Model,
    split: &DatasetSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptySplit("training partition is empty"));
    }
    if split.val.is_empty() {
        return Err(Error::EmptySplit("validation partition is empty"));
    }
    if split.test.is_empty() {
        return Err(Error::EmptySplit("test partition is empty"));
    }
    let classes = model.classes();
    if let Some(img) = split
        .train
        .iter()
        .chain(&split.val)
        .chain(&split.test)
        .find(|i| i.class_id >= classes)
    {
        return Err(Error::LabelOutOfRange {
            label: img.class_id,
            classes,
        });
    }
    let batch_size = config.batch_size.min(split.train.len());
    if batch_size < 2 {
        return Err(Error::DegenerateBatch(batch_size));
    }
    let prefixes: Vec<&str> = config.freeze_prefixes.iter().map(String::as_str).collect();
    model.freeze(&prefixes)?;
    // A frozen stem keeps the standardization it was trained with.
    if !model.is_frozen("stem.conv.weight") {
        let (mean, std) = data::channel_stats(&split.train)?;
        model.set_input_normalization(&mean, &std)?;
    }

    let mut optimizer: Box<dyn Optimizer> = match config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )),
        OptimizerKind::Sgd => Box::new(Sgd {
            lr: config.learning_rate,
        }),
    };

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        let augmented: Vec<LabeledImage> = if config.augment.is_empty() {
            Vec::new()
        } else {
            let purpose = format!("augment.{epoch}");
            crate::par::map_range(split.train.len(), |i| {
                augment(
                    &split.train[i],
                    &config.augment,
                    &mut rng::stream(config.seed, &purpose, i as u64),
                )
            })
        };
        let source = if augmented.is_empty() {
            &split.train
        } else {
            &augmented
        };

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size).filter(|c| c.len() == batch_size) {
            let imgs: Vec<&LabeledImage> = chunk.iter().map(|&i| &source[i]).collect();
            let (loss, grads) = loss_and_grads(model, &imgs, config.lambda1)?;
            let frozen = model.frozen().clone();
            optimizer.step(model.params_mut(), &grads, &frozen);
            loss_sum += loss;
            batches += 1;
        }
        let val_accuracy = evaluate(model, &split.val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy,
        };
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, best_model) = best.expect("at least one epoch");
    let test_accuracy = evaluate(&best_model, &split.test)?;
    Ok((
        best_model,
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_accuracy,
            test_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (100, 24, 0.0002));
        c.validate().unwrap();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..c.clone()
            },
            TrainConfig {
                batch_size: 1,
                ..c.clone()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..c.clone()
            },
            TrainConfig {
                lambda1: -1.0,
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn report_csv_format() {
        let r = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_accuracy: 1.0,
            }],
            best_epoch: 1,
            best_val_accuracy: 1.0,
            test_accuracy: 0.75,
        };
        assert_eq!(
            r.to_csv(),
            "epoch,train_loss,val_acc\n1,0.500000,1.000000\n"
        );
        assert!(r.to_log().contains("test_acc 0.750000"));
    }
}
