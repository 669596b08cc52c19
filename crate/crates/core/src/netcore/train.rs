use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::polytope::FixedClassifier;
use crate::seed::{self, Stream};

use super::loss::{cores_loss_and_grad, LinearHead};
use super::model::FeatureModel;
use super::sgd::{sgd_step, sgd_update, SgdHyper, Velocity};
use super::TrainConfig;

/// Training inputs paired with classifier output indices.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a [usize],
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        if self.inputs.rows() == 0 {
            return Err(Error::InsufficientData("empty training set".into()));
        }
        if self.inputs.rows() != self.targets.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                self.inputs.rows(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

/// Loss and gradients for one batch, before any parameter update.
#[derive(Debug, Clone)]
pub struct ObjectiveStep {
    pub loss: f64,
    pub d_features: Matrix,
    /// Gradient for objective-owned parameters (a trainable head), if any.
    pub head_grad: Option<Matrix>,
}

/// What the feature extractor is trained against.
///
/// `rows` are the dataset indices of the batch, so objectives can look up
/// per-sample side information.
pub trait Objective {
    fn evaluate(&self, features: &Matrix, rows: &[usize], targets: &[usize]) -> Result<ObjectiveStep>;

    /// Updates objective-owned parameters. Fixed objectives do nothing.
    fn update(&mut self, _step: &ObjectiveStep, _hyper: &SgdHyper) {}
}

/// Softmax over a fixed prototype matrix (the CoReS loss).
#[derive(Debug, Clone, Copy)]
pub struct FixedPrototypes<'a>(pub &'a FixedClassifier);

impl Objective for FixedPrototypes<'_> {
    fn evaluate(&self, features: &Matrix, _rows: &[usize], targets: &[usize]) -> Result<ObjectiveStep> {
        let (loss, d_features) = cores_loss_and_grad(features, targets, self.0)?;
        Ok(ObjectiveStep {
            loss,
            d_features,
            head_grad: None,
        })
    }
}

/// Standard cross-entropy with a trainable linear head, updated by the same
/// SGD as the feature extractor.
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    pub head: LinearHead,
    velocity: Vec<f64>,
}

impl SoftmaxHead {
    pub fn new(head: LinearHead) -> Self {
        let n = head.weights.as_slice().len();
        SoftmaxHead {
            head,
            velocity: vec![0.0; n],
        }
    }
}

impl Objective for SoftmaxHead {
    fn evaluate(&self, features: &Matrix, _rows: &[usize], targets: &[usize]) -> Result<ObjectiveStep> {
        let (loss, d_features, d_weights) = self.head.loss_and_grad(features, targets)?;
        Ok(ObjectiveStep {
            loss,
            d_features,
            head_grad: Some(d_weights),
        })
    }

    fn update(&mut self, step: &ObjectiveStep, hyper: &SgdHyper) {
        if let Some(g) = &step.head_grad {
            sgd_update(
                self.head.weights.as_mut_slice(),
                g.as_slice(),
                &mut self.velocity,
                hyper,
            );
        }
    }
}

/// Passed to the per-epoch callback after each epoch's updates.
#[derive(Debug)]
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub model: &'a FeatureModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Loss over the full training set before the first update.
    pub initial_loss: f64,
    /// Batch-size weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&self.initial_loss)
    }
}

pub fn evaluate_loss<O: Objective + ?Sized>(
    model: &FeatureModel,
    objective: &O,
    data: TrainData<'_>,
) -> Result<f64> {
    data.validate()?;
    let rows: Vec<usize> = (0..data.targets.len()).collect();
    let features = model.features(data.inputs)?;
    Ok(objective.evaluate(&features, &rows, data.targets)?.loss)
}

/// Mini-batch SGD over `config.epochs` epochs. Batches are drawn from a
/// permutation seeded by `(seed, epoch)`, so runs repeat exactly while epochs
/// still differ. `on_epoch` runs after every epoch.
pub fn train_with<O, F>(
    model: &mut FeatureModel,
    objective: &mut O,
    data: TrainData<'_>,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    O: Objective + ?Sized,
    F: FnMut(&EpochEnd<'_>) -> Result<()>,
{
    config.validate()?;
    data.validate()?;
    let n = data.targets.len();
    let initial_loss = evaluate_loss(model, objective, data)?;
    let mut velocity = Velocity::zeros_like(model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut targets = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        let hyper = config.hyper_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut seed::stream_rng(seed, Stream::Shuffle, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs = data.inputs.select_rows(chunk);
            targets.clear();
            targets.extend(chunk.iter().map(|&i| data.targets[i]));
            let (features, cache) = model.forward(&inputs)?;
            let step = objective.evaluate(&features, chunk, &targets)?;
            let grads = model.backward(&inputs, &cache, &step.d_features)?;
            sgd_step(model, &grads, &hyper, &mut velocity)?;
            objective.update(&step, &hyper);
            total += step.loss * chunk.len() as f64;
        }
        let mean_loss = total / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        epoch_losses.push(mean_loss);
        on_epoch(&EpochEnd {
            epoch,
            mean_loss,
            model,
        })?;
    }
    Ok(TrainOutcome {
        initial_loss,
        epoch_losses,
    })
}

/// Trains against a fixed classifier with the CoReS loss.
pub fn train_epochs<F>(
    model: &mut FeatureModel,
    fc: &FixedClassifier,
    data: TrainData<'_>,
    config: &TrainConfig,
    seed: u64,
    on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochEnd<'_>) -> Result<()>,
{
    if model.output_dim() != fc.dim() {
        return Err(Error::invalid(format!(
            "model outputs {} dimensions, classifier has {}",
            model.output_dim(),
            fc.dim()
        )));
    }
    if let Some(&bad) = data.targets.iter().find(|&&t| t >= fc.allocated()) {
        return Err(Error::InvalidLabel {
            label: bad,
            allocated: fc.allocated(),
        });
    }
    train_with(model, &mut FixedPrototypes(fc), data, config, seed, on_epoch)
}
