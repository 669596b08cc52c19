//! Baseline trainers: independent models (ITM), incremental fine-tuning
//! (IFT) and the Euclidean feature-drift penalty (ℓ²).

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};
use crate::netcore::{
    init_model, train_with, EpochEnd, FeatureModel, InitMode, LinearHead, Objective, ObjectiveStep,
    SgdHyper, SoftmaxHead, TrainConfig, TrainData, TrainOutcome,
};

/// Cross-entropy through a learned head plus `λ` times the mean Euclidean
/// distance between new and old features over the batch rows that belong to
/// the old training set.
///
/// The sum is divided by `1 + λ`. That leaves the minimizer unchanged and
/// keeps the step size bounded for very large `λ`.
#[derive(Debug, Clone)]
pub struct DriftPenalty {
    pub head: SoftmaxHead,
    old_features: Matrix,
    is_old: Vec<bool>,
    lambda: f64,
}

impl DriftPenalty {
    /// `old_features[i]` is the frozen old model's feature of training row
    /// `i`; only rows with `is_old[i]` enter the penalty.
    pub fn new(head: LinearHead, old_features: Matrix, is_old: Vec<bool>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        if old_features.rows() != is_old.len() {
            return Err(Error::invalid("old features and old-row mask differ in length"));
        }
        if old_features.cols() != head.dim() {
            return Err(Error::invalid("old features do not match the head dimension"));
        }
        Ok(DriftPenalty {
            head: SoftmaxHead::new(head),
            old_features,
            is_old,
            lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Objective for DriftPenalty {
    fn evaluate(&self, features: &Matrix, rows: &[usize], targets: &[usize]) -> Result<ObjectiveStep> {
        let mut step = self.head.evaluate(features, rows, targets)?;
        let scale = 1.0 / (1.0 + self.lambda);
        let old_rows: Vec<usize> = (0..rows.len()).filter(|&b| self.is_old[rows[b]]).collect();
        let mut drift = 0.0;
        if self.lambda > 0.0 && !old_rows.is_empty() {
            let per_row = self.lambda / old_rows.len() as f64;
            for &b in &old_rows {
                let new = features.row(b);
                let old = self.old_features.row(rows[b]);
                let dist = euclidean(new, old);
                drift += dist;
                if dist > 0.0 {
                    let g = step.d_features.row_mut(b);
                    for k in 0..g.len() {
                        g[k] += per_row * (new[k] - old[k]) / dist;
                    }
                }
            }
            drift /= old_rows.len() as f64;
        }
        step.loss = (step.loss + self.lambda * drift) * scale;
        step.d_features.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        if let Some(h) = step.head_grad.as_mut() {
            h.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
        Ok(step)
    }

    fn update(&mut self, step: &ObjectiveStep, hyper: &SgdHyper) {
        self.head.update(step, hyper);
    }
}

/// Mean Euclidean distance between the two models' features over `inputs`.
pub fn mean_feature_drift(a: &FeatureModel, b: &FeatureModel, inputs: &Matrix) -> Result<f64> {
    let fa = a.features(inputs)?;
    let fb = b.features(inputs)?;
    if fa.cols() != fb.cols() {
        return Err(Error::invalid("models differ in feature dimension"));
    }
    if fa.rows() == 0 {
        return Err(Error::InsufficientData("no probe inputs".into()));
    }
    let total: f64 = (0..fa.rows()).map(|i| euclidean(fa.row(i), fb.row(i))).sum();
    Ok(total / fa.rows() as f64)
}

/// Trains a model from fresh random parameters with a fresh head.
pub fn train_itm<F>(
    layer_dims: &[usize],
    classes: usize,
    data: TrainData<'_>,
    config: &TrainConfig,
    model_seed: u64,
    head_seed: u64,
    shuffle_seed: u64,
    on_epoch: F,
) -> Result<(FeatureModel, LinearHead, TrainOutcome)>
where
    F: FnMut(&EpochEnd<'_>) -> Result<()>,
{
    let mut model = init_model(layer_dims, model_seed, InitMode::FreshRandom, None)?;
    let mut obj = SoftmaxHead::new(LinearHead::new(model.output_dim(), classes, head_seed)?);
    let outcome = train_with(&mut model, &mut obj, data, config, shuffle_seed, on_epoch)?;
    Ok((model, obj.head, outcome))
}

/// Continues training `previous` with its head grown to `classes` outputs.
pub fn train_ift<F>(
    previous: Option<(&FeatureModel, &LinearHead)>,
    classes: usize,
    data: TrainData<'_>,
    config: &TrainConfig,
    head_seed: u64,
    shuffle_seed: u64,
    on_epoch: F,
) -> Result<(FeatureModel, LinearHead, TrainOutcome)>
where
    F: FnMut(&EpochEnd<'_>) -> Result<()>,
{
    let (prev_model, prev_head) = previous
        .ok_or_else(|| Error::MissingArgument("fine-tuning requires a previous model".into()))?;
    let mut model = init_model(&prev_model.layer_dims, prev_model.seed, InitMode::FineTune, Some(prev_model))?;
    let mut obj = SoftmaxHead::new(prev_head.expanded(classes, head_seed)?);
    let outcome = train_with(&mut model, &mut obj, data, config, shuffle_seed, on_epoch)?;
    Ok((model, obj.head, outcome))
}

/// Trains `model` with cross-entropy plus the drift penalty toward the
/// frozen `old_model`, over the rows flagged in `old_rows`.
#[allow(clippy::too_many_arguments)]
pub fn train_l2_baseline<F>(
    model: &mut FeatureModel,
    head: LinearHead,
    old_model: Option<&FeatureModel>,
    old_rows: &[bool],
    lambda: f64,
    data: TrainData<'_>,
    config: &TrainConfig,
    shuffle_seed: u64,
    on_epoch: F,
) -> Result<(LinearHead, TrainOutcome)>
where
    F: FnMut(&EpochEnd<'_>) -> Result<()>,
{
    let old = old_model.ok_or_else(|| Error::MissingArgument("the drift penalty needs the old model".into()))?;
    if old_rows.len() != data.targets.len() {
        return Err(Error::invalid("old-row mask does not cover the training set"));
    }
    let old_features = old.features(data.inputs)?;
    let mut obj = DriftPenalty::new(head, old_features, old_rows.to_vec(), lambda)?;
    let outcome = train_with(model, &mut obj, data, config, shuffle_seed, on_epoch)?;
    Ok((obj.head.head, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_blobs;

    fn blobs() -> (Matrix, Vec<usize>) {
        let set = gen_blobs(3, 20, 4, 0.1, 11).unwrap();
        let targets = set.labels().iter().map(|&l| l as usize).collect();
        (set.samples().clone(), targets)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr_schedule: vec![],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lambda_matches_plain_cross_entropy() {
        let (x, y) = blobs();
        let data = TrainData { inputs: &x, targets: &y };
        let dims = [4, 8, 2];
        let old = init_model(&dims, 5, InitMode::SameSeed, None).unwrap();
        let head = LinearHead::new(2, 3, 9).unwrap();

        let mut plain_model = init_model(&dims, 1, InitMode::SameSeed, None).unwrap();
        let mut plain = SoftmaxHead::new(head.clone());
        let a = train_with(&mut plain_model, &mut plain, data, &quick(), 3, |_| Ok(())).unwrap();

        let mut l2_model = init_model(&dims, 1, InitMode::SameSeed, None).unwrap();
        let (_, b) =
            train_l2_baseline(&mut l2_model, head, Some(&old), &vec![true; y.len()], 0.0, data, &quick(), 3, |_| Ok(()))
                .unwrap();
        assert_eq!(a, b);
        assert_eq!(plain_model, l2_model);
    }

    #[test]
    fn negative_lambda_and_missing_old_model_are_rejected() {
        let (x, y) = blobs();
        let data = TrainData { inputs: &x, targets: &y };
        let mut m = init_model(&[4, 2], 1, InitMode::SameSeed, None).unwrap();
        let head = LinearHead::new(2, 3, 1).unwrap();
        let old = m.clone();
        let mask = vec![true; y.len()];
        assert!(matches!(
            train_l2_baseline(&mut m, head.clone(), Some(&old), &mask, -1.0, data, &quick(), 1, |_| Ok(())),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            train_l2_baseline(&mut m, head, None, &mask, 1.0, data, &quick(), 1, |_| Ok(())),
            Err(Error::MissingArgument(_))
        ));
    }

    #[test]
    fn ift_starts_from_previous_parameters() {
        let (x, y) = blobs();
        let data = TrainData { inputs: &x, targets: &y };
        let prev = init_model(&[4, 6, 2], 3, InitMode::SameSeed, None).unwrap();
        let head = LinearHead::new(2, 3, 2).unwrap();
        let mut first: Option<FeatureModel> = None;
        let mut cfg = quick();
        cfg.learning_rate = 1e-12;
        cfg.momentum = 0.0;
        cfg.weight_decay = 0.0;
        cfg.epochs = 1;
        train_ift(Some((&prev, &head)), 3, data, &cfg, 4, 5, |e| {
            first.get_or_insert_with(|| e.model.clone());
            Ok(())
        })
        .unwrap();
        let first = first.unwrap();
        for (a, b) in first.layers.iter().zip(&prev.layers) {
            for (u, v) in a.weights.iter().zip(&b.weights) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        assert!(matches!(
            train_ift(None, 3, data, &cfg, 4, 5, |_| Ok(())),
            Err(Error::MissingArgument(_))
        ));
    }

    #[test]
    fn itm_models_differ_across_seeds() {
        let (x, y) = blobs();
        let data = TrainData { inputs: &x, targets: &y };
        let (a, _, _) = train_itm(&[4, 6, 2], 3, data, &quick(), 1, 1, 1, |_| Ok(())).unwrap();
        let (b, _, _) = train_itm(&[4, 6, 2], 3, data, &quick(), 2, 2, 1, |_| Ok(())).unwrap();
        assert_ne!(a, b);
    }
}
