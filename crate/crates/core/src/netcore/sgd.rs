use crate::error::{Error, Result};

use super::model::{FeatureModel, Gradients};

/// Hyper-parameters for one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Gradients);

impl Velocity {
    pub fn zeros_like(model: &FeatureModel) -> Self {
        Velocity(Gradients::zeros_like(model))
    }
}

/// `v ← μ·v + (g + λ·p)`, then `p ← p − η·v`, elementwise.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], hyper: &SgdHyper) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = hyper.momentum * *v + (g + hyper.weight_decay * *p);
        *p -= hyper.learning_rate * *v;
    }
}

pub fn sgd_step(
    model: &mut FeatureModel,
    grads: &Gradients,
    hyper: &SgdHyper,
    velocity: &mut Velocity,
) -> Result<()> {
    let shapes_match = model.layers.len() == grads.layers.len()
        && model.layers.len() == velocity.0.layers.len()
        && model
            .layers
            .iter()
            .zip(&grads.layers)
            .zip(&velocity.0.layers)
            .all(|((p, g), v)| {
                p.weights.len() == g.weights.len()
                    && p.biases.len() == g.biases.len()
                    && p.weights.len() == v.weights.len()
                    && p.biases.len() == v.biases.len()
            });
    if !shapes_match {
        return Err(Error::invalid("gradient shapes do not match model parameters"));
    }
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.0.layers)
    {
        sgd_update(&mut layer.weights, &g.weights, &mut v.weights, hyper);
        sgd_update(&mut layer.biases, &g.biases, &mut v.biases, hyper);
    }
    Ok(())
}
