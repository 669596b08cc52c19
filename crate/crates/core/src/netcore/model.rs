use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::seed::{self, Stream};

use super::InitMode;

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    /// `input · Wᵀ + b`
    fn affine(&self, input: &Matrix) -> Matrix {
        let mut z = Matrix::zeros(input.rows(), self.outputs);
        for i in 0..input.rows() {
            let a = input.row(i);
            let zr = z.row_mut(i);
            for (o, slot) in zr.iter_mut().enumerate() {
                *slot = dot(a, self.weight_row(o)) + self.biases[o];
            }
        }
        z
    }

    /// `delta · W`, the gradient flowing back to this layer's input.
    fn backprop_input(&self, delta: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(delta.rows(), self.inputs);
        for i in 0..delta.rows() {
            let o_row = out.row_mut(i);
            for (o, &d) in delta.row(i).iter().enumerate() {
                if d != 0.0 {
                    axpy(o_row, d, self.weight_row(o));
                }
            }
        }
        out
    }
}

/// Feed-forward feature extractor: ReLU on hidden layers, identity on the
/// output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub layer_dims: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
    pub init_mode: InitMode,
}

/// Post-activation outputs of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Matrix>,
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(model: &FeatureModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid("a model needs at least an input and an output width"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid("layer widths must be positive"));
    }
    Ok(())
}

/// Builds a model. `SameSeed` and `FreshRandom` both draw weights from
/// `U(±√(6/(fan_in + fan_out)))` with zero biases; they differ only in which
/// seed the caller passes. `FineTune` copies `previous` verbatim.
pub fn init_model(
    layer_dims: &[usize],
    seed: u64,
    init_mode: InitMode,
    previous: Option<&FeatureModel>,
) -> Result<FeatureModel> {
    validate_dims(layer_dims)?;
    if init_mode == InitMode::FineTune {
        let prev = previous.ok_or_else(|| {
            Error::MissingArgument("fine-tuning requires a previous model".into())
        })?;
        if prev.layer_dims != layer_dims {
            return Err(Error::invalid(format!(
                "previous model has dims {:?}, requested {:?}",
                prev.layer_dims, layer_dims
            )));
        }
        let mut m = prev.clone();
        m.init_mode = InitMode::FineTune;
        return Ok(m);
    }

    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = seed::stream_rng(seed, Stream::Init, i as u64);
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            DenseLayer {
                inputs: fan_in,
                outputs: fan_out,
                weights,
                biases: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(FeatureModel {
        layer_dims: layer_dims.to_vec(),
        layers,
        seed,
        init_mode,
    })
}

impl FeatureModel {
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input width {} does not match model input {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let current = if l == 0 { inputs } else { &activations[l - 1] };
            let mut z = layer.affine(current);
            if l < last {
                for v in z.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(z);
        }
        let out = activations.last().expect("at least one layer").clone();
        Ok((out, ForwardCache { activations }))
    }

    /// Forward pass without keeping activations.
    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|(f, _)| f)
    }

    pub fn backward(
        &self,
        inputs: &Matrix,
        cache: &ForwardCache,
        d_features: &Matrix,
    ) -> Result<Gradients> {
        let n = inputs.rows();
        if d_features.rows() != n || d_features.cols() != self.output_dim() {
            return Err(Error::invalid("feature gradient shape does not match the batch"));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_features.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 {
                inputs
            } else {
                &cache.activations[l - 1]
            };
            let g = &mut grads.layers[l];
            for i in 0..n {
                let a = input.row(i);
                let d = delta.row(i);
                for (o, &dz) in d.iter().enumerate() {
                    if dz != 0.0 {
                        axpy(&mut g.weights[o * layer.inputs..(o + 1) * layer.inputs], dz, a);
                        g.biases[o] += dz;
                    }
                }
            }
            if l > 0 {
                let mut prev = layer.backprop_input(&delta);
                let act = &cache.activations[l - 1];
                for (p, a) in prev.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}
