//! Frozen backbones (a single linear layer or a two-layer linear chain),
//! sample batches, and the mean-squared-error surrogate loss with gradients
//! with respect to each layer's effective weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{matmul, matmul_nt, matmul_tn, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// `y = W x`.
    Single,
    /// `y = W₂ (W₁ x)`; hidden unit `j` couples row `j` of `W₁` with column
    /// `j` of `W₂`.
    Chain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight: DenseMatrix,
}

impl Layer {
    pub fn new(name: impl Into<String>, weight: DenseMatrix) -> Self {
        Self {
            name: name.into(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    topology: Topology,
    layers: Vec<Layer>,
}

impl Backbone {
    pub fn single(layer: Layer) -> Self {
        Self {
            topology: Topology::Single,
            layers: vec![layer],
        }
    }

    pub fn chain(first: Layer, second: Layer) -> Result<Self> {
        if second.weight.cols() != first.weight.rows() {
            return Err(Error::Shape {
                op: "chain backbone",
                left: first.weight.shape(),
                right: second.weight.shape(),
            });
        }
        if first.name == second.name {
            return Err(Error::Param(format!("duplicate layer name `{}`", first.name)));
        }
        Ok(Self {
            topology: Topology::Chain,
            layers: vec![first, second],
        })
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols()).sum()
    }

    pub fn weights(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().map(|l| &l.weight).collect()
    }

    /// Same topology and names, new weights of identical shapes.
    pub fn with_weights(&self, weights: Vec<DenseMatrix>) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(Error::Input(format!(
                "expected {} layer weights, got {}",
                self.layers.len(),
                weights.len()
            )));
        }
        let mut layers = Vec::with_capacity(weights.len());
        for (l, w) in self.layers.iter().zip(weights) {
            if w.shape() != l.weight.shape() {
                return Err(Error::Shape {
                    op: "with_weights",
                    left: l.weight.shape(),
                    right: w.shape(),
                });
            }
            layers.push(Layer::new(l.name.clone(), w));
        }
        Ok(Self {
            topology: self.topology,
            layers,
        })
    }

    /// Outputs for a batch of inputs stored one sample per row.
    pub fn forward(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        forward_weights(&self.weights(), inputs)
    }
}

pub(crate) fn forward_weights(weights: &[&DenseMatrix], inputs: &DenseMatrix) -> Result<DenseMatrix> {
    let mut h = inputs.clone();
    for w in weights {
        h = matmul_nt(&h, w)?;
    }
    Ok(h)
}

/// Samples stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, targets: DenseMatrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Shape {
                op: "batch",
                left: inputs.shape(),
                right: targets.shape(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Mean over samples of `‖prediction − target‖² / d_out`.
pub fn mse(predictions: &DenseMatrix, targets: &DenseMatrix) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Shape {
            op: "mse",
            left: predictions.shape(),
            right: targets.shape(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Accounting("mean squared error of an empty batch".into()));
    }
    let sq: f64 = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sq / predictions.data().len() as f64)
}

/// Loss and `∂L/∂W` for each weight in a linear chain `y = W_L ⋯ W_1 x`
/// (one or two layers in practice) under the MSE surrogate.
pub(crate) fn mse_weight_gradients(
    weights: &[&DenseMatrix],
    batch: &Batch,
) -> Result<(f64, Vec<DenseMatrix>)> {
    // Activations: acts[0] = X, acts[l+1] = acts[l] · W_lᵀ.
    let mut acts = Vec::with_capacity(weights.len() + 1);
    acts.push(batch.inputs.clone());
    for w in weights {
        let next = matmul_nt(acts.last().expect("nonempty"), w)?;
        acts.push(next);
    }
    let pred = acts.last().expect("nonempty");
    let loss = mse(pred, &batch.targets)?;
    let denom = pred.data().len() as f64;
    let mut upstream = pred.sub(&batch.targets)?.scale(2.0 / denom);

    let mut grads = vec![DenseMatrix::zeros(0, 0); weights.len()];
    for l in (0..weights.len()).rev() {
        grads[l] = matmul_tn(&upstream, &acts[l])?;
        if l > 0 {
            upstream = matmul(&upstream, weights[l])?;
        }
    }
    Ok((loss, grads))
}
