use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rand::Rng;

use super::tape::{NodeId, ParamId, ParamStore, Tape};
use super::{linalg, Tensor};
use crate::error::{shape_err, Error, Result};

/// Nonlinearity applied between MLP layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

/// One affine layer, `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.shape()[1] {
            return Err(shape_err!("affine layer weight {:?} does not match bias {:?}", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.output_dim();
        let mut y = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            linalg::axpy(xi, &self.weight.data()[i * cols..(i + 1) * cols], &mut y);
        }
        y
    }
}

/// A `t`-layer perceptron. With `t == 0` it is the identity map.
///
/// The activation is applied between layers; after the last layer only when
/// `activate_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Affine>,
    activation: Activation,
    activate_output: bool,
}

impl MlpParams {
    pub fn identity() -> Self {
        Self { layers: Vec::new(), activation: Activation::Identity, activate_output: false }
    }

    pub fn new(layers: Vec<Affine>, activation: Activation) -> Result<Self> {
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(shape_err!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                ));
            }
        }
        Ok(Self { layers, activation, activate_output: false })
    }

    pub fn with_output_activation(mut self, on: bool) -> Self {
        self.activate_output = on;
        self
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn activates_output(&self) -> bool {
        self.activate_output
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Affine::input_dim)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(Affine::output_dim)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Some(n) = self.input_dim() {
            if n != x.len() {
                return Err(shape_err!("MLP expects input of length {n}, got {}", x.len()));
            }
        }
        let mut h = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if k < last || self.activate_output {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h)
    }
}

/// Parameter handles of an MLP recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    activation: Activation,
    activate_output: bool,
}

impl Mlp {
    /// Registers `dims.len() - 1` affine layers named `{name}.{k}.w` / `{name}.{k}.b`.
    /// Weights are Glorot-uniform, biases zero. `dims = [d]` gives the identity.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, io)| {
                let bound = (6.0 / (io[0] + io[1]) as f64).sqrt();
                let w = store.add(format!("{name}.{k}.w"), Tensor::uniform(&[io[0], io[1]], bound, rng));
                let b = store.add(format!("{name}.{k}.b"), Tensor::zeros(&[io[1]]));
                (w, b)
            })
            .collect();
        Self { layers, activation, activate_output: false }
    }

    pub fn with_output_activation(mut self, on: bool) -> Self {
        self.activate_output = on;
        self
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Applies the MLP to every row of `x`.
    pub fn apply(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (wn, bn) = (tape.param(w), tape.param(b));
            h = tape.matmul(h, wn)?;
            h = tape.add_bias(h, bn)?;
            if k < last || self.activate_output {
                h = tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }

    /// Snapshot of the current values as a standalone [`MlpParams`].
    pub fn params(&self, store: &ParamStore) -> MlpParams {
        let layers = self
            .layers
            .iter()
            .map(|&(w, b)| Affine { weight: store.get(w).clone(), bias: store.get(b).clone() })
            .collect();
        MlpParams { layers, activation: self.activation, activate_output: self.activate_output }
    }
}
