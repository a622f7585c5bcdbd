//! Parameter-owning layer types.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::ConvGeometry;
use crate::diffcore::tensor::Tensor;
use crate::mps::WeightQuant;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Conv1d<T> {
    pub geom: ConvGeometry,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    /// Index into the graph's prune masks gating the output channels.
    #[serde(default)]
    pub gate: Option<usize>,
    #[serde(default)]
    pub quant: Option<WeightQuant<T>>,
}

impl<T: Scalar> Conv1d<T> {
    /// Kaiming-uniform weights, zero bias.
    pub fn new<R: Rng>(geom: ConvGeometry, rng: &mut R) -> Self {
        let fan_in = geom.in_per_group() * geom.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            geom,
            weight: Tensor::uniform(&geom.weight_shape(), bound, rng),
            bias: Some(Tensor::zeros(&[geom.out_ch])),
            gate: None,
            quant: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.geom.weight_count() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    #[serde(default)]
    pub gate: Option<usize>,
    #[serde(default)]
    pub quant: Option<WeightQuant<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Tensor::uniform(&[out_features, in_features], bound, rng),
            bias: Some(Tensor::zeros(&[out_features])),
            gate: None,
            quant: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct BatchNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: T::of(1e-5),
            momentum: T::of(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct InstanceNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> InstanceNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            eps: T::of(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}
