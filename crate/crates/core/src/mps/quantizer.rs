use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::mps::fakequant::{fake_quant_minmax, AffineParams};
use crate::scalar::{softmax, Scalar};

/// Precision choice for one weight tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct WeightQuant<T> {
    pub bits: Vec<u32>,
    pub theta: Tensor<T>,
    /// Set once the search is over; the layer then uses exactly this width.
    pub frozen: Option<u32>,
}

impl<T: Scalar> WeightQuant<T> {
    /// Uniform initialization over `bits`.
    pub fn new(bits: &[u32]) -> Self {
        Self {
            bits: bits.to_vec(),
            theta: Tensor::zeros(&[bits.len()]),
            frozen: None,
        }
    }

    pub fn probs(&self, tau: T) -> Vec<T> {
        softmax(self.theta.data(), tau)
    }

    /// Bit-width with the largest theta (lowest index on ties).
    pub fn argmax_bits(&self) -> u32 {
        self.bits[crate::scalar::argmax(self.theta.data())]
    }

    /// Expected bit-width under the current distribution, or the frozen width.
    pub fn expected_bits(&self, tau: T) -> T {
        match self.frozen {
            Some(b) => T::of(b as f64),
            None => self
                .probs(tau)
                .iter()
                .zip(&self.bits)
                .map(|(&p, &b)| p * T::of(b as f64))
                .sum(),
        }
    }
}

/// Result of mixing the fake-quantized variants of one weight tensor.
#[derive(Debug, Clone)]
pub struct MixedWeight<T> {
    pub effective: Vec<T>,
    /// `(probabilities, variants)` while searching; `None` when frozen.
    pub mixture: Option<(Vec<T>, Vec<Vec<T>>)>,
    pub affine: Option<AffineParams<T>>,
}

pub fn mix_weight<T: Scalar>(w: &[T], q: &WeightQuant<T>, tau: T) -> MixedWeight<T> {
    match q.frozen {
        Some(b) => MixedWeight {
            effective: fake_quant_minmax(w, b),
            mixture: None,
            affine: Some(AffineParams::of(w, b)),
        },
        None => {
            let probs = q.probs(tau);
            let variants: Vec<Vec<T>> = q.bits.iter().map(|&b| fake_quant_minmax(w, b)).collect();
            let mut eff = vec![T::zero(); w.len()];
            for (p, v) in probs.iter().zip(&variants) {
                for (e, &x) in eff.iter_mut().zip(v) {
                    *e += *p * x;
                }
            }
            MixedWeight {
                effective: eff,
                mixture: Some((probs, variants)),
                affine: None,
            }
        }
    }
}

/// Signed clipped activation quantizer node state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ActQuant<T> {
    pub alpha: Tensor<T>,
    pub bits: u32,
}

impl<T: Scalar> ActQuant<T> {
    pub fn new(alpha: T, bits: u32) -> Self {
        Self {
            alpha: Tensor::scalar(alpha),
            bits,
        }
    }

    pub fn alpha(&self) -> T {
        self.alpha.data()[0]
    }

    pub fn scale(&self) -> T {
        crate::mps::fakequant::act_scale(self.alpha(), self.bits)
    }
}
