use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Trainable output-channel mask. Channel `c` is gated by slot
/// `c % slots`, so for grouped producers the same slot covers the
/// corresponding channel of every group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PruneMask<T> {
    pub theta: Tensor<T>,
    pub channels: usize,
    pub frozen: bool,
}

impl<T: Scalar> PruneMask<T> {
    /// All-keep initialization (`theta = +1`).
    pub fn new(channels: usize, slots: usize) -> Self {
        assert!(slots > 0 && channels.is_multiple_of(slots));
        Self {
            theta: Tensor::full(&[slots], T::one()),
            channels,
            frozen: false,
        }
    }

    pub fn slots(&self) -> usize {
        self.theta.len()
    }

    pub fn slot(&self, channel: usize) -> usize {
        channel % self.slots()
    }

    /// Binarized gate `H(theta)` with `H(0) = 1`.
    pub fn gate_of_slot(&self, slot: usize) -> T {
        heaviside(self.theta.data()[slot])
    }

    pub fn gate(&self, channel: usize) -> T {
        self.gate_of_slot(self.slot(channel))
    }

    pub fn kept_channels(&self) -> Vec<usize> {
        (0..self.channels).filter(|&c| self.gate(c) == T::one()).collect()
    }

    pub fn kept_slots(&self) -> usize {
        (0..self.slots()).filter(|&s| self.gate_of_slot(s) == T::one()).count()
    }
}

pub fn heaviside<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Straight-through surrogate derivative: clamped identity on `[-1, 1]`.
pub fn ste_grad<T: Scalar>(t: T) -> T {
    if t.abs() <= T::one() {
        T::one()
    } else {
        T::zero()
    }
}
