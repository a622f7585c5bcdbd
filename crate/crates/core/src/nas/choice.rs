use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{conv1d_backward, conv1d_forward, ConvGeometry};
use crate::diffcore::layers::Conv1d;
use crate::diffcore::tensor::Tensor;
use crate::scalar::{softmax, softmax_backward, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AltKind {
    /// Standard convolution with the original geometry.
    Conv,
    /// Depthwise convolution followed by a pointwise 1x1 convolution.
    DepthwiseSeparable,
    Identity,
}

impl AltKind {
    pub fn tag(self) -> &'static str {
        match self {
            AltKind::Conv => "C",
            AltKind::DepthwiseSeparable => "DW",
            AltKind::Identity => "ID",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Alternative<T> {
    pub kind: AltKind,
    /// Applied in sequence; empty for the identity path.
    pub convs: Vec<Conv1d<T>>,
}

impl<T: Scalar> Alternative<T> {
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv1d::param_count).sum()
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for c in &self.convs {
            let y = conv1d_forward(&cur, c.weight.data(), c.bias.as_ref().map(|b| b.data()), &c.geom);
            inputs.push(std::mem::replace(&mut cur, y));
        }
        (cur, inputs)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, inputs: &[Tensor<T>], grad_out: Tensor<T>) -> Tensor<T> {
        let mut g = grad_out;
        for (c, x) in self.convs.iter_mut().zip(inputs).rev() {
            let (gx, gw, gb) = conv1d_backward(x, c.weight.data(), &g, &c.geom);
            c.weight.accumulate_grad(&gw);
            if let Some(b) = &mut c.bias {
                b.accumulate_grad(&gb);
            }
            g = gx;
        }
        g
    }
}

/// One architecture decision site: the weighted sum of its alternatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ChoiceLayer<T> {
    pub site: usize,
    /// Geometry of the seed convolution this site replaced.
    pub original: ConvGeometry,
    pub alternatives: Vec<Alternative<T>>,
    pub theta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ChoiceCache<T> {
    pub probs: Vec<T>,
    pub outputs: Vec<Tensor<T>>,
    pub inputs: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ChoiceLayer<T> {
    pub fn probs(&self) -> Vec<T> {
        softmax(self.theta.data(), T::one())
    }

    pub fn costs(&self) -> Vec<usize> {
        self.alternatives.iter().map(Alternative::param_count).collect()
    }

    /// Expected parameter count under `softmax(theta)`.
    pub fn expected_cost(&self) -> T {
        self.probs()
            .iter()
            .zip(self.costs())
            .map(|(&p, c)| p * T::of_usize(c))
            .sum()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ChoiceCache<T>), String> {
        let probs = self.probs();
        let mut outputs = Vec::with_capacity(self.alternatives.len());
        let mut inputs = Vec::with_capacity(self.alternatives.len());
        for alt in &self.alternatives {
            let (y, ins) = alt.forward(x);
            outputs.push(y);
            inputs.push(ins);
        }
        let shape = outputs[0].shape().to_vec();
        if let Some(bad) = outputs.iter().position(|o| o.shape() != shape.as_slice()) {
            return Err(format!(
                "alternative {} ({}) produces {:?}, expected {:?}",
                bad,
                self.alternatives[bad].kind.tag(),
                outputs[bad].shape(),
                shape
            ));
        }
        let mut y = Tensor::zeros(&shape);
        for (p, o) in probs.iter().zip(&outputs) {
            for (a, &b) in y.data_mut().iter_mut().zip(o.data()) {
                *a += *p * b;
            }
        }
        Ok((y, ChoiceCache { probs, outputs, inputs }))
    }

    /// Accumulates gradients for every alternative and for `theta`.
    pub fn backward(&mut self, cache: &ChoiceCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g_probs = Vec::with_capacity(self.alternatives.len());
        let mut gx: Option<Tensor<T>> = None;
        for (j, alt) in self.alternatives.iter_mut().enumerate() {
            let dot: T = grad_out
                .data()
                .iter()
                .zip(cache.outputs[j].data())
                .map(|(&g, &y)| g * y)
                .sum();
            g_probs.push(dot);
            let mut gj = grad_out.clone();
            gj.data_mut().iter_mut().for_each(|v| *v *= cache.probs[j]);
            let gin = alt.backward(&cache.inputs[j], gj);
            match &mut gx {
                None => gx = Some(gin),
                Some(acc) => acc.data_mut().iter_mut().zip(gin.data()).for_each(|(a, &b)| *a += b),
            }
        }
        let g_theta = softmax_backward(&cache.probs, &g_probs, T::one());
        self.theta.accumulate_grad(&g_theta);
        gx.expect("choice layer has alternatives")
    }
}
