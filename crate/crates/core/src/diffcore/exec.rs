//! Graph execution: forward pass with retained activations and the
//! reverse sweep that fills parameter gradients.

use crate::diffcore::graph::{Mode, ModelGraph, Op};
use crate::diffcore::kernels::{self as k, BatchNormParams, NormCache};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::mps::fakequant::{bias_codes, bias_dequant, pact_backward, pact_forward};
use crate::mps::{mix_weight, MixedWeight, WeightQuant};
use crate::nas::ChoiceCache;
use crate::pit::{ste_grad, PruneMask};
use crate::scalar::{softmax_backward, Scalar};

/// Per-channel gate source: `(mask index, slot)`.
pub(crate) type ChannelGate = Option<(usize, usize)>;

#[derive(Debug, Clone)]
pub(crate) struct WeightAux<T> {
    eff_w: Vec<T>,
    eff_b: Option<Vec<T>>,
    /// Gate value of every output row when the layer is masked.
    row_gates: Option<Vec<T>>,
    mixed: Option<MixedWeight<T>>,
}

#[derive(Debug, Clone)]
pub(crate) enum Aux<T> {
    None,
    Weighted(WeightAux<T>),
    Norm {
        cache: NormCache<T>,
        pre_gate: Option<Tensor<T>>,
    },
    MaxPool(Vec<usize>),
    Choice(ChoiceCache<T>),
    ActQuant(Vec<i64>),
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache<T> {
    outputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    gates: Vec<Vec<ChannelGate>>,
}

/// Channel gates of every node output (propagated from masked producers).
pub(crate) fn channel_gates<T: Scalar>(g: &ModelGraph<T>) -> Vec<Vec<ChannelGate>> {
    let mut out: Vec<Vec<ChannelGate>> = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let gates = match &node.op {
            Op::Input { channels, .. } => vec![None; *channels],
            Op::Conv(c) => own_gates(c.gate, c.geom.out_ch, &g.masks),
            Op::Linear(l) => own_gates(l.gate, l.out_features, &g.masks),
            Op::Choice(c) => vec![None; c.original.out_ch],
            Op::Concat => node.inputs.iter().flat_map(|&i| out[i].clone()).collect(),
            _ => out[node.inputs[0]].clone(),
        };
        out.push(gates);
    }
    out
}

fn own_gates<T: Scalar>(gate: Option<usize>, channels: usize, masks: &[PruneMask<T>]) -> Vec<ChannelGate> {
    match gate {
        Some(m) => (0..channels).map(|c| Some((m, masks[m].slot(c)))).collect(),
        None => vec![None; channels],
    }
}

/// Quantization scale of every node output that lies on an activation grid.
pub(crate) fn activation_scales<T: Scalar>(g: &ModelGraph<T>) -> Vec<Option<T>> {
    let mut out: Vec<Option<T>> = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let s = match &node.op {
            Op::ActQuant(a) => Some(a.scale()),
            Op::ReLU | Op::MaxPool { .. } | Op::Upsample { .. } | Op::Identity => out[node.inputs[0]],
            Op::AvgPool { kernel, .. } => out[node.inputs[0]].map(|s| s / T::of_usize(*kernel)),
            _ => None,
        };
        out.push(s);
    }
    out
}

fn gate_value<T: Scalar>(masks: &[PruneMask<T>], gate: ChannelGate) -> Option<T> {
    gate.map(|(m, s)| masks[m].gate_of_slot(s))
}

struct WeightRefs<'a, T> {
    weight: &'a Tensor<T>,
    bias: Option<&'a Tensor<T>>,
    gate: Option<usize>,
    quant: Option<&'a WeightQuant<T>>,
    rows: usize,
}

fn prepare_weights<T: Scalar>(
    w: WeightRefs<'_, T>,
    masks: &[PruneMask<T>],
    tau: T,
    input_scale: Option<T>,
    name: &str,
) -> Result<WeightAux<T>> {
    if w.gate.is_some() && w.quant.is_some() {
        return Err(Error::Unsupported {
            node: name.to_string(),
            detail: "a layer cannot be masked and quantized at the same time".into(),
        });
    }
    let per = w.weight.len() / w.rows;
    if let Some(m) = w.gate {
        let mask = &masks[m];
        let row_gates: Vec<T> = (0..w.rows).map(|r| mask.gate(r)).collect();
        let mut eff_w = w.weight.data().to_vec();
        for (r, &gv) in row_gates.iter().enumerate() {
            eff_w[r * per..(r + 1) * per].iter_mut().for_each(|v| *v *= gv);
        }
        let eff_b = w
            .bias
            .map(|b| b.data().iter().zip(&row_gates).map(|(&v, &g)| v * g).collect());
        return Ok(WeightAux {
            eff_w,
            eff_b,
            row_gates: Some(row_gates),
            mixed: None,
        });
    }
    if let Some(q) = w.quant {
        let mixed = mix_weight(w.weight.data(), q, tau);
        let eff_b = match (w.bias, &mixed.affine) {
            (Some(b), Some(aff)) => {
                let sx = input_scale.ok_or_else(|| {
                    Error::Graph(format!(
                        "quantized layer `{name}` does not read from an activation quantizer"
                    ))
                })?;
                let codes = bias_codes(b.data(), aff.code_step(), sx);
                Some(bias_dequant(&codes, aff.code_step(), sx))
            }
            (Some(b), None) => Some(b.data().to_vec()),
            (None, _) => None,
        };
        return Ok(WeightAux {
            eff_w: mixed.effective.clone(),
            eff_b,
            row_gates: None,
            mixed: Some(mixed),
        });
    }
    Ok(WeightAux {
        eff_w: w.weight.data().to_vec(),
        eff_b: w.bias.map(|b| b.data().to_vec()),
        row_gates: None,
        mixed: None,
    })
}

/// Maps effective-weight gradients back onto the stored parameters, mask
/// logits and precision logits.
#[allow(clippy::too_many_arguments)]
fn weights_backward<T: Scalar>(
    aux: &WeightAux<T>,
    weight: &mut Tensor<T>,
    bias: Option<&mut Tensor<T>>,
    quant: Option<&mut WeightQuant<T>>,
    gates: &[ChannelGate],
    mask_grads: &mut [Vec<T>],
    tau: T,
    gw_eff: Vec<T>,
    gb_eff: Vec<T>,
) {
    let rows = gb_eff.len();
    let per = weight.len() / rows;
    match &aux.row_gates {
        Some(rg) => {
            let mut gw = gw_eff;
            for r in 0..rows {
                let mut dm = T::zero();
                for i in r * per..(r + 1) * per {
                    dm += gw[i] * weight.data()[i];
                    gw[i] *= rg[r];
                }
                if let Some(b) = &bias {
                    dm += gb_eff[r] * b.data()[r];
                }
                if let Some((m, s)) = gates[r] {
                    mask_grads[m][s] += dm;
                }
            }
            weight.accumulate_grad(&gw);
            if let Some(b) = bias {
                let gb: Vec<T> = gb_eff.iter().zip(rg).map(|(&g, &m)| g * m).collect();
                b.accumulate_grad(&gb);
            }
        }
        None => {
            if let (
                Some(q),
                Some(MixedWeight {
                    mixture: Some((probs, variants)),
                    ..
                }),
            ) = (quant, &aux.mixed)
            {
                let gp: Vec<T> = variants
                    .iter()
                    .map(|v| v.iter().zip(&gw_eff).map(|(&a, &g)| a * g).sum())
                    .collect();
                q.theta.accumulate_grad(&softmax_backward(probs, &gp, tau));
            }
            weight.accumulate_grad(&gw_eff);
            if let Some(b) = bias {
                b.accumulate_grad(&gb_eff);
            }
        }
    }
}

fn apply_gates<T: Scalar>(y: &mut Tensor<T>, gates: &[ChannelGate], masks: &[PruneMask<T>]) {
    let (n, c, l) = y.dims3();
    for b in 0..n {
        for ch in 0..c {
            if let Some(m) = gate_value(masks, gates[ch]) {
                y.data_mut()[(b * c + ch) * l..(b * c + ch + 1) * l]
                    .iter_mut()
                    .for_each(|v| *v *= m);
            }
        }
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Runs the graph on a `(batch, channels, length)` input, retaining
    /// activations for [`ModelGraph::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (ic, il) = self.input_shape();
        let (_, c, l) = x.dims3();
        if c != ic || l != il {
            return Err(Error::Shape {
                node: self.nodes[0].name.clone(),
                detail: format!("expected input ({ic}, {il}), got ({c}, {l})"),
            });
        }
        let (n, _, _) = x.dims3();
        let x = x.clone().reshaped(&[n, c, l])?;
        let gates = channel_gates(self);
        let scales = activation_scales(self);
        let ModelGraph { nodes, masks, tau, .. } = self;
        let tau = *tau;
        let training = mode == Mode::Train;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(nodes.len());
        let mut aux: Vec<Aux<T>> = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter_mut().enumerate() {
            let name = node.name.clone();
            let inp = |k: usize| &outputs[node.inputs[k]];
            let (y, a) = match &mut node.op {
                Op::Input { .. } => (x.clone(), Aux::None),
                Op::Conv(c) => {
                    let wa = prepare_weights(
                        WeightRefs {
                            weight: &c.weight,
                            bias: c.bias.as_ref(),
                            gate: c.gate,
                            quant: c.quant.as_ref(),
                            rows: c.geom.out_ch,
                        },
                        masks,
                        tau,
                        scales[node.inputs[0]],
                        &name,
                    )?;
                    let y = k::conv1d_forward(inp(0), &wa.eff_w, wa.eff_b.as_deref(), &c.geom);
                    (y, Aux::Weighted(wa))
                }
                Op::Linear(lin) => {
                    let wa = prepare_weights(
                        WeightRefs {
                            weight: &lin.weight,
                            bias: lin.bias.as_ref(),
                            gate: lin.gate,
                            quant: lin.quant.as_ref(),
                            rows: lin.out_features,
                        },
                        masks,
                        tau,
                        scales[node.inputs[0]],
                        &name,
                    )?;
                    let y = k::linear_forward(inp(0), &wa.eff_w, wa.eff_b.as_deref(), lin.out_features);
                    (y, Aux::Weighted(wa))
                }
                Op::ReLU => (k::relu_forward(inp(0)), Aux::None),
                Op::PReLU { slope } => (k::prelu_forward(inp(0), slope.data()), Aux::None),
                Op::BatchNorm(bn) => {
                    let (mut y, cache) = k::batchnorm_forward(
                        inp(0),
                        BatchNormParams {
                            gamma: bn.gamma.data(),
                            beta: bn.beta.data(),
                            running_mean: bn.running_mean.data_mut(),
                            running_var: bn.running_var.data_mut(),
                            eps: bn.eps,
                            momentum: bn.momentum,
                        },
                        training,
                    );
                    let pre_gate = if gates[id].iter().any(Option::is_some) {
                        let pre = y.clone();
                        apply_gates(&mut y, &gates[id], masks);
                        Some(pre)
                    } else {
                        None
                    };
                    (y, Aux::Norm { cache, pre_gate })
                }
                Op::InstanceNorm(inorm) => {
                    let (mut y, cache) =
                        k::instancenorm_forward(inp(0), inorm.gamma.data(), inorm.beta.data(), inorm.eps);
                    let pre_gate = if gates[id].iter().any(Option::is_some) {
                        let pre = y.clone();
                        apply_gates(&mut y, &gates[id], masks);
                        Some(pre)
                    } else {
                        None
                    };
                    (y, Aux::Norm { cache, pre_gate })
                }
                Op::MaxPool { kernel, stride } => {
                    let (y, arg) = k::maxpool_forward(inp(0), *kernel, *stride);
                    (y, Aux::MaxPool(arg))
                }
                Op::AvgPool { kernel, stride } => (k::avgpool_forward(inp(0), *kernel, *stride), Aux::None),
                Op::Upsample { factor } => (k::upsample_forward(inp(0), *factor), Aux::None),
                Op::Add => {
                    let mut y = inp(0).clone();
                    for j in 1..node.inputs.len() {
                        let other = &outputs[node.inputs[j]];
                        if other.shape() != y.shape() {
                            return Err(Error::Shape {
                                node: name,
                                detail: format!("add operands {:?} and {:?}", y.shape(), other.shape()),
                            });
                        }
                        y.data_mut().iter_mut().zip(other.data()).for_each(|(a, &b)| *a += b);
                    }
                    (y, Aux::None)
                }
                Op::Concat => {
                    let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &outputs[i]).collect();
                    (k::concat_forward(&xs), Aux::None)
                }
                Op::Identity => (inp(0).clone(), Aux::None),
                Op::Choice(ch) => {
                    let (y, cache) = ch.forward(inp(0)).map_err(|detail| Error::Shape {
                        node: name.clone(),
                        detail,
                    })?;
                    (y, Aux::Choice(cache))
                }
                Op::ActQuant(aq) => {
                    let (yv, codes) = pact_forward(inp(0).data(), aq.alpha(), aq.bits);
                    let y = Tensor::from_vec(inp(0).shape(), yv)?;
                    (y, Aux::ActQuant(codes))
                }
            };
            outputs.push(y);
            aux.push(a);
        }
        let out = outputs[self.output].clone();
        self.cache = Some(ForwardCache { outputs, aux, gates });
        if !out.is_finite() {
            return Err(Error::NonFinite(format!(
                "forward output of `{}`",
                self.nodes[self.output].name
            )));
        }
        Ok(out)
    }

    /// Reverse sweep from the output gradient. Accumulates gradients into
    /// every parameter (including mask, choice and precision logits and clip
    /// bounds) and returns the gradient with respect to the graph input.
    pub fn backward(&mut self, loss_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForward)?;
        let result = self.backward_with(&cache, loss_grad);
        self.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &ForwardCache<T>, loss_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = cache.outputs[self.output].shape();
        if loss_grad.len() != cache.outputs[self.output].len() {
            return Err(Error::Shape {
                node: self.nodes[self.output].name.clone(),
                detail: format!("loss gradient {:?} vs output {:?}", loss_grad.shape(), out_shape),
            });
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
        grads[self.output] = Some(loss_grad.clone().reshaped(out_shape)?);
        let mut mask_grads: Vec<Vec<T>> = self.masks.iter().map(|m| vec![T::zero(); m.slots()]).collect();
        let tau = self.tau;
        let mut input_grad = Tensor::zeros(cache.outputs[0].shape());

        fn add_to<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                None => *slot = Some(g),
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
            }
        }

        for id in (0..n_nodes).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut self.nodes[id];
            let inputs = node.inputs.clone();
            let x = |k: usize| &cache.outputs[inputs[k]];
            let in_grads: Vec<Tensor<T>> = match (&mut node.op, &cache.aux[id]) {
                (Op::Input { .. }, _) => {
                    input_grad = g;
                    continue;
                }
                (Op::Conv(c), Aux::Weighted(wa)) => {
                    let (gx, gw, gb) = k::conv1d_backward(x(0), &wa.eff_w, &g, &c.geom);
                    weights_backward(
                        wa,
                        &mut c.weight,
                        c.bias.as_mut(),
                        c.quant.as_mut(),
                        &cache.gates[id],
                        &mut mask_grads,
                        tau,
                        gw,
                        gb,
                    );
                    vec![gx]
                }
                (Op::Linear(l), Aux::Weighted(wa)) => {
                    let (gx, gw, gb) = k::linear_backward(x(0), &wa.eff_w, &g, l.out_features);
                    weights_backward(
                        wa,
                        &mut l.weight,
                        l.bias.as_mut(),
                        l.quant.as_mut(),
                        &cache.gates[id],
                        &mut mask_grads,
                        tau,
                        gw,
                        gb,
                    );
                    vec![gx]
                }
                (Op::ReLU, _) => vec![k::relu_backward(x(0), &g)],
                (Op::PReLU { slope }, _) => {
                    let (gx, gs) = k::prelu_backward(x(0), slope.data(), &g);
                    slope.accumulate_grad(&gs);
                    vec![gx]
                }
                (Op::BatchNorm(bn), Aux::Norm { cache: nc, pre_gate }) => {
                    let g = ungate(g, pre_gate.as_ref(), &cache.gates[id], &self.masks, &mut mask_grads);
                    let (gx, gg, gb) = k::batchnorm_backward(nc, bn.gamma.data(), &g);
                    bn.gamma.accumulate_grad(&gg);
                    bn.beta.accumulate_grad(&gb);
                    vec![gx]
                }
                (Op::InstanceNorm(inorm), Aux::Norm { cache: nc, pre_gate }) => {
                    let g = ungate(g, pre_gate.as_ref(), &cache.gates[id], &self.masks, &mut mask_grads);
                    let (gx, gg, gb) = k::instancenorm_backward(nc, inorm.gamma.data(), &g);
                    inorm.gamma.accumulate_grad(&gg);
                    inorm.beta.accumulate_grad(&gb);
                    vec![gx]
                }
                (Op::MaxPool { .. }, Aux::MaxPool(arg)) => vec![k::maxpool_backward(x(0).shape(), arg, &g)],
                (Op::AvgPool { kernel, stride }, _) => {
                    vec![k::avgpool_backward(x(0).shape(), *kernel, *stride, &g)]
                }
                (Op::Upsample { factor }, _) => vec![k::upsample_backward(x(0).shape(), *factor, &g)],
                (Op::Add, _) => vec![g; inputs.len()],
                (Op::Concat, _) => {
                    let chans: Vec<usize> = inputs.iter().map(|&i| cache.outputs[i].dims3().1).collect();
                    k::concat_backward(&chans, &g)
                }
                (Op::Identity, _) => vec![g],
                (Op::Choice(ch), Aux::Choice(cc)) => vec![ch.backward(cc, &g)],
                (Op::ActQuant(aq), Aux::ActQuant(codes)) => {
                    let (gx, ga) = pact_backward(x(0).data(), codes, aq.alpha(), aq.bits, g.data());
                    aq.alpha.accumulate_grad(&[ga]);
                    vec![Tensor::from_vec(x(0).shape(), gx)?]
                }
                _ => return Err(Error::Graph(format!("stale forward cache at `{}`", node.name))),
            };
            for (&i, gi) in inputs.iter().zip(in_grads) {
                add_to(&mut grads[i], gi);
            }
        }
        for (m, dm) in self.masks.iter_mut().zip(mask_grads) {
            let gt: Vec<T> = m.theta.data().iter().zip(&dm).map(|(&t, &d)| d * ste_grad(t)).collect();
            m.theta.accumulate_grad(&gt);
        }
        Ok(input_grad)
    }
}

/// Backward through output gating of a normalization layer: records the
/// gate gradient and returns the gradient of the ungated output.
fn ungate<T: Scalar>(
    mut g: Tensor<T>,
    pre_gate: Option<&Tensor<T>>,
    gates: &[ChannelGate],
    masks: &[PruneMask<T>],
    mask_grads: &mut [Vec<T>],
) -> Tensor<T> {
    let Some(pre) = pre_gate else { return g };
    let (n, c, l) = g.dims3();
    for ch in 0..c {
        let Some((m, s)) = gates[ch] else { continue };
        let gv = masks[m].gate_of_slot(s);
        let mut dm = T::zero();
        for b in 0..n {
            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                dm += g.data()[i] * pre.data()[i];
                g.data_mut()[i] *= gv;
            }
        }
        mask_grads[m][s] += dm;
    }
    g
}
