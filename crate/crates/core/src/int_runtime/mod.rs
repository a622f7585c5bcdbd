//! Integer-only inference for networks exported from fake-quantized training.
//!
//! Every conv/linear is fused with the activation quantizer that follows it:
//! `code = clamp(round((acc_w + bias - zp_w * acc_x) * M))` with two int32
//! accumulators (`acc_w = sum(q_w * q_x)`, `acc_x = sum(q_x)`) and
//! `M = scale_w * scale_x / scale_out`. Adds and concats requantize their
//! operands onto the output grid. Rounding is half-away-from-zero, the rule
//! shared with fake quantization.

mod pack;

pub use pack::{packed_len, PackedWeights, SUPPORTED_BITS};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::exec::activation_scales;
use crate::diffcore::kernels::pool_out_len;
use crate::diffcore::{ConvGeometry, ModelGraph, Op, Tensor};
use crate::error::{Error, Result};
use crate::mps::fakequant::{act_qmax, act_qmin, act_scale, bias_codes, pact_code, AffineParams};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"PPGQ";
pub const FORMAT_VERSION: u32 = 1;

/// Quantized weights of one conv/linear fused with its output quantizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntLayer {
    pub bits_w: u32,
    pub rows: usize,
    pub n_weights: usize,
    pub scale_w: f64,
    pub zp_w: f64,
    pub scale_x: f64,
    pub alpha: f64,
    pub out_bits: u32,
    pub scale_out: f64,
    pub has_bias: bool,
    #[serde(skip)]
    pub weights: PackedWeights,
    #[serde(skip)]
    pub bias: Vec<i32>,
}

impl IntLayer {
    fn multiplier(&self) -> f64 {
        self.scale_w * self.scale_x / self.scale_out
    }

    fn requant(&self, acc_w: i32, acc_x: i32, bias: i32) -> i32 {
        let v = (acc_w as f64 + bias as f64 - self.zp_w * acc_x as f64) * self.multiplier();
        clamp_code(v.round(), self.out_bits)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntOp {
    Input {
        alpha: f64,
        bits: u32,
    },
    Conv {
        geom: ConvGeometry,
        layer: IntLayer,
    },
    Linear {
        in_features: usize,
        layer: IntLayer,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Sums codes; the output scale is the input scale over `kernel`.
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    Identity,
    Add {
        alpha: f64,
        bits: u32,
    },
    Concat {
        alpha: f64,
        bits: u32,
    },
    Requant {
        alpha: f64,
        bits: u32,
    },
}

impl IntOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            IntOp::Input { .. } => "input",
            IntOp::Conv { .. } => "conv1d",
            IntOp::Linear { .. } => "linear",
            IntOp::Relu => "relu",
            IntOp::MaxPool { .. } => "maxpool",
            IntOp::AvgPool { .. } => "avgpool",
            IntOp::Upsample { .. } => "upsample",
            IntOp::Identity => "identity",
            IntOp::Add { .. } => "add",
            IntOp::Concat { .. } => "concat",
            IntOp::Requant { .. } => "requant",
        }
    }

    pub fn layer(&self) -> Option<&IntLayer> {
        match self {
            IntOp::Conv { layer, .. } | IntOp::Linear { layer, .. } => Some(layer),
            _ => None,
        }
    }

    fn layer_mut(&mut self) -> Option<&mut IntLayer> {
        match self {
            IntOp::Conv { layer, .. } | IntOp::Linear { layer, .. } => Some(layer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntNode {
    pub name: String,
    pub op: IntOp,
    pub inputs: Vec<usize>,
    /// Real value of one output code.
    pub scale: f64,
    /// Bound on `|code|` of the output.
    pub max_code: i64,
    pub channels: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub nodes: Vec<IntNode>,
    pub output: usize,
}

/// Per-layer quantization parameters listed in the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: usize,
    pub kind: String,
    pub bits_w: u32,
    pub scale_w: f64,
    pub zp_w: f64,
    pub scale_x: f64,
    pub alpha: f64,
    pub scale_out: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layers: Vec<LayerEntry>,
    graph: QuantizedModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub weight_bytes: usize,
    pub bias_bytes: usize,
    /// One f32 per stored scale, zero point or requantization multiplier.
    pub scale_bytes: usize,
    pub total_bytes: usize,
}

fn clamp_code(v: f64, bits: u32) -> i32 {
    v.max(act_qmin(bits) as f64).min(act_qmax(bits) as f64) as i32
}

fn requant_code(code: i32, ratio: f64, bits: u32) -> i32 {
    clamp_code((code as f64 * ratio).round(), bits)
}

fn half(bits: u32) -> i64 {
    1i64 << (bits - 1)
}

fn check_i32(name: &str, bound: i64, what: &str) -> Result<()> {
    if bound > i32::MAX as i64 {
        return Err(Error::Unsupported {
            node: name.to_string(),
            detail: format!("{what} bound {bound} overflows int32"),
        });
    }
    Ok(())
}

struct WeightView<'a, T> {
    name: &'a str,
    weight: &'a [T],
    bias: Option<&'a [T]>,
    rows: usize,
    fan_in: usize,
    gate: Option<usize>,
    quant: Option<&'a crate::mps::WeightQuant<T>>,
}

fn export_layer<T: Scalar>(
    w: WeightView<'_, T>,
    sx_t: T,
    input: &IntNode,
    aq: &crate::mps::ActQuant<T>,
) -> Result<IntLayer> {
    let unsupported = |detail: &str| Error::Unsupported {
        node: w.name.to_string(),
        detail: detail.to_string(),
    };
    if w.gate.is_some() {
        return Err(unsupported("pruning masks must be exported before quantization"));
    }
    let q = w.quant.ok_or_else(|| unsupported("layer has no weight quantizer"))?;
    let bits = q
        .frozen
        .ok_or_else(|| unsupported("precision is still being searched; freeze it first"))?;
    let aff = AffineParams::of(w.weight, bits);
    let codes: Vec<u32> = w.weight.iter().map(|&v| aff.code(v)).collect();
    let bias = match w.bias {
        Some(b) => bias_codes(b, aff.code_step(), sx_t)
            .into_iter()
            .map(|c| i32::try_from(c).map_err(|_| unsupported(&format!("bias code {c} overflows int32"))))
            .collect::<Result<Vec<i32>>>()?,
        None => Vec::new(),
    };
    let max_bias = bias.iter().map(|&b| (b as i64).abs()).max().unwrap_or(0);
    let fan = w.fan_in as i64;
    check_i32(
        w.name,
        fan * ((1i64 << bits) - 1) * input.max_code + max_bias,
        "weight accumulator",
    )?;
    check_i32(w.name, fan * input.max_code, "input-sum accumulator")?;
    Ok(IntLayer {
        bits_w: bits,
        rows: w.rows,
        n_weights: codes.len(),
        scale_w: aff.code_step().as_f64(),
        zp_w: aff.zero_point().as_f64(),
        scale_x: input.scale,
        alpha: aq.alpha().as_f64(),
        out_bits: aq.bits,
        scale_out: aq.scale().as_f64(),
        has_bias: w.bias.is_some(),
        weights: PackedWeights::pack(&codes, bits)?,
        bias,
    })
}

impl QuantizedModel {
    /// Converts a frozen fake-quantized graph to its integer form. Every
    /// conv, linear, add and concat must feed exactly one activation
    /// quantizer, every weight layer needs a frozen bit-width, and no
    /// pruning masks, choices or normalization layers may remain.
    pub fn from_graph<T: Scalar>(g: &ModelGraph<T>) -> Result<Self> {
        if g.has_choices() {
            return Err(Error::Unsupported {
                node: "graph".into(),
                detail: "architecture choices must be extracted first".into(),
            });
        }
        let shapes = g.infer_shapes()?;
        let scales_t = activation_scales(g);
        let mut map: Vec<Option<usize>> = vec![None; g.nodes.len()];
        let mut nodes: Vec<IntNode> = Vec::new();
        let fused = |id: usize| -> Option<usize> {
            let cons = g.consumers(id);
            match cons.as_slice() {
                [a] if matches!(g.nodes[*a].op, Op::ActQuant(_)) && id != g.output => Some(*a),
                _ => None,
            }
        };
        for (id, node) in g.nodes.iter().enumerate() {
            let name = node.name.as_str();
            let unsupported = |detail: String| Error::Unsupported {
                node: name.to_string(),
                detail,
            };
            let mapped = |k: usize| -> Result<usize> {
                map[node.inputs[k]].ok_or_else(|| Error::Graph(format!("`{name}` reads an unexported node")))
            };
            let (c, l) = shapes[id];
            match &node.op {
                Op::Input { .. } | Op::Conv(_) | Op::Linear(_) | Op::Add | Op::Concat => {
                    if fused(id).is_none() {
                        return Err(unsupported(format!(
                            "{} output must feed exactly one activation quantizer",
                            node.op.kind_name()
                        )));
                    }
                }
                Op::ActQuant(aq) => {
                    let src = node.inputs[0];
                    let s_out = aq.scale().as_f64();
                    let (alpha, bits) = (aq.alpha().as_f64(), aq.bits);
                    let src_node = &g.nodes[src];
                    let fuse = fused(src) == Some(id);
                    let out_name = src_node.name.clone();
                    let op = match (&src_node.op, fuse) {
                        (Op::Input { .. }, true) => (IntOp::Input { alpha, bits }, vec![]),
                        (Op::Conv(cv), true) => {
                            let inp = map[src_node.inputs[0]]
                                .ok_or_else(|| Error::Graph(format!("`{out_name}` reads an unexported node")))?;
                            let sx = scales_t[src_node.inputs[0]]
                                .ok_or_else(|| unsupported("conv input is not quantized".into()))?;
                            let layer = export_layer(
                                WeightView {
                                    name: &out_name,
                                    weight: cv.weight.data(),
                                    bias: cv.bias.as_ref().map(|b| b.data()),
                                    rows: cv.geom.out_ch,
                                    fan_in: cv.geom.in_per_group() * cv.geom.kernel,
                                    gate: cv.gate,
                                    quant: cv.quant.as_ref(),
                                },
                                sx,
                                &nodes[inp],
                                aq,
                            )?;
                            (IntOp::Conv { geom: cv.geom, layer }, vec![inp])
                        }
                        (Op::Linear(lin), true) => {
                            let inp = map[src_node.inputs[0]]
                                .ok_or_else(|| Error::Graph(format!("`{out_name}` reads an unexported node")))?;
                            let sx = scales_t[src_node.inputs[0]]
                                .ok_or_else(|| unsupported("linear input is not quantized".into()))?;
                            let layer = export_layer(
                                WeightView {
                                    name: &out_name,
                                    weight: lin.weight.data(),
                                    bias: lin.bias.as_ref().map(|b| b.data()),
                                    rows: lin.out_features,
                                    fan_in: lin.in_features,
                                    gate: lin.gate,
                                    quant: lin.quant.as_ref(),
                                },
                                sx,
                                &nodes[inp],
                                aq,
                            )?;
                            (
                                IntOp::Linear {
                                    in_features: lin.in_features,
                                    layer,
                                },
                                vec![inp],
                            )
                        }
                        (Op::Add, true) | (Op::Concat, true) => {
                            let ins = src_node
                                .inputs
                                .iter()
                                .map(|&i| {
                                    map[i].ok_or_else(|| Error::Graph(format!("`{out_name}` reads an unexported node")))
                                })
                                .collect::<Result<Vec<_>>>()?;
                            let op = if matches!(src_node.op, Op::Add) {
                                IntOp::Add { alpha, bits }
                            } else {
                                IntOp::Concat { alpha, bits }
                            };
                            (op, ins)
                        }
                        _ => {
                            if scales_t[src].is_none() {
                                return Err(unsupported("quantizer input is neither fusable nor quantized".into()));
                            }
                            (IntOp::Requant { alpha, bits }, vec![mapped(0)?])
                        }
                    };
                    let (op, inputs) = op;
                    if op.layer().is_none() {
                        for &i in &inputs {
                            if nodes[i].scale <= 0.0 {
                                return Err(unsupported("operand has no activation scale".into()));
                            }
                        }
                    }
                    debug_assert!((s_out - act_scale(alpha, bits)).abs() <= 1e-12 * s_out.abs().max(1.0));
                    map[id] = Some(nodes.len());
                    nodes.push(IntNode {
                        name: if fuse { out_name } else { name.to_string() },
                        op,
                        inputs,
                        scale: s_out,
                        max_code: half(bits),
                        channels: c,
                        length: l,
                    });
                }
                Op::ReLU | Op::MaxPool { .. } | Op::AvgPool { .. } | Op::Upsample { .. } | Op::Identity => {
                    let inp = mapped(0)?;
                    let (s, m) = (nodes[inp].scale, nodes[inp].max_code);
                    let (op, scale, max_code) = match &node.op {
                        Op::ReLU => (IntOp::Relu, s, m),
                        Op::MaxPool { kernel, stride } => (
                            IntOp::MaxPool {
                                kernel: *kernel,
                                stride: *stride,
                            },
                            s,
                            m,
                        ),
                        Op::AvgPool { kernel, stride } => {
                            check_i32(name, m * *kernel as i64, "pooled code")?;
                            (
                                IntOp::AvgPool {
                                    kernel: *kernel,
                                    stride: *stride,
                                },
                                s / *kernel as f64,
                                m * *kernel as i64,
                            )
                        }
                        Op::Upsample { factor } => (IntOp::Upsample { factor: *factor }, s, m),
                        _ => (IntOp::Identity, s, m),
                    };
                    map[id] = Some(nodes.len());
                    nodes.push(IntNode {
                        name: name.to_string(),
                        op,
                        inputs: vec![inp],
                        scale,
                        max_code,
                        channels: c,
                        length: l,
                    });
                }
                Op::BatchNorm(_) | Op::InstanceNorm(_) | Op::PReLU { .. } | Op::Choice(_) => {
                    return Err(unsupported(format!(
                        "{} has no integer kernel; prepare the graph for quantization first",
                        node.op.kind_name()
                    )));
                }
            }
        }
        let output = map[g.output].ok_or_else(|| Error::Graph("graph output was not exported".into()))?;
        Ok(Self { nodes, output })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.nodes[0].channels, self.nodes[0].length)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let n = &self.nodes[self.output];
        (n.channels, n.length)
    }

    pub fn output_scale(&self) -> f64 {
        self.nodes[self.output].scale
    }

    /// Codes of one `(channels, length)` window under the input quantizer.
    pub fn quantize_input(&self, x: &[f64]) -> Result<Vec<i32>> {
        let IntOp::Input { alpha, bits } = self.nodes[0].op else {
            return Err(Error::Format("first node is not an input quantizer".into()));
        };
        let (c, l) = self.input_shape();
        if x.len() != c * l {
            return Err(Error::Shape {
                node: self.nodes[0].name.clone(),
                detail: format!("expected {} values, got {}", c * l, x.len()),
            });
        }
        Ok(x.iter().map(|&v| pact_code(v, alpha, bits) as i32).collect())
    }

    /// Integer forward pass of one window of input codes; returns output codes.
    pub fn forward_codes(&self, input: &[i32]) -> Result<Vec<i32>> {
        let (c0, l0) = self.input_shape();
        if input.len() != c0 * l0 {
            return Err(Error::Shape {
                node: self.nodes[0].name.clone(),
                detail: format!("expected {} codes, got {}", c0 * l0, input.len()),
            });
        }
        let mut vals: Vec<Vec<i32>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inp = |k: usize| &vals[node.inputs[k]];
            let shape = |k: usize| {
                let n = &self.nodes[node.inputs[k]];
                (n.channels, n.length)
            };
            let y = match &node.op {
                IntOp::Input { .. } => input.to_vec(),
                IntOp::Conv { geom, layer } => conv_int(inp(0), shape(0).1, geom, layer, node.length),
                IntOp::Linear { in_features, layer } => linear_int(inp(0), *in_features, layer),
                IntOp::Relu => inp(0).iter().map(|&v| v.max(0)).collect(),
                IntOp::MaxPool { kernel, stride } => pool_int(inp(0), shape(0), *kernel, *stride, |w| {
                    *w.iter().max().expect("non-empty window")
                }),
                IntOp::AvgPool { kernel, stride } => pool_int(inp(0), shape(0), *kernel, *stride, |w| w.iter().sum()),
                IntOp::Upsample { factor } => {
                    let (c, l) = shape(0);
                    let x = inp(0);
                    (0..c * l * factor)
                        .map(|i| x[(i / (l * factor)) * l + (i % (l * factor)) / factor])
                        .collect()
                }
                IntOp::Identity => inp(0).clone(),
                IntOp::Add { bits, .. } => {
                    let mut acc = vec![0f64; inp(0).len()];
                    for (k, &i) in node.inputs.iter().enumerate() {
                        let s = self.nodes[i].scale;
                        for (a, &v) in acc.iter_mut().zip(inp(k)) {
                            *a += v as f64 * s;
                        }
                    }
                    acc.into_iter()
                        .map(|v| clamp_code((v / node.scale).round(), *bits))
                        .collect()
                }
                IntOp::Concat { bits, .. } => {
                    let mut out = Vec::with_capacity(node.channels * node.length);
                    for (k, &i) in node.inputs.iter().enumerate() {
                        let ratio = self.nodes[i].scale / node.scale;
                        out.extend(inp(k).iter().map(|&v| requant_code(v, ratio, *bits)));
                    }
                    out
                }
                IntOp::Requant { bits, .. } => {
                    let ratio = self.nodes[node.inputs[0]].scale / node.scale;
                    inp(0).iter().map(|&v| requant_code(v, ratio, *bits)).collect()
                }
            };
            debug_assert_eq!(y.len(), node.channels * node.length, "{}", node.name);
            vals.push(y);
        }
        Ok(vals.swap_remove(self.output))
    }

    /// Quantizes, runs and dequantizes a batch `(N, C, L)`.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<f64>> {
        let (n, c, l) = x.dims3();
        let (oc, ol) = self.output_shape();
        let s = self.output_scale();
        let mut out = Vec::with_capacity(n * oc * ol);
        for b in 0..n {
            let window: Vec<f64> = x.data()[b * c * l..(b + 1) * c * l]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let codes = self.forward_codes(&self.quantize_input(&window)?)?;
            out.extend(codes.into_iter().map(|q| q as f64 * s));
        }
        Tensor::from_vec(&[n, oc, ol], out)
    }

    pub fn footprint(&self) -> Footprint {
        let mut f = Footprint {
            weight_bytes: 0,
            bias_bytes: 0,
            scale_bytes: 0,
            total_bytes: 0,
        };
        for node in &self.nodes {
            match &node.op {
                IntOp::Conv { layer, .. } | IntOp::Linear { layer, .. } => {
                    f.weight_bytes += layer.weights.bytes().len();
                    f.bias_bytes += 4 * layer.bias.len();
                    f.scale_bytes += 4 * 3;
                }
                IntOp::Input { .. } | IntOp::Requant { .. } => f.scale_bytes += 4,
                IntOp::Add { .. } | IntOp::Concat { .. } => f.scale_bytes += 4 * node.inputs.len(),
                _ => {}
            }
        }
        f.total_bytes = f.weight_bytes + f.bias_bytes + f.scale_bytes;
        f
    }

    /// `(layer name, weight bits)` of every weight layer.
    pub fn layer_bits(&self) -> Vec<(String, u32)> {
        self.nodes
            .iter()
            .filter_map(|n| n.op.layer().map(|l| (n.name.clone(), l.bits_w)))
            .collect()
    }

    pub fn layer_entries(&self) -> Vec<LayerEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| {
                n.op.layer().map(|l| LayerEntry {
                    id,
                    kind: n.op.kind_name().to_string(),
                    bits_w: l.bits_w,
                    scale_w: l.scale_w,
                    zp_w: l.zp_w,
                    scale_x: l.scale_x,
                    alpha: l.alpha,
                    scale_out: l.scale_out,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            layers: self.layer_entries(),
            graph: self.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for node in &self.nodes {
            if let Some(layer) = node.op.layer() {
                out.extend_from_slice(layer.weights.bytes());
                for b in &layer.bias {
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format(format!("truncated container while reading {what}")));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a quantized model container".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4, "header length")?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(hlen, "header")?)?;
        let mut model = header.graph;
        for node in &mut model.nodes {
            let name = node.name.clone();
            if let Some(layer) = node.op.layer_mut() {
                let blob = take(
                    packed_len(layer.n_weights, layer.bits_w),
                    &format!("weights of `{name}`"),
                )?;
                layer.weights = PackedWeights::from_bytes(layer.bits_w, layer.n_weights, blob.to_vec())?;
                if layer.has_bias {
                    let raw = take(4 * layer.rows, &format!("bias of `{name}`"))?;
                    layer.bias = raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                }
            }
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last blob",
                cur.len()
            )));
        }
        model.check()?;
        if model.layer_entries() != header.layers {
            return Err(Error::Format("layer table disagrees with the graph".into()));
        }
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.nodes.is_empty() || self.output >= self.nodes.len() {
            return Err(Error::Format("model has no output node".into()));
        }
        for (id, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&i| i >= id) {
                return Err(Error::Format(format!("node `{}` is not topologically ordered", n.name)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Exports a graph whose precisions are frozen; fails while any precision
/// logit is still being searched.
pub fn export_quantized<T: Scalar>(g: &ModelGraph<T>) -> Result<QuantizedModel> {
    QuantizedModel::from_graph(g)
}

fn conv_int(x: &[i32], len: usize, g: &ConvGeometry, layer: &IntLayer, out_len: usize) -> Vec<i32> {
    let (pad_left, _) = g.pads(len);
    let (ipg, opg, k) = (g.in_per_group(), g.out_per_group(), g.kernel);
    let mut y = vec![0i32; g.out_ch * out_len];
    for o in 0..g.out_ch {
        let grp = o / opg;
        let bias = layer.bias.get(o).copied().unwrap_or(0);
        for t in 0..out_len {
            let (mut acc_w, mut acc_x) = (0i32, 0i32);
            for ci in 0..ipg {
                let xrow = &x[(grp * ipg + ci) * len..(grp * ipg + ci + 1) * len];
                for kk in 0..k {
                    let pos = (t * g.stride + kk * g.dilation) as isize - pad_left as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let xv = xrow[pos as usize];
                    acc_w += layer.weights.get((o * ipg + ci) * k + kk) as i32 * xv;
                    acc_x += xv;
                }
            }
            y[o * out_len + t] = layer.requant(acc_w, acc_x, bias);
        }
    }
    y
}

fn linear_int(x: &[i32], in_features: usize, layer: &IntLayer) -> Vec<i32> {
    let acc_x: i32 = x.iter().sum();
    (0..layer.rows)
        .map(|o| {
            let acc_w: i32 = (0..in_features)
                .map(|i| layer.weights.get(o * in_features + i) as i32 * x[i])
                .sum();
            layer.requant(acc_w, acc_x, layer.bias.get(o).copied().unwrap_or(0))
        })
        .collect()
}

fn pool_int(x: &[i32], (c, l): (usize, usize), kernel: usize, stride: usize, f: impl Fn(&[i32]) -> i32) -> Vec<i32> {
    let ol = pool_out_len(l, kernel, stride);
    let mut y = Vec::with_capacity(c * ol);
    for row in 0..c {
        for t in 0..ol {
            let start = row * l + t * stride;
            y.push(f(&x[start..start + kernel]));
        }
    }
    y
}
