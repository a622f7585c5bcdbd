//! Layer graph: nodes in topological order, each consuming earlier nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::exec::ForwardCache;
use crate::diffcore::kernels::{pool_out_len, ConvGeometry};
use crate::diffcore::layers::{BatchNorm1d, Conv1d, InstanceNorm1d, Linear};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::mps::{ActQuant, WeightQuant};
use crate::nas::{AltKind, ChoiceLayer};
use crate::pit::PruneMask;
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub enum Op<T> {
    Input { channels: usize, length: usize },
    Conv(Conv1d<T>),
    Linear(Linear<T>),
    ReLU,
    PReLU { slope: Tensor<T> },
    BatchNorm(BatchNorm1d<T>),
    InstanceNorm(InstanceNorm1d<T>),
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Upsample { factor: usize },
    Add,
    Concat,
    Identity,
    Choice(ChoiceLayer<T>),
    ActQuant(ActQuant<T>),
}

impl<T> Op<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv(_) => "conv1d",
            Op::Linear(_) => "linear",
            Op::ReLU => "relu",
            Op::PReLU { .. } => "prelu",
            Op::BatchNorm(_) => "batchnorm1d",
            Op::InstanceNorm(_) => "instancenorm1d",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::Upsample { .. } => "upsample",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Identity => "identity",
            Op::Choice(_) => "choice",
            Op::ActQuant(_) => "actquant",
        }
    }
}

/// Provenance recorded for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    /// Search site this node was extracted from, with the kept path.
    #[serde(default)]
    pub choice: Option<(usize, AltKind)>,
    /// Output channels before pruning.
    #[serde(default)]
    pub original_channels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Node<T> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    #[serde(default)]
    pub info: NodeInfo,
}

/// What a tensor is used for during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Network weights (conv/linear/norm/PReLU).
    Weight,
    /// Architecture parameters still being searched (choice, mask, precision).
    Arch,
    /// Activation clip bounds.
    Clip,
    /// Not trained: running statistics and frozen architecture parameters.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ModelGraph<T> {
    pub nodes: Vec<Node<T>>,
    pub output: NodeId,
    #[serde(default)]
    pub masks: Vec<PruneMask<T>>,
    /// Softmax temperature of the precision search.
    pub tau: T,
    #[serde(skip)]
    pub(crate) cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn input_shape(&self) -> (usize, usize) {
        match self.nodes[0].op {
            Op::Input { channels, length } => (channels, length),
            _ => unreachable!("node 0 is always the input"),
        }
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        (id + 1..self.nodes.len())
            .filter(|&j| self.nodes[j].inputs.contains(&id))
            .collect()
    }

    /// `(channels, length)` of every node output; checks each node's
    /// inputs against its kind.
    pub fn infer_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut shapes: Vec<(usize, usize)> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let err = |detail: String| Error::Shape {
                node: node.name.clone(),
                detail,
            };
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::Graph(format!("node `{}` consumes a later node", node.name)));
            }
            let ins: Vec<(usize, usize)> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let expect_inputs = |n: usize| -> Result<()> {
                if ins.len() != n {
                    Err(Error::Shape {
                        node: node.name.clone(),
                        detail: format!("expects {n} input(s), has {}", ins.len()),
                    })
                } else {
                    Ok(())
                }
            };
            let shape = match &node.op {
                Op::Input { channels, length } => {
                    if id != 0 {
                        return Err(Error::Graph("input must be node 0".into()));
                    }
                    (*channels, *length)
                }
                Op::Conv(c) => {
                    expect_inputs(1)?;
                    c.geom.validate().map_err(err)?;
                    if ins[0].0 != c.geom.in_ch {
                        return Err(err(format!(
                            "expects {} input channels, got {}",
                            c.geom.in_ch, ins[0].0
                        )));
                    }
                    if c.weight.shape() != c.geom.weight_shape() {
                        return Err(err(format!("weight shape {:?}", c.weight.shape())));
                    }
                    let l = c.geom.out_len(ins[0].1);
                    if l == 0 {
                        return Err(err("input shorter than kernel".into()));
                    }
                    (c.geom.out_ch, l)
                }
                Op::Linear(lin) => {
                    expect_inputs(1)?;
                    if ins[0].0 * ins[0].1 != lin.in_features {
                        return Err(err(format!(
                            "expects {} features, got {}x{}",
                            lin.in_features, ins[0].0, ins[0].1
                        )));
                    }
                    (lin.out_features, 1)
                }
                Op::ReLU | Op::Identity | Op::ActQuant(_) => {
                    expect_inputs(1)?;
                    ins[0]
                }
                Op::PReLU { slope } => {
                    expect_inputs(1)?;
                    if slope.len() != ins[0].0 {
                        return Err(err(format!("{} slopes for {} channels", slope.len(), ins[0].0)));
                    }
                    ins[0]
                }
                Op::BatchNorm(bn) => {
                    expect_inputs(1)?;
                    self.check_norm_position(id)?;
                    if bn.channels() != ins[0].0 {
                        return Err(err(format!("{} channels, input has {}", bn.channels(), ins[0].0)));
                    }
                    ins[0]
                }
                Op::InstanceNorm(n) => {
                    expect_inputs(1)?;
                    self.check_norm_position(id)?;
                    if n.channels() != ins[0].0 {
                        return Err(err(format!("{} channels, input has {}", n.channels(), ins[0].0)));
                    }
                    ins[0]
                }
                Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
                    expect_inputs(1)?;
                    let l = pool_out_len(ins[0].1, *kernel, *stride);
                    if l == 0 || *stride == 0 {
                        return Err(err("pool window larger than input".into()));
                    }
                    (ins[0].0, l)
                }
                Op::Upsample { factor } => {
                    expect_inputs(1)?;
                    (ins[0].0, ins[0].1 * factor)
                }
                Op::Add => {
                    if ins.len() < 2 {
                        return Err(err("add needs at least two inputs".into()));
                    }
                    if ins.iter().any(|s| *s != ins[0]) {
                        return Err(err(format!("operand shapes differ: {ins:?}")));
                    }
                    ins[0]
                }
                Op::Concat => {
                    if ins.is_empty() {
                        return Err(err("concat needs inputs".into()));
                    }
                    if ins.iter().any(|s| s.1 != ins[0].1) {
                        return Err(err(format!("operand lengths differ: {ins:?}")));
                    }
                    (ins.iter().map(|s| s.0).sum(), ins[0].1)
                }
                Op::Choice(ch) => {
                    expect_inputs(1)?;
                    if ch.alternatives.len() < 2 || ch.theta.len() != ch.alternatives.len() {
                        return Err(err("choice needs >= 2 alternatives and one theta each".into()));
                    }
                    let mut out = None;
                    for alt in &ch.alternatives {
                        let mut s = ins[0];
                        for c in &alt.convs {
                            if c.geom.in_ch != s.0 {
                                return Err(err(format!("{} alternative channel mismatch", alt.kind.tag())));
                            }
                            s = (c.geom.out_ch, c.geom.out_len(s.1));
                        }
                        match out {
                            None => out = Some(s),
                            Some(o) if o != s => {
                                return Err(err(format!(
                                    "alternative {} output {:?} disagrees with {:?}",
                                    alt.kind.tag(),
                                    s,
                                    o
                                )))
                            }
                            _ => {}
                        }
                    }
                    out.unwrap()
                }
            };
            shapes.push(shape);
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Graph("output node out of range".into()));
        }
        Ok(shapes)
    }

    fn check_norm_position(&self, id: NodeId) -> Result<()> {
        let prev = &self.nodes[self.nodes[id].inputs[0]];
        match prev.op {
            // an identity left behind by architecture extraction keeps the
            // normalization of the layer it replaced
            Op::Conv(_) | Op::Linear(_) | Op::Choice(_) | Op::Identity => Ok(()),
            _ => Err(Error::Graph(format!(
                "normalization `{}` must directly follow a conv/linear layer, follows `{}`",
                self.nodes[id].name, prev.name
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.infer_shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<(usize, usize)> {
        Ok(self.infer_shapes()?[self.output])
    }

    /// Trainable parameter count (weights, biases, norm affine terms, PReLU
    /// slopes). Search parameters, clip bounds and running statistics are
    /// not counted.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv(c) => c.param_count(),
                Op::Linear(l) => l.param_count(),
                Op::PReLU { slope } => slope.len(),
                Op::BatchNorm(b) => 2 * b.channels(),
                Op::InstanceNorm(i) => 2 * i.channels(),
                Op::Choice(c) => c.costs().iter().sum(),
                _ => 0,
            })
            .sum()
    }

    /// Visits every tensor in a fixed order with its role and a stable name.
    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(ParamRole, &str, &mut Tensor<T>)) {
        for (id, node) in self.nodes.iter_mut().enumerate() {
            let p = |s: &str| format!("{id}.{s}");
            match &mut node.op {
                Op::Conv(c) => {
                    f(ParamRole::Weight, &p("weight"), &mut c.weight);
                    if let Some(b) = &mut c.bias {
                        f(ParamRole::Weight, &p("bias"), b);
                    }
                    if let Some(q) = &mut c.quant {
                        let role = if q.frozen.is_some() {
                            ParamRole::Buffer
                        } else {
                            ParamRole::Arch
                        };
                        f(role, &p("quant_theta"), &mut q.theta);
                    }
                }
                Op::Linear(l) => {
                    f(ParamRole::Weight, &p("weight"), &mut l.weight);
                    if let Some(b) = &mut l.bias {
                        f(ParamRole::Weight, &p("bias"), b);
                    }
                    if let Some(q) = &mut l.quant {
                        let role = if q.frozen.is_some() {
                            ParamRole::Buffer
                        } else {
                            ParamRole::Arch
                        };
                        f(role, &p("quant_theta"), &mut q.theta);
                    }
                }
                Op::PReLU { slope } => f(ParamRole::Weight, &p("slope"), slope),
                Op::BatchNorm(b) => {
                    f(ParamRole::Weight, &p("gamma"), &mut b.gamma);
                    f(ParamRole::Weight, &p("beta"), &mut b.beta);
                    f(ParamRole::Buffer, &p("running_mean"), &mut b.running_mean);
                    f(ParamRole::Buffer, &p("running_var"), &mut b.running_var);
                }
                Op::InstanceNorm(n) => {
                    f(ParamRole::Weight, &p("gamma"), &mut n.gamma);
                    f(ParamRole::Weight, &p("beta"), &mut n.beta);
                }
                Op::Choice(ch) => {
                    for (j, alt) in ch.alternatives.iter_mut().enumerate() {
                        for (k, c) in alt.convs.iter_mut().enumerate() {
                            f(ParamRole::Weight, &p(&format!("alt{j}.conv{k}.weight")), &mut c.weight);
                            if let Some(b) = &mut c.bias {
                                f(ParamRole::Weight, &p(&format!("alt{j}.conv{k}.bias")), b);
                            }
                        }
                    }
                    f(ParamRole::Arch, &p("theta"), &mut ch.theta);
                }
                Op::ActQuant(a) => f(ParamRole::Clip, &p("alpha"), &mut a.alpha),
                _ => {}
            }
        }
        for (i, m) in self.masks.iter_mut().enumerate() {
            let role = if m.frozen { ParamRole::Buffer } else { ParamRole::Arch };
            f(role, &format!("mask{i}.theta"), &mut m.theta);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_tensors_mut(&mut |_, _, t| t.clear_grad());
    }

    pub fn has_choices(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, Op::Choice(_)))
    }

    pub fn has_quant(&self) -> bool {
        self.nodes.iter().any(|n| match &n.op {
            Op::Conv(c) => c.quant.is_some(),
            Op::Linear(l) => l.quant.is_some(),
            Op::ActQuant(_) => true,
            _ => false,
        })
    }

    /// Weight quantizers of all conv/linear layers, in node order.
    pub fn weight_quants(&self) -> Vec<(NodeId, &WeightQuant<T>, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match &n.op {
                Op::Conv(c) => c.quant.as_ref().map(|q| (id, q, c.weight.len())),
                Op::Linear(l) => l.quant.as_ref().map(|q| (id, q, l.weight.len())),
                _ => None,
            })
            .collect()
    }

    /// Drops the forward cache (e.g. before cloning a checkpoint).
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn snapshot(&self) -> Self {
        let mut g = self.clone();
        g.cache = None;
        g.zero_grads();
        g
    }

    /// Removes a single-input node, rewiring its consumers to its input.
    pub fn remove_node(&mut self, id: NodeId) -> Result<()> {
        if id == 0 || self.nodes[id].inputs.len() != 1 {
            return Err(Error::Graph(format!(
                "cannot remove `{}`: not a single-input node",
                self.nodes[id].name
            )));
        }
        let src = self.nodes[id].inputs[0];
        self.nodes.remove(id);
        let remap = |i: NodeId| -> NodeId {
            match i.cmp(&id) {
                std::cmp::Ordering::Less => i,
                std::cmp::Ordering::Equal => src,
                std::cmp::Ordering::Greater => i - 1,
            }
        };
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                *i = remap(*i);
            }
        }
        self.output = remap(self.output);
        self.cache = None;
        Ok(())
    }

    /// Inserts `node` directly after `after`, taking over all of its
    /// consumers (and the output role). Returns the new node id.
    pub fn insert_after(&mut self, after: NodeId, mut node: Node<T>) -> NodeId {
        let new_id = after + 1;
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if *i > after {
                    *i += 1;
                } else if *i == after {
                    *i = new_id;
                }
            }
        }
        if self.output > after {
            self.output += 1;
        } else if self.output == after {
            self.output = new_id;
        }
        node.inputs = vec![after];
        self.nodes.insert(new_id, node);
        self.cache = None;
        new_id
    }

    /// Replaces node `id` by a chain of single-input nodes; the first takes
    /// the original inputs, consumers read from the last.
    pub fn replace_with_chain(&mut self, id: NodeId, chain: Vec<Node<T>>) -> Result<()> {
        if chain.is_empty() {
            return Err(Error::Graph("empty replacement chain".into()));
        }
        let extra = chain.len() - 1;
        let last = id + extra;
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if *i > id {
                    *i += extra;
                } else if *i == id {
                    *i = last;
                }
            }
        }
        if self.output > id {
            self.output += extra;
        } else if self.output == id {
            self.output = last;
        }
        let inputs = std::mem::take(&mut self.nodes[id].inputs);
        self.nodes.remove(id);
        for (k, mut n) in chain.into_iter().enumerate() {
            n.inputs = if k == 0 { inputs.clone() } else { vec![id + k - 1] };
            self.nodes.insert(id + k, n);
        }
        self.cache = None;
        Ok(())
    }

    /// Folds every eval-mode batch norm into the conv/linear layer feeding
    /// it. Instance norm depends on per-sample statistics and is rejected.
    pub fn fold_batchnorm(&mut self) -> Result<()> {
        loop {
            let Some(id) = self
                .nodes
                .iter()
                .position(|n| matches!(n.op, Op::BatchNorm(_) | Op::InstanceNorm(_)))
            else {
                return Ok(());
            };
            let bn = match &self.nodes[id].op {
                Op::BatchNorm(bn) => bn.clone(),
                _ => {
                    return Err(Error::Unsupported {
                        node: self.nodes[id].name.clone(),
                        detail: "instance normalization cannot be folded into weights".into(),
                    })
                }
            };
            let src = self.nodes[id].inputs[0];
            if self.consumers(src).len() != 1 {
                return Err(Error::Graph(format!(
                    "`{}` feeds more than the normalization",
                    self.nodes[src].name
                )));
            }
            if matches!(self.nodes[src].op, Op::Identity) {
                // fold into a per-channel 1x1 conv with unit weights
                let c = bn.channels();
                let geom = ConvGeometry::new(c, c, 1).with_groups(c);
                self.nodes[src].op = Op::Conv(Conv1d {
                    geom,
                    weight: Tensor::full(&geom.weight_shape(), T::one()),
                    bias: Some(Tensor::zeros(&[c])),
                    gate: None,
                    quant: None,
                });
            }
            let scale: Vec<T> = (0..bn.channels())
                .map(|c| bn.gamma.data()[c] / (bn.running_var.data()[c] + bn.eps).sqrt())
                .collect();
            let fold = |weight: &mut Tensor<T>, bias: &mut Option<Tensor<T>>, rows: usize| {
                let per = weight.len() / rows;
                for (o, s) in scale.iter().enumerate() {
                    for v in &mut weight.data_mut()[o * per..(o + 1) * per] {
                        *v *= *s;
                    }
                }
                let b = bias.get_or_insert_with(|| Tensor::zeros(&[rows]));
                for o in 0..rows {
                    let v = b.data()[o];
                    b.data_mut()[o] = (v - bn.running_mean.data()[o]) * scale[o] + bn.beta.data()[o];
                }
            };
            match &mut self.nodes[src].op {
                Op::Conv(c) => fold(&mut c.weight, &mut c.bias, c.geom.out_ch),
                Op::Linear(l) => fold(&mut l.weight, &mut l.bias, l.out_features),
                _ => {
                    return Err(Error::Unsupported {
                        node: self.nodes[id].name.clone(),
                        detail: "only norms after conv/linear can be folded".into(),
                    })
                }
            }
            self.remove_node(id)?;
        }
    }
}

/// Incremental construction of a [`ModelGraph`].
pub struct GraphBuilder<'r, T, R> {
    nodes: Vec<Node<T>>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> GraphBuilder<'r, T, R> {
    pub fn new(channels: usize, length: usize, rng: &'r mut R) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input { channels, length },
                inputs: vec![],
                info: NodeInfo::default(),
            }],
            rng,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs: inputs.to_vec(),
            info: NodeInfo::default(),
        });
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: NodeId, geom: ConvGeometry) -> NodeId {
        let c = Conv1d::new(geom, self.rng);
        self.push(name, Op::Conv(c), &[x])
    }

    pub fn linear(&mut self, name: &str, x: NodeId, in_features: usize, out: usize) -> NodeId {
        let l = Linear::new(in_features, out, self.rng);
        self.push(name, Op::Linear(l), &[x])
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId, channels: usize) -> NodeId {
        self.push(name, Op::BatchNorm(BatchNorm1d::new(channels)), &[x])
    }

    pub fn instancenorm(&mut self, name: &str, x: NodeId, channels: usize) -> NodeId {
        self.push(name, Op::InstanceNorm(InstanceNorm1d::new(channels)), &[x])
    }

    /// PReLU with per-channel slopes initialized at 0.25.
    pub fn prelu(&mut self, name: &str, x: NodeId, channels: usize) -> NodeId {
        let slope = Tensor::full(&[channels], T::of(0.25));
        self.push(name, Op::PReLU { slope }, &[x])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, Op::ReLU, &[x])
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        self.push(name, Op::MaxPool { kernel, stride }, &[x])
    }

    pub fn avgpool(&mut self, name: &str, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        self.push(name, Op::AvgPool { kernel, stride }, &[x])
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, factor: usize) -> NodeId {
        self.push(name, Op::Upsample { factor }, &[x])
    }

    pub fn add(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        self.push(name, Op::Add, xs)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        self.push(name, Op::Concat, xs)
    }

    pub fn identity(&mut self, name: &str, x: NodeId) -> NodeId {
        self.push(name, Op::Identity, &[x])
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn finish(self, output: NodeId) -> Result<ModelGraph<T>> {
        let g = ModelGraph {
            nodes: self.nodes,
            output,
            masks: Vec::new(),
            tau: T::one(),
            cache: None,
        };
        g.validate()?;
        Ok(g)
    }
}
