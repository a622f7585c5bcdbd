//! Mixed-precision search: fake-quantized training with a per-layer choice
//! of weight bit-width, then frozen-precision fine-tuning.

pub mod fakequant;
pub mod quantizer;

pub use crate::int_runtime::export_quantized;
pub use quantizer::{mix_weight, ActQuant, MixedWeight, WeightQuant};

use serde::{Deserialize, Serialize};

use crate::diffcore::{ModelGraph, Node, NodeInfo, Op};
use crate::error::{Error, Result};
use crate::scalar::{softmax_backward, Scalar};
use crate::train::{run_phase, ArchUpdate, Monitor, PhaseConfig, TrainData, TrainLog};

/// Weight bit-widths searched by default.
pub const DEFAULT_BITS: [u32; 3] = [2, 4, 8];
pub const ACT_BITS: u32 = 8;
pub const ALPHA_INIT: f64 = 8.0;
pub const INIT_BIAS: f64 = 1.0;

/// Softmax temperature at `epoch`: `5 * exp(-0.0045 * epoch)`.
pub fn tau_schedule(epoch: usize) -> f64 {
    5.0 * (-0.0045 * epoch as f64).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpsConfig {
    pub lambda: f64,
    pub bits: Vec<u32>,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub lr_w: f64,
    pub lr_theta: f64,
    pub batch_size: usize,
    pub alpha_init: f64,
    pub alpha_decay: f64,
    /// Starting logit of the widest bit-width (others start at 0), so the
    /// search begins next to the float model and the cost term pulls down.
    #[serde(default = "default_init_bias")]
    pub init_bias: f64,
    pub seed: u64,
}

fn default_init_bias() -> f64 {
    INIT_BIAS
}

impl Default for MpsConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            bits: DEFAULT_BITS.to_vec(),
            search_epochs: 200,
            finetune_epochs: 200,
            patience: 40,
            lr_w: 1e-3,
            lr_theta: 1e-2,
            batch_size: 32,
            alpha_init: ALPHA_INIT,
            alpha_decay: 1e-4,
            init_bias: INIT_BIAS,
            seed: 0,
        }
    }
}

fn act_node<T: Scalar>(name: String, alpha: f64) -> Node<T> {
    Node {
        name,
        op: Op::ActQuant(ActQuant::new(T::of(alpha), ACT_BITS)),
        inputs: vec![],
        info: NodeInfo::default(),
    }
}

/// Rewrites a trained float network for quantization: folds batch norms,
/// replaces PReLU by ReLU, inserts an 8-bit activation quantizer after the
/// input and after every conv, linear, add and concat, and attaches a
/// precision choice over `bits` to every conv/linear weight.
pub fn prepare<T: Scalar>(g: &mut ModelGraph<T>, bits: &[u32], alpha_init: f64) -> Result<()> {
    if g.has_choices() || !g.masks.is_empty() {
        return Err(Error::Unsupported {
            node: "graph".into(),
            detail: "extract the architecture and export pruning before quantization".into(),
        });
    }
    if g.has_quant() {
        return Err(Error::Graph("graph is already quantized".into()));
    }
    if bits.is_empty() || bits.iter().any(|b| !DEFAULT_BITS.contains(b)) {
        return Err(Error::InvalidArgument(format!(
            "bit-widths must be drawn from {DEFAULT_BITS:?}, got {bits:?}"
        )));
    }
    g.fold_batchnorm()?;
    for node in &mut g.nodes {
        if matches!(node.op, Op::PReLU { .. }) {
            node.op = Op::ReLU;
        }
    }
    let mut id = 0;
    while id < g.nodes.len() {
        let needs = matches!(
            g.nodes[id].op,
            Op::Input { .. } | Op::Conv(_) | Op::Linear(_) | Op::Add | Op::Concat
        );
        if needs {
            let name = format!("{}.aq", g.nodes[id].name);
            g.insert_after(id, act_node(name, alpha_init));
            id += 1;
        }
        id += 1;
    }
    for node in &mut g.nodes {
        match &mut node.op {
            Op::Conv(c) => c.quant = Some(WeightQuant::new(bits)),
            Op::Linear(l) => l.quant = Some(WeightQuant::new(bits)),
            _ => {}
        }
    }
    g.validate()?;
    Ok(())
}

/// Expected weight memory in bits, `sum(weights * E[bits])` under
/// `softmax(theta / tau)`. Biases are fixed 32-bit and not part of the
/// search cost. Given `lambda`, adds `lambda * dCost/dtheta`.
pub fn bit_cost<T: Scalar>(g: &mut ModelGraph<T>, lambda: Option<T>) -> T {
    let tau = g.tau;
    let mut total = T::zero();
    for node in &mut g.nodes {
        let (q, n) = match &mut node.op {
            Op::Conv(c) => (c.quant.as_mut(), c.weight.len()),
            Op::Linear(l) => (l.quant.as_mut(), l.weight.len()),
            _ => continue,
        };
        let Some(q) = q else { continue };
        let n = T::of_usize(n);
        total += n * q.expected_bits(tau);
        if let (Some(lambda), None) = (lambda, q.frozen) {
            let grad_p: Vec<T> = q.bits.iter().map(|&b| lambda * n * T::of(b as f64)).collect();
            let gt = softmax_backward(&q.probs(tau), &grad_p, tau);
            q.theta.accumulate_grad(&gt);
        }
    }
    total
}

/// Resets every unfrozen precision choice to `bias` on the widest
/// bit-width and 0 elsewhere.
pub fn init_theta<T: Scalar>(g: &mut ModelGraph<T>, bias: f64) {
    for node in &mut g.nodes {
        let q = match &mut node.op {
            Op::Conv(c) => c.quant.as_mut(),
            Op::Linear(l) => l.quant.as_mut(),
            _ => None,
        };
        let Some(q) = q.filter(|q| q.frozen.is_none()) else {
            continue;
        };
        let widest = (0..q.bits.len()).max_by_key(|&i| q.bits[i]).unwrap_or(0);
        for (i, t) in q.theta.data_mut().iter_mut().enumerate() {
            *t = if i == widest { T::of(bias) } else { T::zero() };
        }
    }
}

/// Fixes every layer at its most likely bit-width.
pub fn freeze_precision<T: Scalar>(g: &mut ModelGraph<T>) {
    for node in &mut g.nodes {
        let q = match &mut node.op {
            Op::Conv(c) => c.quant.as_mut(),
            Op::Linear(l) => l.quant.as_mut(),
            _ => None,
        };
        if let Some(q) = q {
            q.frozen = Some(q.argmax_bits());
        }
    }
    g.clear_cache();
}

/// Per-layer frozen bit-widths in node order.
pub fn layer_bits<T: Scalar>(g: &ModelGraph<T>) -> Vec<(String, Option<u32>)> {
    g.weight_quants()
        .into_iter()
        .map(|(id, q, _)| (g.nodes[id].name.clone(), q.frozen))
        .collect()
}

/// Search of `L + lambda * bit_cost` with annealed temperature, weights and
/// precision logits updated jointly, followed by fine-tuning at the frozen
/// argmax precisions. Expects a graph prepared with [`prepare`].
pub fn mps_train<T: Scalar>(g: &mut ModelGraph<T>, data: &TrainData<T>, cfg: &MpsConfig) -> Result<TrainLog> {
    if !cfg.lambda.is_finite() || cfg.lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {}",
            cfg.lambda
        )));
    }
    if g.nodes.iter().any(|n| matches!(n.op, Op::PReLU { .. })) {
        return Err(Error::Unsupported {
            node: "graph".into(),
            detail: "PReLU must be converted to ReLU before quantization".into(),
        });
    }
    if !g.has_quant() {
        prepare(g, &cfg.bits, cfg.alpha_init)?;
    }
    init_theta(g, cfg.init_bias);
    let reg: &dyn Fn(&mut ModelGraph<T>, Option<T>) -> T = &bit_cost;
    let search = PhaseConfig {
        epochs: cfg.search_epochs,
        patience: Some(cfg.patience),
        lr_w: cfg.lr_w,
        lr_theta: cfg.lr_theta,
        batch_size: cfg.batch_size,
        lambda: cfg.lambda,
        arch: ArchUpdate::Joint,
        monitor: Monitor::ValObjective,
        clip_decay: cfg.alpha_decay,
        seed: cfg.seed,
    };
    let mut anneal = |g: &mut ModelGraph<T>, epoch: usize| g.tau = T::of(tau_schedule(epoch));
    g.tau = T::of(tau_schedule(0));
    let mut log = run_phase(g, data, &search, Some(reg), Some(&mut anneal), 0)?.log;
    freeze_precision(g);
    if cfg.finetune_epochs > 0 {
        let ft = PhaseConfig {
            epochs: cfg.finetune_epochs,
            arch: ArchUpdate::Frozen,
            monitor: Monitor::ValMse,
            seed: cfg.seed.wrapping_add(1),
            ..search
        };
        let offset = log.rows.len();
        log.extend(run_phase(g, data, &ft, Some(reg), None, offset)?.log);
    }
    Ok(log)
}
