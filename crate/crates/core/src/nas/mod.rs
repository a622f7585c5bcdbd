//! Differentiable architecture search over per-layer alternatives.

pub mod choice;

pub use choice::{AltKind, Alternative, ChoiceCache, ChoiceLayer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Conv1d, ConvGeometry, ModelGraph, Node, NodeInfo, Op, Padding, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{argmax, softmax_backward, Scalar};
use crate::train::{run_phase, ArchUpdate, Monitor, PhaseConfig, TrainData, TrainLog};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NasConfig {
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub lr_w: f64,
    pub lr_theta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NasConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            warmup_epochs: 20,
            search_epochs: 200,
            finetune_epochs: 200,
            patience: 40,
            lr_w: 1e-3,
            lr_theta: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl NasConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Whether a conv node becomes a search site: every ungrouped conv with a
/// kernel wider than one tap. 1x1 convs (shortcuts, heads) stay fixed.
pub fn is_search_site(c: &Conv1d<impl Scalar>) -> bool {
    c.geom.kernel > 1 && c.geom.groups == 1
}

/// Replaces every search-site conv with a choice between the original conv,
/// a depthwise-separable module and, when shapes allow, an identity.
pub fn build_supernet<T: Scalar, R: Rng>(seed: &ModelGraph<T>, rng: &mut R) -> Result<ModelGraph<T>> {
    let mut g = seed.snapshot();
    if !g.masks.is_empty() || g.has_quant() || g.has_choices() {
        return Err(Error::Unsupported {
            node: "graph".into(),
            detail: "search must start from a plain seed network".into(),
        });
    }
    let mut site = 0;
    for node in &mut g.nodes {
        let Op::Conv(conv) = &node.op else { continue };
        if !is_search_site(conv) {
            continue;
        }
        let geom = conv.geom;
        if geom.padding != Padding::Same {
            return Err(Error::Unsupported {
                node: node.name.clone(),
                detail: "search sites need same padding so alternatives agree in shape".into(),
            });
        }
        let mut alternatives = vec![Alternative {
            kind: AltKind::Conv,
            convs: vec![conv.clone()],
        }];
        let dw = ConvGeometry {
            out_ch: geom.in_ch,
            groups: geom.in_ch,
            ..geom
        };
        let pw = ConvGeometry::new(geom.in_ch, geom.out_ch, 1);
        alternatives.push(Alternative {
            kind: AltKind::DepthwiseSeparable,
            convs: vec![Conv1d::new(dw, rng), Conv1d::new(pw, rng)],
        });
        if geom.in_ch == geom.out_ch && geom.stride == 1 {
            alternatives.push(Alternative {
                kind: AltKind::Identity,
                convs: vec![],
            });
        }
        let n = alternatives.len();
        node.op = Op::Choice(ChoiceLayer {
            site,
            original: geom,
            alternatives,
            theta: Tensor::full(&[n], T::one() / T::of_usize(n)),
        });
        site += 1;
    }
    g.validate()?;
    Ok(g)
}

/// Expected parameter count: fixed layers plus the softmax-weighted cost of
/// every choice site.
pub fn cost_expectation<T: Scalar>(g: &ModelGraph<T>) -> T {
    let mut total = T::zero();
    for node in &g.nodes {
        total += match &node.op {
            Op::Choice(c) => c.expected_cost(),
            Op::Conv(c) => T::of_usize(c.param_count()),
            Op::Linear(l) => T::of_usize(l.param_count()),
            Op::PReLU { slope } => T::of_usize(slope.len()),
            Op::BatchNorm(b) => T::of_usize(2 * b.channels()),
            Op::InstanceNorm(n) => T::of_usize(2 * n.channels()),
            _ => T::zero(),
        };
    }
    total
}

/// Cost regularizer for [`run_phase`]: returns the expected cost and, given
/// `lambda`, adds `lambda * dCost/dtheta` to every site's gradient.
pub fn cost_regularizer<T: Scalar>(g: &mut ModelGraph<T>, lambda: Option<T>) -> T {
    if let Some(lambda) = lambda {
        for node in &mut g.nodes {
            if let Op::Choice(c) = &mut node.op {
                let probs = c.probs();
                let costs: Vec<T> = c.costs().into_iter().map(|v| T::of_usize(v) * lambda).collect();
                let gt = softmax_backward(&probs, &costs, T::one());
                c.theta.accumulate_grad(&gt);
            }
        }
    }
    cost_expectation(g)
}

/// Keeps the path with the largest theta at every site (lowest index on
/// ties) and returns the resulting single-path network.
pub fn extract_architecture<T: Scalar>(supernet: &ModelGraph<T>) -> Result<ModelGraph<T>> {
    let mut g = supernet.snapshot();
    let mut id = 0;
    while id < g.nodes.len() {
        let Op::Choice(c) = &g.nodes[id].op else {
            id += 1;
            continue;
        };
        let k = argmax(c.theta.data());
        let alt = c.alternatives[k].clone();
        let site = c.site;
        let name = g.nodes[id].name.clone();
        let info = NodeInfo {
            choice: Some((site, alt.kind)),
            original_channels: None,
        };
        let node = |name: String, op: Op<T>| Node {
            name,
            op,
            inputs: vec![],
            info: info.clone(),
        };
        let chain = match alt.kind {
            AltKind::Identity => vec![node(name, Op::Identity)],
            AltKind::Conv => vec![node(name, Op::Conv(alt.convs[0].clone()))],
            AltKind::DepthwiseSeparable => vec![
                node(format!("{name}.dw"), Op::Conv(alt.convs[0].clone())),
                node(format!("{name}.pw"), Op::Conv(alt.convs[1].clone())),
            ],
        };
        let len = chain.len();
        g.replace_with_chain(id, chain)?;
        id += len;
    }
    g.validate()?;
    Ok(g)
}

/// Search training: a weight-only warm-up with theta frozen, then
/// alternating weight (train split) and theta (validation split) updates of
/// `L + lambda * R`. The best checkpoint by validation objective is kept.
pub fn dnas_train<T: Scalar>(supernet: &mut ModelGraph<T>, data: &TrainData<T>, cfg: &NasConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    let base = PhaseConfig {
        lr_w: cfg.lr_w,
        lr_theta: cfg.lr_theta,
        batch_size: cfg.batch_size,
        lambda: cfg.lambda,
        seed: cfg.seed,
        ..PhaseConfig::default()
    };
    let reg: &dyn Fn(&mut ModelGraph<T>, Option<T>) -> T = &cost_regularizer;
    let warm = PhaseConfig {
        epochs: cfg.warmup_epochs,
        patience: None,
        arch: ArchUpdate::Frozen,
        monitor: Monitor::ValMse,
        ..base.clone()
    };
    if cfg.warmup_epochs > 0 {
        log.extend(run_phase(supernet, data, &warm, Some(reg), None, 0)?.log);
    }
    let search = PhaseConfig {
        epochs: cfg.search_epochs,
        patience: Some(cfg.patience),
        arch: ArchUpdate::Alternate,
        monitor: Monitor::ValObjective,
        seed: cfg.seed.wrapping_add(1),
        ..base
    };
    log.extend(run_phase(supernet, data, &search, Some(reg), None, cfg.warmup_epochs)?.log);
    Ok(log)
}

/// Full search flow: supernet construction, search, extraction and
/// fine-tuning of the extracted network.
pub fn run_nas<T: Scalar, R: Rng>(
    seed: &ModelGraph<T>,
    data: &TrainData<T>,
    cfg: &NasConfig,
    rng: &mut R,
) -> Result<(ModelGraph<T>, TrainLog)> {
    let mut sn = build_supernet(seed, rng)?;
    let mut log = dnas_train(&mut sn, data, cfg)?;
    let mut g = extract_architecture(&sn)?;
    let ft = PhaseConfig {
        epochs: cfg.finetune_epochs,
        patience: Some(cfg.patience),
        lr_w: cfg.lr_w,
        batch_size: cfg.batch_size,
        seed: cfg.seed.wrapping_add(2),
        ..PhaseConfig::default()
    };
    let offset = log.rows.len();
    if cfg.finetune_epochs > 0 {
        let out = run_phase(&mut g, data, &ft, None, None, offset)?;
        let cost = g.param_count() as f64;
        log.extend(TrainLog {
            rows: out
                .log
                .rows
                .into_iter()
                .map(|mut r| {
                    r.expected_cost = cost;
                    r
                })
                .collect(),
        });
    }
    Ok((g, log))
}
