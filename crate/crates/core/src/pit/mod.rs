//! Structured output-channel pruning with trainable binary masks.

pub mod mask;

pub use mask::{heaviside, ste_grad, PruneMask};

use serde::{Deserialize, Serialize};

use crate::diffcore::exec::channel_gates;
use crate::diffcore::{ModelGraph, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::{run_phase, ArchUpdate, Monitor, PhaseConfig, TrainData, TrainLog};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitConfig {
    pub lambda: f64,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub lr_w: f64,
    pub lr_theta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
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

/// Channel source of one activation channel: `(space, channel)`, or `None`
/// for channels that can never be pruned (network input).
type Origin = Option<(usize, usize)>;

#[derive(Debug, Clone)]
struct Space {
    channels: usize,
    slots: usize,
    maskable: bool,
}

struct Spaces {
    spaces: Vec<Space>,
    parent: Vec<usize>,
}

impl Spaces {
    fn add(&mut self, channels: usize, slots: usize) -> usize {
        self.spaces.push(Space {
            channels,
            slots,
            maskable: true,
        });
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, s: usize) -> usize {
        let mut r = s;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        self.parent[s] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        let sa = self.spaces[hi].clone();
        let s = &mut self.spaces[lo];
        s.maskable &= sa.maskable && s.channels == sa.channels;
        s.slots = gcd(s.slots, sa.slots);
    }

    fn forbid(&mut self, s: usize) {
        let r = self.find(s);
        self.spaces[r].maskable = false;
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Attaches an all-keep mask to every prunable output-channel dimension.
///
/// Convs and linears start a new channel space; depthwise convs, norms,
/// activations, pools and upsampling pass their input's space through;
/// residual adds merge the spaces of their operands so both branches share
/// one mask. The space feeding the graph output stays unmasked, as do
/// spaces reaching the input side of a grouped (non-depthwise) conv.
pub fn attach_masks<T: Scalar>(g: &mut ModelGraph<T>) -> Result<()> {
    if !g.masks.is_empty() {
        return Err(Error::Graph("masks are already attached".into()));
    }
    let mut sp = Spaces {
        spaces: Vec::new(),
        parent: Vec::new(),
    };
    let mut origins: Vec<Vec<Origin>> = Vec::with_capacity(g.nodes.len());
    let mut producer_space: Vec<Option<usize>> = vec![None; g.nodes.len()];
    let mut depthwise: Vec<bool> = vec![false; g.nodes.len()];
    for (id, node) in g.nodes.iter().enumerate() {
        let input = |k: usize| &origins[node.inputs[k]];
        let o: Vec<Origin> = match &node.op {
            Op::Input { channels, .. } => vec![None; *channels],
            Op::Conv(c) if c.geom.is_depthwise() => {
                depthwise[id] = true;
                let ins = input(0).clone();
                let first = ins.first().copied().flatten().map(|(s, _)| s);
                let ordered = first.is_some()
                    && ins
                        .iter()
                        .enumerate()
                        .all(|(ch, o)| o.is_some_and(|(s, c2)| c2 == ch && Some(s) == first));
                if !ordered {
                    for s in ins.iter().flatten() {
                        sp.forbid(s.0);
                    }
                }
                ins
            }
            Op::Conv(c) => {
                if c.geom.groups > 1 {
                    for s in input(0).iter().flatten() {
                        sp.forbid(s.0);
                    }
                }
                let s = sp.add(c.geom.out_ch, c.geom.out_ch / c.geom.groups);
                producer_space[id] = Some(s);
                (0..c.geom.out_ch).map(|ch| Some((s, ch))).collect()
            }
            Op::Linear(l) => {
                let s = sp.add(l.out_features, l.out_features);
                producer_space[id] = Some(s);
                (0..l.out_features).map(|ch| Some((s, ch))).collect()
            }
            Op::ReLU
            | Op::PReLU { .. }
            | Op::BatchNorm(_)
            | Op::InstanceNorm(_)
            | Op::MaxPool { .. }
            | Op::AvgPool { .. }
            | Op::Upsample { .. }
            | Op::Identity => input(0).clone(),
            Op::Concat => node.inputs.iter().flat_map(|&i| origins[i].clone()).collect(),
            Op::Add => {
                let first = input(0).clone();
                for &i in &node.inputs[1..] {
                    for (a, b) in first.iter().zip(&origins[i]) {
                        match (a, b) {
                            (Some((sa, ca)), Some((sb, cb))) if ca == cb => sp.union(*sa, *sb),
                            (Some((sa, _)), Some((sb, _))) => {
                                sp.forbid(*sa);
                                sp.forbid(*sb);
                            }
                            (Some((s, _)), None) | (None, Some((s, _))) => sp.forbid(*s),
                            (None, None) => {}
                        }
                    }
                }
                first
            }
            Op::Choice(_) | Op::ActQuant(_) => {
                return Err(Error::Unsupported {
                    node: node.name.clone(),
                    detail: format!("{} layers cannot be pruned", node.op.kind_name()),
                })
            }
        };
        origins.push(o);
    }
    for s in origins[g.output].iter().flatten() {
        sp.forbid(s.0);
    }
    // a depthwise conv gates its own outputs with its input's mask
    let mut mask_of_root: Vec<Option<usize>> = vec![None; sp.spaces.len()];
    let mut masks = Vec::new();
    for s in 0..sp.spaces.len() {
        let r = sp.find(s);
        if r == s && sp.spaces[r].maskable {
            mask_of_root[r] = Some(masks.len());
            masks.push(PruneMask::new(sp.spaces[r].channels, sp.spaces[r].slots));
        }
    }
    for (id, node) in g.nodes.iter_mut().enumerate() {
        let space = if depthwise[id] {
            let ins = &origins[node.inputs[0]];
            ins.first().copied().flatten().map(|(s, _)| s)
        } else {
            producer_space[id]
        };
        let mask = space.and_then(|s| mask_of_root[sp.find(s)]);
        match &mut node.op {
            Op::Conv(c) => {
                // depthwise: every channel must come from the same space, in order
                if depthwise[id] {
                    let ins = &origins[node.inputs[0]];
                    let ok = mask.is_some()
                        && ins
                            .iter()
                            .enumerate()
                            .all(|(ch, o)| o.is_some_and(|(s, c2)| c2 == ch && mask_of_root[sp.find(s)] == mask));
                    c.gate = if ok { mask } else { None };
                    if mask.is_some() && !ok {
                        return Err(Error::Unsupported {
                            node: node.name.clone(),
                            detail: "depthwise conv reads channels from several masks".into(),
                        });
                    }
                } else {
                    c.gate = mask;
                }
            }
            Op::Linear(l) => l.gate = mask,
            _ => {}
        }
    }
    g.masks = masks;
    g.clear_cache();
    Ok(())
}

/// Gate value of one channel and the `(mask, slot)` it comes from.
type ChannelGate<T> = (T, Option<(usize, usize)>);

/// Per-channel gate values of every node output (`1` where unmasked).
fn gate_values<T: Scalar>(g: &ModelGraph<T>) -> Vec<Vec<ChannelGate<T>>> {
    channel_gates(g)
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|gate| match gate {
                    Some((m, s)) => (g.masks[m].gate_of_slot(s), gate),
                    None => (T::one(), None),
                })
                .collect()
        })
        .collect()
}

/// Surrogate parameter count of the masked network. At binary masks this is
/// the exact parameter count of [`export_pruned`]'s output. Given `lambda`,
/// adds `lambda * dCost/dtheta` (through the straight-through estimator) to
/// the mask gradients.
pub fn mask_cost<T: Scalar>(g: &mut ModelGraph<T>, lambda: Option<T>) -> T {
    let gates = gate_values(g);
    let shapes = g.infer_shapes().expect("valid graph");
    let mut dm: Vec<Vec<T>> = g.masks.iter().map(|m| vec![T::zero(); m.slots()]).collect();
    let mut total = T::zero();
    let mut bump = |gate: Option<(usize, usize)>, v: T| {
        if let Some((m, s)) = gate {
            dm[m][s] += v;
        }
    };
    for (id, node) in g.nodes.iter().enumerate() {
        let own = &gates[id];
        let inp = node.inputs.first().map(|&i| &gates[i]);
        match &node.op {
            Op::Conv(c) => {
                let inp = inp.expect("conv has an input");
                let k = T::of_usize(c.geom.kernel);
                let (ipg, opg) = (c.geom.in_per_group(), c.geom.out_per_group());
                for (o, &(ao, go)) in own.iter().enumerate() {
                    let grp = o / opg;
                    for &(ai, gi) in &inp[grp * ipg..(grp + 1) * ipg] {
                        total += k * ao * ai;
                        bump(go, k * ai);
                        bump(gi, k * ao);
                    }
                    if c.bias.is_some() {
                        total += ao;
                        bump(go, T::one());
                    }
                }
            }
            Op::Linear(l) => {
                let inp = inp.expect("linear has an input");
                let len = T::of_usize(shapes[node.inputs[0]].1);
                for &(ao, go) in own.iter() {
                    for &(ai, gi) in inp.iter() {
                        total += len * ao * ai;
                        bump(go, len * ai);
                        bump(gi, len * ao);
                    }
                    if l.bias.is_some() {
                        total += ao;
                        bump(go, T::one());
                    }
                }
            }
            Op::BatchNorm(_) | Op::InstanceNorm(_) | Op::PReLU { .. } => {
                let per = if matches!(node.op, Op::PReLU { .. }) { 1.0 } else { 2.0 };
                for &(a, gate) in own.iter() {
                    total += T::of(per) * a;
                    bump(gate, T::of(per));
                }
            }
            _ => {}
        }
    }
    if let Some(lambda) = lambda {
        for (m, d) in g.masks.iter_mut().zip(dm) {
            let gt: Vec<T> = m
                .theta
                .data()
                .iter()
                .zip(&d)
                .map(|(&t, &v)| lambda * v * ste_grad(t))
                .collect();
            m.theta.accumulate_grad(&gt);
        }
    }
    total
}

/// Binarizes every mask. A mask that would remove all channels keeps its
/// slot with the largest theta.
pub fn freeze_masks<T: Scalar>(g: &mut ModelGraph<T>) {
    for (i, m) in g.masks.iter_mut().enumerate() {
        if m.kept_slots() == 0 {
            let best = crate::scalar::argmax(m.theta.data());
            log::warn!("mask {i} pruned every channel; keeping slot {best}");
            m.theta.data_mut()[best] = T::zero();
        }
        m.frozen = true;
    }
    g.clear_cache();
}

/// Joint weight/mask training of `L + lambda * mask_cost`, then mask
/// freezing and fine-tuning of the surviving weights.
pub fn pit_train<T: Scalar>(g: &mut ModelGraph<T>, data: &TrainData<T>, cfg: &PitConfig) -> Result<TrainLog> {
    if !cfg.lambda.is_finite() || cfg.lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {}",
            cfg.lambda
        )));
    }
    if g.masks.is_empty() {
        attach_masks(g)?;
    }
    let reg: &dyn Fn(&mut ModelGraph<T>, Option<T>) -> T = &mask_cost;
    let search = PhaseConfig {
        epochs: cfg.search_epochs,
        patience: Some(cfg.patience),
        lr_w: cfg.lr_w,
        lr_theta: cfg.lr_theta,
        batch_size: cfg.batch_size,
        lambda: cfg.lambda,
        arch: ArchUpdate::Joint,
        monitor: Monitor::ValObjective,
        seed: cfg.seed,
        ..PhaseConfig::default()
    };
    let mut log = run_phase(g, data, &search, Some(reg), None, 0)?.log;
    freeze_masks(g);
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

fn take<T: Scalar>(values: &[T], rows: usize, keep_rows: &[usize], keep_cols: Option<&[usize]>) -> Vec<T> {
    let per = values.len() / rows;
    let mut out = Vec::new();
    for &r in keep_rows {
        let row = &values[r * per..(r + 1) * per];
        match keep_cols {
            Some(cols) => out.extend(cols.iter().map(|&c| row[c])),
            None => out.extend_from_slice(row),
        }
    }
    out
}

fn slice_vec<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    Tensor::from_vec(&[keep.len()], keep.iter().map(|&i| t.data()[i]).collect())
}

/// Physically removes pruned channels. Requires frozen masks; the result
/// carries no masks and computes the same outputs as the masked network.
pub fn export_pruned<T: Scalar>(masked: &ModelGraph<T>) -> Result<ModelGraph<T>> {
    if masked.masks.iter().any(|m| !m.frozen) {
        return Err(Error::Graph("masks must be frozen before export".into()));
    }
    let gates = gate_values(masked);
    let shapes = masked.infer_shapes()?;
    let keep: Vec<Vec<usize>> = gates
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .filter(|(_, (a, _))| *a == T::one())
                .map(|(c, _)| c)
                .collect()
        })
        .collect();
    let mut g = masked.snapshot();
    for (id, node) in g.nodes.iter_mut().enumerate() {
        let kin = node.inputs.first().map(|&i| keep[i].clone());
        let kout = &keep[id];
        let name = node.name.clone();
        let err = |d: String| Error::Shape {
            node: name.clone(),
            detail: d,
        };
        match &mut node.op {
            Op::Conv(c) => {
                let kin = kin.expect("conv input");
                let geom = c.geom;
                let k = geom.kernel;
                if geom.is_depthwise() {
                    if kin != *kout {
                        return Err(err("depthwise input and output channels diverge".into()));
                    }
                    c.weight = Tensor::from_vec(&[kout.len(), 1, k], take(c.weight.data(), geom.out_ch, kout, None))?;
                    c.geom.in_ch = kout.len();
                    c.geom.out_ch = kout.len();
                    c.geom.groups = kout.len();
                } else if geom.groups > 1 {
                    if kin.len() != geom.in_ch {
                        return Err(err("grouped conv input cannot be pruned".into()));
                    }
                    if !kout.len().is_multiple_of(geom.groups) {
                        return Err(err("pruning is not uniform across groups".into()));
                    }
                    c.weight = Tensor::from_vec(
                        &[kout.len(), geom.in_per_group(), k],
                        take(c.weight.data(), geom.out_ch, kout, None),
                    )?;
                    c.geom.out_ch = kout.len();
                } else {
                    let cols: Vec<usize> = kin.iter().flat_map(|&i| (0..k).map(move |t| i * k + t)).collect();
                    c.weight = Tensor::from_vec(
                        &[kout.len(), kin.len(), k],
                        take(c.weight.data(), geom.out_ch, kout, Some(&cols)),
                    )?;
                    c.geom.in_ch = kin.len();
                    c.geom.out_ch = kout.len();
                }
                if let Some(b) = &c.bias {
                    c.bias = Some(slice_vec(b, kout)?);
                }
                c.gate = None;
                node.info.original_channels = Some(geom.out_ch);
            }
            Op::Linear(l) => {
                let kin = kin.expect("linear input");
                let len = shapes[node.inputs[0]].1;
                let cols: Vec<usize> = kin.iter().flat_map(|&i| (0..len).map(move |t| i * len + t)).collect();
                let out = l.out_features;
                l.weight = Tensor::from_vec(&[kout.len(), cols.len()], take(l.weight.data(), out, kout, Some(&cols)))?;
                if let Some(b) = &l.bias {
                    l.bias = Some(slice_vec(b, kout)?);
                }
                l.in_features = cols.len();
                l.out_features = kout.len();
                l.gate = None;
                node.info.original_channels = Some(out);
            }
            Op::BatchNorm(bn) => {
                bn.gamma = slice_vec(&bn.gamma, kout)?;
                bn.beta = slice_vec(&bn.beta, kout)?;
                bn.running_mean = slice_vec(&bn.running_mean, kout)?;
                bn.running_var = slice_vec(&bn.running_var, kout)?;
            }
            Op::InstanceNorm(n) => {
                n.gamma = slice_vec(&n.gamma, kout)?;
                n.beta = slice_vec(&n.beta, kout)?;
            }
            Op::PReLU { slope } => *slope = slice_vec(slope, kout)?,
            _ => {}
        }
    }
    g.masks.clear();
    g.validate()?;
    Ok(g)
}
