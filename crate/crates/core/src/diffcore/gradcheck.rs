//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::graph::{Mode, ModelGraph, ParamRole};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error, so vanishing gradients are
    /// compared absolutely.
    pub floor: f64,
    pub roles: Vec<ParamRole>,
    pub check_input: bool,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-4,
            roles: vec![ParamRole::Weight, ParamRole::Arch, ParamRole::Clip],
            check_input: true,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar `L = sum(y * r)` (with `r` a
/// fixed random tensor) against central finite differences for every
/// element of the selected tensors.
pub fn grad_check<T: Scalar>(
    graph: &mut ModelGraph<T>,
    input: &Tensor<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let y = graph.forward(input, opts.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r: Vec<T> = (0..y.len()).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    let r = Tensor::from_vec(y.shape(), r)?;
    graph.zero_grads();
    let gx = graph.backward(&r)?;

    let loss = |g: &mut ModelGraph<T>, x: &Tensor<T>| -> Result<f64> {
        let y = g.forward(x, opts.mode)?;
        Ok(y.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    };

    // (tensor index, name, analytic grad)
    let mut targets: Vec<(usize, String, Vec<T>)> = Vec::new();
    let mut idx = 0;
    graph.visit_tensors_mut(&mut |role, name, t| {
        if opts.roles.contains(&role) {
            let g = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); t.len()]);
            targets.push((idx, name.to_string(), g));
        }
        idx += 1;
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: String, analytic: f64, numeric: f64| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = name;
        }
        report.checked += 1;
        Ok(())
    };

    for (tidx, name, analytic) in &targets {
        for (e, a) in analytic.iter().enumerate() {
            let orig = nudge(graph, *tidx, e, None);
            nudge(graph, *tidx, e, Some(T::of(orig.as_f64() + opts.eps)));
            let lp = loss(graph, input)?;
            nudge(graph, *tidx, e, Some(T::of(orig.as_f64() - opts.eps)));
            let lm = loss(graph, input)?;
            nudge(graph, *tidx, e, Some(orig));
            record(format!("{name}[{e}]"), a.as_f64(), (lp - lm) / (2.0 * opts.eps))?;
        }
    }
    if opts.check_input {
        let mut x = input.clone();
        for e in 0..x.len() {
            let orig = x.data()[e];
            x.data_mut()[e] = T::of(orig.as_f64() + opts.eps);
            let lp = loss(graph, &x)?;
            x.data_mut()[e] = T::of(orig.as_f64() - opts.eps);
            let lm = loss(graph, &x)?;
            x.data_mut()[e] = orig;
            record(
                format!("input[{e}]"),
                gx.data()[e].as_f64(),
                (lp - lm) / (2.0 * opts.eps),
            )?;
        }
    }
    graph.clear_cache();
    Ok(report)
}

/// Reads element `e` of the `tidx`-th visited tensor, optionally writing a
/// new value. Returns the previous value.
fn nudge<T: Scalar>(graph: &mut ModelGraph<T>, tidx: usize, e: usize, value: Option<T>) -> T {
    let mut idx = 0;
    let mut old = T::zero();
    graph.visit_tensors_mut(&mut |_, _, t| {
        if idx == tidx {
            old = t.data()[e];
            if let Some(v) = value {
                t.data_mut()[e] = v;
            }
        }
        idx += 1;
    });
    old
}
