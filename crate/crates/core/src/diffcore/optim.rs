//! Adam over a role-filtered subset of a graph's tensors.

use std::collections::HashMap;

use crate::diffcore::graph::{ModelGraph, ParamRole};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam optimizer owning the tensors whose role is in `roles`. Several
/// optimizers can share one graph as long as their role sets are disjoint.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    roles: Vec<(ParamRole, f64)>,
    step: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, roles: &[ParamRole]) -> Self {
        let decay = cfg.weight_decay;
        Self {
            cfg,
            roles: roles.iter().map(|&r| (r, decay)).collect(),
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Overrides the L2 penalty for one role.
    pub fn with_role_decay(mut self, role: ParamRole, decay: f64) -> Self {
        for r in &mut self.roles {
            if r.0 == role {
                r.1 = decay;
            }
        }
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, graph: &mut ModelGraph<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let roles = &self.roles;
        let mut missing: Option<String> = None;
        graph.visit_tensors_mut(&mut |role, name, tensor| {
            if missing.is_none() && roles.iter().any(|r| r.0 == role) && tensor.grad().is_none() {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            self.step -= 1;
            return Err(Error::MissingGrad(name));
        }
        let state = &mut self.state;
        graph.visit_tensors_mut(&mut |role, name, tensor| {
            let Some(&(_, decay)) = roles.iter().find(|r| r.0 == role) else {
                return;
            };
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                return;
            };
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if st.m.len() != grad.len() {
                *st = Moments {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                };
            }
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                let wf = w.as_f64();
                let g = grad[i].as_f64() + decay * wf;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                *w = T::of(wf - lr * mh / (vh.sqrt() + eps));
            }
        });
        Ok(())
    }
}
