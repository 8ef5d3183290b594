use crate::diffcore::tensor::{ParamGroup, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl OptimKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<OptimKind> {
        match s {
            "sgd" => Some(OptimKind::Sgd),
            "adam" => Some(OptimKind::Adam),
            _ => None,
        }
    }
}

/// Hyperparameters that do not change over training.
#[derive(Debug, Clone)]
pub struct OptimHyper {
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    /// SGD momentum buffer, or Adam first moment.
    m: Vec<f64>,
    /// Adam second moment (unused by SGD).
    v: Vec<f64>,
}

/// Optimizer state over a [`ParamSet`]. Two learning rates are kept, one
/// per parameter group, so the embedding adapter can train slower than the
/// graph layers. `step` consumes and zeroes gradients.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub lr_embedding: f64,
    pub lr_gnn: f64,
    pub hyper: OptimHyper,
    pub step_count: u64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(kind: OptimKind, lr_embedding: f64, lr_gnn: f64) -> Self {
        OptimizerState {
            kind,
            lr_embedding,
            lr_gnn,
            hyper: OptimHyper::default(),
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn set_learning_rates(&mut self, lr_embedding: f64, lr_gnn: f64) {
        self.lr_embedding = lr_embedding;
        self.lr_gnn = lr_gnn;
    }

    fn ensure_slots(&mut self, set: &ParamSet) {
        while self.slots.len() < set.len() {
            self.slots.push(Slot::default());
        }
    }

    /// Apply one update to every parameter, then zero the gradients.
    /// Errors if any parameter has no gradient.
    pub fn step(&mut self, set: &mut ParamSet) -> Result<()> {
        for (_, p) in set.iter() {
            if p.tensor.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.ensure_slots(set);
        self.step_count += 1;
        let t = self.step_count;
        for id in set.ids().collect::<Vec<_>>() {
            let lr = match set.get(id).group {
                ParamGroup::Embedding => self.lr_embedding,
                ParamGroup::Gnn => self.lr_gnn,
            };
            let slot = &mut self.slots[id.0];
            let tensor = &mut set.get_mut(id).tensor;
            let n = tensor.len();
            let grad = tensor.grad.as_mut().expect("checked above");
            match self.kind {
                OptimKind::Sgd => {
                    if slot.m.len() != n {
                        slot.m = vec![0.0; n];
                    }
                    let mu = self.hyper.momentum;
                    for k in 0..n {
                        slot.m[k] = mu * slot.m[k] + grad[k];
                        tensor.values[k] -= lr * slot.m[k];
                    }
                }
                OptimKind::Adam => {
                    if slot.m.len() != n {
                        slot.m = vec![0.0; n];
                        slot.v = vec![0.0; n];
                    }
                    let (b1, b2, eps) = (self.hyper.beta1, self.hyper.beta2, self.hyper.eps);
                    let bc1 = 1.0 - b1.powi(t as i32);
                    let bc2 = 1.0 - b2.powi(t as i32);
                    for k in 0..n {
                        slot.m[k] = b1 * slot.m[k] + (1.0 - b1) * grad[k];
                        slot.v[k] = b2 * slot.v[k] + (1.0 - b2) * grad[k] * grad[k];
                        let mhat = slot.m[k] / bc1;
                        let vhat = slot.v[k] / bc2;
                        tensor.values[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            for g in grad.iter_mut() {
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// One SGD (momentum) step; thin wrapper kept for symmetry with `adam_step`.
pub fn sgd_step(state: &mut OptimizerState, set: &mut ParamSet) -> Result<()> {
    if state.kind != OptimKind::Sgd {
        return Err(Error::Contract("sgd_step: optimizer state is not SGD".into()));
    }
    state.step(set)
}

pub fn adam_step(state: &mut OptimizerState, set: &mut ParamSet) -> Result<()> {
    if state.kind != OptimKind::Adam {
        return Err(Error::Contract("adam_step: optimizer state is not Adam".into()));
    }
    state.step(set)
}
