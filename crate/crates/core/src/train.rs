//! Optimizers and the training loops behind every pipeline stage.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tickets_autodiff::{Graph, Tensor, Var};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{bce_loss, lmh_loss, BiasPrior, DEFAULT_ENTROPY_WEIGHT};
use crate::model::{forward_graph, Bindings, ModuleTag, ParameterRegistry};
use crate::pruning::{mask_train_step, MaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Lmh,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Lmh => "lmh",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Caps the number of steps regardless of `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 5e-4,
            max_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidExperiment(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam without weight decay, one moment pair per named tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            param[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Parameters plus the learned-mixin gate weight `w` (`[pooled, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub registry: ParameterRegistry,
    pub gate: Tensor,
}

impl ModelState {
    pub fn new(registry: ParameterRegistry) -> Self {
        let p = registry.config().pooled_dim;
        Self {
            registry,
            gate: Tensor::zeros(vec![p, 1]),
        }
    }
}

/// Debiasing context for the learned-mixin loss.
#[derive(Clone, Debug)]
pub struct LossSetup<'a> {
    pub kind: LossKind,
    pub prior: Option<&'a BiasPrior>,
    /// Entropy-penalty weight `z`.
    pub entropy_weight: f64,
}

impl<'a> LossSetup<'a> {
    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            prior: None,
            entropy_weight: DEFAULT_ENTROPY_WEIGHT,
        }
    }

    pub fn lmh(prior: &'a BiasPrior, entropy_weight: f64) -> Self {
        Self {
            kind: LossKind::Lmh,
            prior: Some(prior),
            entropy_weight,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Minibatch order for every step of a run.
pub fn schedule(n: usize, opt: &OptimConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cap = opt.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..opt.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            if out.len() >= cap {
                break 'epochs;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

/// Records the chosen loss for one batch.
fn record_loss(
    g: &mut Graph,
    state_gate: Var,
    registry: &ParameterRegistry,
    bindings: &Bindings,
    data: &Dataset,
    batch: &[usize],
    loss: &LossSetup,
) -> Result<Var> {
    let (input, targets) = data.batch(batch);
    let out = forward_graph(g, registry.config(), bindings, &input)?;
    match loss.kind {
        LossKind::Bce => bce_loss(g, out.logits, &targets),
        LossKind::Lmh => {
            let prior = loss
                .prior
                .ok_or_else(|| Error::InvalidExperiment("lmh loss needs a bias prior".into()))?;
            let pb = prior.batch(&data.prototypes(batch));
            Ok(lmh_loss(g, out.logits, &pb, out.pooled, state_gate, &targets, loss.entropy_weight)?.loss)
        }
    }
}

fn check_finite(g: &Graph, loss: Var, step: usize, batch: usize) -> Result<f64> {
    let v = g.value(loss).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { loss: v, step, batch })
    }
}

/// Updates weights with Adam. With `masks`, masked matrices enter as
/// `m ⊙ W` and their gradient is multiplied by `m`, so pruned entries never
/// move.
pub fn train_weights(
    state: &mut ModelState,
    data: &Dataset,
    loss: &LossSetup,
    opt: &OptimConfig,
    masks: Option<&MaskSet>,
    seed: u64,
    mut on_step: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<TrainLog> {
    opt.validate()?;
    if let Some(m) = masks {
        m.check_against(&state.registry)?;
    }
    let mut adam = Adam::new(opt.learning_rate);
    let mut log = TrainLog::default();
    for (step, batch) in schedule(data.len(), opt, seed).into_iter().enumerate() {
        on_step(step, state)?;
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        for (name, p) in state.registry.iter() {
            let value = match masks.and_then(|m| m.get(name)) {
                Some(mask) => mask.apply(&p.value),
                None => p.value.clone(),
            };
            bindings.insert(name.clone(), g.leaf(value, true));
        }
        let gate = g.leaf(state.gate.clone(), loss.kind == LossKind::Lmh);
        let l = record_loss(&mut g, gate, &state.registry, &bindings, data, &batch, loss)?;
        let value = check_finite(&g, l, step, step)?;
        g.backward(l)?;
        adam.tick();
        for (name, p) in state.registry.iter_mut() {
            let Some(mut grad) = g.take_grad(bindings[name]) else {
                continue;
            };
            if let Some(mask) = masks.and_then(|m| m.get(name)) {
                for (gv, &keep) in grad.iter_mut().zip(&mask.binary) {
                    if !keep {
                        *gv = 0.0;
                    }
                }
            }
            adam.update(name, p.value.data_mut(), &grad);
        }
        if let Some(grad) = g.take_grad(gate) {
            adam.update("gate", state.gate.data_mut(), &grad);
        }
        log.losses.push(value);
        log.steps += 1;
    }
    Ok(log)
}

/// Mask training: real masks follow the straight-through gradient while the
/// classifier (and the gate under the learned-mixin loss) trains with Adam.
/// Prunable weights are never written. Thresholds are recomputed once more at
/// the end so every target count holds exactly.
pub fn train_masks(
    state: &mut ModelState,
    masks: &mut MaskSet,
    data: &Dataset,
    loss: &LossSetup,
    opt: &OptimConfig,
    seed: u64,
) -> Result<TrainLog> {
    opt.validate()?;
    let mut adam = Adam::new(opt.learning_rate);
    let mut log = TrainLog::default();
    for (step, batch) in schedule(data.len(), opt, seed).into_iter().enumerate() {
        let mut g = Graph::new();
        let gate = g.leaf(state.gate.clone(), loss.kind == LossKind::Lmh);
        let registry = &state.registry;
        let (value, bindings) = mask_train_step(&mut g, registry, masks, step, step, |g, b| {
            record_loss(g, gate, registry, b, data, &batch, loss)
        })?;
        adam.tick();
        for (name, p) in state.registry.iter_mut() {
            if p.tag != ModuleTag::Classifier {
                continue;
            }
            if let Some(grad) = g.take_grad(bindings[name]) {
                adam.update(name, p.value.data_mut(), &grad);
            }
        }
        if let Some(grad) = g.take_grad(gate) {
            adam.update("gate", state.gate.data_mut(), &grad);
        }
        log.losses.push(value);
        log.steps += 1;
    }
    masks.recompute_thresholds();
    Ok(log)
}

/// Loss on a fixed batch without updating anything.
pub fn probe_loss(state: &ModelState, data: &Dataset, batch: &[usize], loss: &LossSetup) -> Result<f64> {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    for (name, p) in state.registry.iter() {
        bindings.insert(name.clone(), g.constant(p.value.clone()));
    }
    let gate = g.constant(state.gate.clone());
    let l = record_loss(&mut g, gate, &state.registry, &bindings, data, batch, loss)?;
    Ok(g.value(l).item())
}
