//! One-shot magnitude pruning and mask training.
//!
//! Ordering convention shared by every ranking here: entries are sorted
//! ascending by score and ties go to the smaller flat index first, so the
//! first `k` in that order are the pruned ones.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tickets_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{Bindings, ModuleTag, ParameterRegistry};
use crate::sparsity::SparsityConfig;

pub const DEFAULT_PHI: f64 = 0.01;

/// Mask learning rate before scaling.
pub const ETA_BASE: f64 = 5e-5;

/// Desk-scale multiplier on [`ETA_BASE`]. Straight-through gradients on a
/// few-thousand-example problem are tiny; smaller factors leave every mask
/// where initialization put it.
pub const ETA_SCALE: f64 = 1e4;

/// Number of entries pruned out of `n` at `sparsity`.
pub fn pruned_count(sparsity: f64, n: usize) -> usize {
    ((sparsity * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskHyper {
    pub alpha: f64,
    pub phi0: f64,
    /// `t_m`
    pub recompute_interval: usize,
    /// `η`
    pub eta: f64,
}

impl Default for MaskHyper {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            phi0: DEFAULT_PHI,
            recompute_interval: 10,
            eta: ETA_BASE * ETA_SCALE,
        }
    }
}

impl MaskHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.phi0 > 0.0) || !(self.eta >= 0.0) || self.recompute_interval == 0 {
            return Err(Error::InvalidConfig(format!("invalid mask hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// How thresholds are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ThresholdScheme {
    /// Each matrix hits its own target.
    PerMatrix,
    /// One quantile over every masked scalar.
    Global { sparsity: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixMask {
    pub shape: Vec<usize>,
    /// `m`
    pub binary: Vec<bool>,
    /// `m̂`, absent for OMP masks
    pub real: Option<Vec<f64>>,
    /// `φ`
    pub phi: f64,
    pub target: f64,
}

impl MatrixMask {
    pub fn numel(&self) -> usize {
        self.binary.len()
    }

    pub fn survivors(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }

    pub fn pruned(&self) -> usize {
        self.numel() - self.survivors()
    }

    /// `m ⊙ W`
    pub fn apply(&self, weight: &Tensor) -> Tensor {
        let data = weight
            .data()
            .iter()
            .zip(&self.binary)
            .map(|(&w, &m)| if m { w } else { 0.0 })
            .collect();
        Tensor::new(weight.shape().to_vec(), data).expect("mask shape checked")
    }

    fn rebinarize(&mut self) {
        if let Some(real) = &self.real {
            self.binary = binarize(real, self.phi);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: IndexMap<String, MatrixMask>,
    pub hyper: MaskHyper,
    pub scheme: ThresholdScheme,
}

impl MaskSet {
    pub fn get(&self, name: &str) -> Option<&MatrixMask> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MatrixMask)> {
        self.masks.iter()
    }

    /// All-ones masks over every prunable matrix.
    pub fn dense(registry: &ParameterRegistry) -> Self {
        let masks = registry
            .prunable()
            .map(|(name, p)| {
                (
                    name.clone(),
                    MatrixMask {
                        shape: p.value.shape().to_vec(),
                        binary: vec![true; p.value.numel()],
                        real: None,
                        phi: DEFAULT_PHI,
                        target: 0.0,
                    },
                )
            })
            .collect();
        Self {
            masks,
            hyper: MaskHyper::default(),
            scheme: ThresholdScheme::PerMatrix,
        }
    }

    pub fn check_against(&self, registry: &ParameterRegistry) -> Result<()> {
        for (name, mask) in &self.masks {
            let p = registry.get(name)?;
            if !p.prunable || p.value.shape() != mask.shape.as_slice() || mask.binary.len() != p.value.numel() {
                return Err(Error::MaskShape {
                    name: name.clone(),
                    mask: mask.shape.clone(),
                    weight: p.value.shape().to_vec(),
                });
            }
            if let Some(real) = &mask.real {
                if real.len() != mask.binary.len() {
                    return Err(Error::MaskShape {
                        name: name.clone(),
                        mask: vec![real.len()],
                        weight: p.value.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(MatrixMask::numel).sum()
    }

    pub fn total_pruned(&self) -> usize {
        self.masks.values().map(MatrixMask::pruned).sum()
    }

    /// Resets `φ` so the target survivor count holds again, then
    /// re-binarizes. Masks without a real part are left alone.
    pub fn recompute_thresholds(&mut self) {
        match self.scheme {
            ThresholdScheme::PerMatrix => {
                for mask in self.masks.values_mut() {
                    if let Some(real) = mask.real.as_mut() {
                        let k = pruned_count(mask.target, real.len());
                        let mut refs: Vec<&mut f64> = real.iter_mut().collect();
                        mask.phi = reset_threshold(&mut refs, k);
                        mask.rebinarize();
                    }
                }
            }
            ThresholdScheme::Global { sparsity } => {
                let total: usize = self.masks.values().filter(|m| m.real.is_some()).map(MatrixMask::numel).sum();
                let k = pruned_count(sparsity, total);
                let mut refs: Vec<&mut f64> = self
                    .masks
                    .values_mut()
                    .filter_map(|m| m.real.as_mut())
                    .flat_map(|r| r.iter_mut())
                    .collect();
                if refs.is_empty() {
                    return;
                }
                let phi = reset_threshold(&mut refs, k);
                for mask in self.masks.values_mut() {
                    if mask.real.is_some() {
                        mask.phi = phi;
                        mask.rebinarize();
                    }
                }
            }
        }
    }
}

/// Sets the threshold so exactly `k` of `values` fall below it. Pruned
/// entries tied with the threshold are nudged just under it.
fn reset_threshold(values: &mut [&mut f64], k: usize) -> f64 {
    let n = values.len();
    let order = ascending_order(n, |i| *values[i]);
    if k >= n {
        let max = values.iter().map(|v| **v).fold(f64::NEG_INFINITY, f64::max);
        return max.next_up();
    }
    let phi = *values[order[k]];
    for &i in &order[..k] {
        if *values[i] >= phi {
            *values[i] = phi.next_down();
        }
    }
    phi
}

fn ascending_order(n: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    order
}

/// `m = 1` where `m̂ ≥ φ`.
pub fn binarize(real: &[f64], phi: f64) -> Vec<bool> {
    real.iter().map(|&v| v >= phi).collect()
}

fn check_targets(registry: &ParameterRegistry, targets: &IndexMap<String, f64>) -> Result<()> {
    for (name, &s) in targets {
        let p = registry.get(name)?;
        if !p.prunable {
            return Err(Error::InvalidSparsity(format!("`{name}` is not prunable")));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Infeasible { value: s });
        }
    }
    Ok(())
}

/// Zeroes the `⌈s·n⌉` smallest-magnitude entries of each listed matrix.
pub fn omp(registry: &ParameterRegistry, targets: &IndexMap<String, f64>) -> Result<MaskSet> {
    check_targets(registry, targets)?;
    let mut masks = IndexMap::new();
    for (name, &s) in targets {
        let w = registry.get(name)?.value.data();
        let k = pruned_count(s, w.len());
        let order = ascending_order(w.len(), |i| w[i].abs());
        let mut binary = vec![true; w.len()];
        for &i in &order[..k] {
            binary[i] = false;
        }
        masks.insert(
            name.clone(),
            MatrixMask {
                shape: registry.get(name)?.value.shape().to_vec(),
                binary,
                real: None,
                phi: DEFAULT_PHI,
                target: s,
            },
        );
    }
    Ok(MaskSet {
        masks,
        hyper: MaskHyper::default(),
        scheme: ThresholdScheme::PerMatrix,
    })
}

/// `m̂ = α·φ₀` where OMP keeps an entry, `0` where it prunes.
pub fn init_real_mask(
    registry: &ParameterRegistry,
    targets: &IndexMap<String, f64>,
    hyper: &MaskHyper,
    scheme: ThresholdScheme,
) -> Result<MaskSet> {
    hyper.validate()?;
    let mut set = omp(registry, targets)?;
    for mask in set.masks.values_mut() {
        mask.real = Some(
            mask.binary
                .iter()
                .map(|&keep| if keep { hyper.alpha * hyper.phi0 } else { 0.0 })
                .collect(),
        );
        mask.phi = hyper.phi0;
    }
    set.hyper = hyper.clone();
    set.scheme = scheme;
    Ok(set)
}

/// `m̂ ~ U[0, 2φ₀]`, thresholds recomputed at once.
pub fn random_init_real_mask(
    registry: &ParameterRegistry,
    targets: &IndexMap<String, f64>,
    hyper: &MaskHyper,
    scheme: ThresholdScheme,
    seed: u64,
) -> Result<MaskSet> {
    hyper.validate()?;
    check_targets(registry, targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = IndexMap::new();
    for (name, &s) in targets {
        let p = registry.get(name)?;
        let real: Vec<f64> = (0..p.value.numel())
            .map(|_| rng.gen_range(0.0..2.0 * hyper.phi0))
            .collect();
        masks.insert(
            name.clone(),
            MatrixMask {
                shape: p.value.shape().to_vec(),
                binary: vec![true; real.len()],
                real: Some(real),
                phi: hyper.phi0,
                target: s,
            },
        );
    }
    let mut set = MaskSet {
        masks,
        hyper: hyper.clone(),
        scheme,
    };
    set.recompute_thresholds();
    Ok(set)
}

/// Binds parameters for a mask-training step: masked matrices enter as
/// gradient-tracking leaves holding `m ⊙ W`, everything else as leaves whose
/// gradient the caller may read.
pub fn bind_for_mask_training(g: &mut Graph, registry: &ParameterRegistry, masks: &MaskSet) -> Result<Bindings> {
    masks.check_against(registry)?;
    let mut b = Bindings::new();
    for (name, p) in registry.iter() {
        let var = match masks.get(name) {
            Some(mask) => g.leaf(mask.apply(&p.value), true),
            None => g.leaf(p.value.clone(), !p.prunable),
        };
        b.insert(name.clone(), var);
    }
    Ok(b)
}

/// One straight-through update of the real masks.
///
/// `loss_fn` records the loss on `g` from the given bindings. The gradient at
/// each masked weight `G = ∂L/∂(m⊙W)` gives `∂L/∂m ≈ G ⊙ W`, and
/// `m̂ ← m̂ − η·G ⊙ W`. Thresholds are recomputed when `step + 1` is a multiple
/// of `t_m`. Weights are never written. Returns the loss and the bindings, so
/// the caller can read gradients of other leaves from `g`.
pub fn mask_train_step<F>(
    g: &mut Graph,
    registry: &ParameterRegistry,
    masks: &mut MaskSet,
    step: usize,
    batch: usize,
    loss_fn: F,
) -> Result<(f64, Bindings)>
where
    F: FnOnce(&mut Graph, &Bindings) -> Result<Var>,
{
    let bindings = bind_for_mask_training(g, registry, masks)?;
    let loss = loss_fn(g, &bindings)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { loss: value, step, batch });
    }
    g.backward(loss)?;
    let eta = masks.hyper.eta;
    for (name, mask) in masks.masks.iter_mut() {
        let Some(real) = mask.real.as_mut() else {
            continue;
        };
        let Some(grad) = g.grad(bindings[name]) else {
            continue;
        };
        let w = registry.get(name)?.value.data();
        for ((r, &gr), &wv) in real.iter_mut().zip(grad).zip(w) {
            *r -= eta * gr * wv;
        }
        mask.rebinarize();
    }
    if (step + 1) % masks.hyper.recompute_interval == 0 {
        masks.recompute_thresholds();
    }
    Ok((value, bindings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixAudit {
    pub name: String,
    pub tag: ModuleTag,
    pub size: usize,
    pub pruned: usize,
    pub expected_pruned: usize,
    pub target: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleAudit {
    pub size: usize,
    pub pruned: usize,
    pub sparsity: f64,
    pub survivor_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub target_overall: f64,
    pub overall_sparsity: f64,
    pub overall_survivor_fraction: f64,
    pub modules: BTreeMap<String, ModuleAudit>,
    pub matrices: Vec<MatrixAudit>,
    pub failures: Vec<String>,
}

impl AuditReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Survivor fractions overall, per module and per matrix, checked against
/// the targets `config` assigns. Every matrix must sit within one scalar of
/// its target count; under the matrix-specific scheme only the global count
/// is pinned.
pub fn audit_sparsity(masks: &MaskSet, registry: &ParameterRegistry, config: &SparsityConfig) -> Result<AuditReport> {
    masks.check_against(registry)?;
    let mut failures = Vec::new();
    let mut matrices = Vec::new();
    let mut modules: BTreeMap<String, ModuleAudit> = BTreeMap::new();
    let global = config.is_matrix_specific();
    let (mut size, mut pruned) = (0usize, 0usize);
    for (name, p) in registry.prunable() {
        let n = p.value.numel();
        let (pr, target) = match masks.get(name) {
            Some(m) => (m.pruned(), m.target),
            None => (0, 0.0),
        };
        let target = if global { target } else { config.target_for(p.tag) };
        let expected = pruned_count(target, n);
        if !global && pr.abs_diff(expected) > 1 {
            failures.push(format!("{name}: {pr} pruned, expected {expected}"));
        }
        size += n;
        pruned += pr;
        let entry = modules.entry(p.tag.as_str().to_string()).or_insert(ModuleAudit {
            size: 0,
            pruned: 0,
            sparsity: 0.0,
            survivor_fraction: 0.0,
        });
        entry.size += n;
        entry.pruned += pr;
        matrices.push(MatrixAudit {
            name: name.clone(),
            tag: p.tag,
            size: n,
            pruned: pr,
            expected_pruned: expected,
            target,
            sparsity: pr as f64 / n as f64,
        });
    }
    for m in modules.values_mut() {
        m.sparsity = m.pruned as f64 / m.size as f64;
        m.survivor_fraction = 1.0 - m.sparsity;
    }
    if global {
        let expected = pruned_count(config.overall, size);
        if pruned.abs_diff(expected) > 1 {
            failures.push(format!("global: {pruned} pruned, expected {expected}"));
        }
    }
    let overall = if size == 0 { 0.0 } else { pruned as f64 / size as f64 };
    Ok(AuditReport {
        passed: failures.is_empty(),
        target_overall: config.overall,
        overall_sparsity: overall,
        overall_survivor_fraction: 1.0 - overall,
        modules,
        matrices,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny() -> ParameterRegistry {
        let cfg = ModelConfig {
            d_model: 8,
            d_ffn: 16,
            heads: 2,
            language_layers: 1,
            visual_layers: 1,
            cross_layers: 1,
            vocab_size: 12,
            visual_feature_dim: 4,
            answer_count: 6,
            pooled_dim: 8,
            max_question_len: 4,
            visual_objects: 3,
        };
        build_model(&cfg, 3).unwrap()
    }

    fn uniform(reg: &ParameterRegistry, s: f64) -> IndexMap<String, f64> {
        reg.prunable().map(|(n, _)| (n.clone(), s)).collect()
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        assert_eq!(binarize(&[0.02, 0.01, 0.0, 0.009], 0.01), vec![true, true, false, false]);
    }

    #[test]
    fn omp_two_by_two() {
        let mut reg = tiny();
        let name = "pooler.weight".to_string();
        let w = &mut reg.get_mut(&name).unwrap().value;
        w.data_mut()[..4].copy_from_slice(&[0.5, -0.1, 0.2, -0.9]);
        for v in &mut w.data_mut()[4..] {
            *v = 10.0;
        }
        // 4 of 64 entries small; prune exactly those 4 minus the two largest
        let targets = IndexMap::from([(name.clone(), 2.0 / 64.0)]);
        let set = omp(&reg, &targets).unwrap();
        assert_eq!(&set.get(&name).unwrap().binary[..4], &[true, false, false, true]);
    }

    #[test]
    fn omp_zero_sparsity_is_dense() {
        let reg = tiny();
        let set = omp(&reg, &uniform(&reg, 0.0)).unwrap();
        assert_eq!(set.total_pruned(), 0);
    }

    #[test]
    fn magnitude_init_reproduces_omp() {
        let reg = tiny();
        let t = uniform(&reg, 0.6);
        let o = omp(&reg, &t).unwrap();
        let m = init_real_mask(&reg, &t, &MaskHyper::default(), ThresholdScheme::PerMatrix).unwrap();
        for (name, mask) in m.iter() {
            let real = mask.real.as_ref().unwrap();
            assert_eq!(binarize(real, mask.phi), o.get(name).unwrap().binary);
            assert!(real.iter().all(|&v| v == 0.0 || v == 0.02));
        }
    }

    #[test]
    fn alpha_below_one_rejected() {
        let reg = tiny();
        let hyper = MaskHyper {
            alpha: 0.5,
            ..MaskHyper::default()
        };
        assert!(matches!(
            init_real_mask(&reg, &uniform(&reg, 0.5), &hyper, ThresholdScheme::PerMatrix),
            Err(Error::InvalidAlpha(_))
        ));
    }

    #[test]
    fn threshold_ties_are_split_exactly() {
        let mut vals = [0.5, 0.5, 0.5, 0.5, 0.1];
        let mut refs: Vec<&mut f64> = vals.iter_mut().collect();
        let phi = reset_threshold(&mut refs, 3);
        assert_eq!(phi, 0.5);
        assert_eq!(binarize(&vals, phi), vec![false, false, true, true, false]);
    }

    #[test]
    fn full_sparsity_prunes_everything() {
        let mut vals = [0.3, 0.1];
        let mut refs: Vec<&mut f64> = vals.iter_mut().collect();
        let phi = reset_threshold(&mut refs, 2);
        assert_eq!(binarize(&vals, phi), vec![false, false]);
    }

    #[test]
    fn audit_flags_wrong_counts() {
        let reg = tiny();
        let set = omp(&reg, &uniform(&reg, 0.3)).unwrap();
        let ok = audit_sparsity(&set, &reg, &SparsityConfig::uniform(0.3)).unwrap();
        assert!(ok.passed, "{:?}", ok.failures);
        let bad = audit_sparsity(&set, &reg, &SparsityConfig::uniform(0.5)).unwrap();
        assert!(!bad.passed);
        let json: serde_json::Value = serde_json::from_str(&ok.to_json().unwrap()).unwrap();
        assert_eq!(json["passed"], true);
    }
}
