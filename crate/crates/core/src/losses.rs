//! Training objectives: sigmoid BCE on soft targets, product-of-experts
//! fusion, the learned-mixin gate with its entropy penalty, and the
//! question-only bias prior.
//!
//! Distributions enter the graph as `[batch, answers]` probability tensors.
//! Every log goes through `ln_clamped(·, 1e-9)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tickets_autodiff::{Graph, Tensor, Var, LOG_EPS};

use crate::error::{Error, Result};

/// Entropy-penalty weight `z` when the answer loss is summed over answers.
pub const SUMMED_ENTROPY_WEIGHT: f64 = 0.36;

/// Default `z`. [`bce_loss`] averages over the `K` answers, so the summed
/// weight is divided by the default answer count to keep the same balance.
pub const DEFAULT_ENTROPY_WEIGHT: f64 = SUMMED_ENTROPY_WEIGHT / 16.0;

/// Mean over batch and answers of
/// `−[t·log σ(x) + (1−t)·log(1−σ(x))]`, evaluated as `softplus(x) − t·x`.
pub fn bce_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let t = g.constant(targets.clone());
    let sp = g.softplus(logits);
    let tx = g.mul(t, logits)?;
    let neg = g.scale(tx, -1.0);
    let per = g.add(sp, neg)?;
    Ok(g.mean(per))
}

/// `softmax(log p_m + log p_b)`.
pub fn poe_fuse(g: &mut Graph, p_m: Var, p_b: Var) -> Result<Var> {
    let lm = g.ln_clamped(p_m, LOG_EPS);
    let lb = g.ln_clamped(p_b, LOG_EPS);
    let s = g.add(lm, lb)?;
    Ok(g.softmax(s))
}

/// `g(h) = softplus(h · w)`, one gate per row of `h`; `w` is `[pooled, 1]`.
pub fn lmh_gate(g: &mut Graph, h: Var, w: Var) -> Result<Var> {
    let a = g.matmul(h, w)?;
    Ok(g.softplus(a))
}

/// `log p_m + g·log p_b` for a log-space main score.
fn fused_scores(g: &mut Graph, log_pm: Var, p_b: Var, gate: Var) -> Result<Var> {
    let lb = g.ln_clamped(p_b, LOG_EPS);
    let gb = g.mul_col(lb, gate)?;
    Ok(g.add(log_pm, gb)?)
}

/// `softmax(log p_m + g·log p_b)` with an explicit gate.
pub fn lmh_fuse_with_gate(g: &mut Graph, p_m: Var, p_b: Var, gate: Var) -> Result<Var> {
    let lm = g.ln_clamped(p_m, LOG_EPS);
    let s = fused_scores(g, lm, p_b, gate)?;
    Ok(g.softmax(s))
}

/// Returns `(p̂_deb, g)` with `g = softplus(w·h)`.
pub fn lmh_fuse(g: &mut Graph, p_m: Var, p_b: Var, h: Var, w: Var) -> Result<(Var, Var)> {
    let gate = lmh_gate(g, h, w)?;
    let fused = lmh_fuse_with_gate(g, p_m, p_b, gate)?;
    Ok((fused, gate))
}

/// `R = z · mean_b H(softmax(g_b · log p_b))` with Shannon entropy `H`.
pub fn entropy_penalty(g: &mut Graph, p_b: Var, gate: Var, z: f64) -> Result<Var> {
    if !(z >= 0.0) {
        return Err(Error::InvalidConfig(format!("entropy weight must be non-negative, got {z}")));
    }
    let rows = g.value(p_b).rows().max(1);
    let lb = g.ln_clamped(p_b, LOG_EPS);
    let scaled = g.mul_col(lb, gate)?;
    let q = g.softmax(scaled);
    let lq = g.log_softmax(scaled);
    let qlq = g.mul(q, lq)?;
    let total = g.sum(qlq);
    Ok(g.scale(total, -z / rows as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LmhTerms {
    pub loss: Var,
    pub gate: Var,
    pub fused_scores: Var,
}

/// Per-answer bias log-odds `log b − log(1 − b)`, both logs ε-clamped.
pub fn bias_log_odds(p_b: &Tensor) -> Tensor {
    let data = p_b
        .data()
        .iter()
        .map(|&b| b.max(LOG_EPS).ln() - (1.0 - b).max(LOG_EPS).ln())
        .collect();
    Tensor::new(p_b.shape().to_vec(), data).expect("same shape")
}

/// Sigmoid BCE on the fused scores plus the entropy penalty.
///
/// Each answer is a two-way event, so `p_m = [σ(x), 1 − σ(x)]` and
/// `p_b = [b, 1 − b]`; normalizing `log p_m + g·log p_b` over the two
/// outcomes gives the fused logit `x + g·(log b − log(1 − b))`. The gate is
/// supplied by the caller and `p_b` enters as a constant.
pub fn lmh_loss_with_gate(
    g: &mut Graph,
    logits: Var,
    p_b: &Tensor,
    gate: Var,
    targets: &Tensor,
    z: f64,
) -> Result<LmhTerms> {
    let pb = g.constant(p_b.clone());
    let odds = g.constant(bias_log_odds(p_b));
    let shift = g.mul_col(odds, gate)?;
    let fused = g.add(logits, shift)?;
    let bce = bce_loss(g, fused, targets)?;
    let r = entropy_penalty(g, pb, gate, z)?;
    let loss = g.add(bce, r)?;
    Ok(LmhTerms {
        loss,
        gate,
        fused_scores: fused,
    })
}

/// Full learned-mixin loss; `p_b` enters as a constant, so no gradient
/// reaches the bias prior.
pub fn lmh_loss(g: &mut Graph, logits: Var, p_b: &Tensor, h: Var, w: Var, targets: &Tensor, z: f64) -> Result<LmhTerms> {
    let gate = lmh_gate(g, h, w)?;
    lmh_loss_with_gate(g, logits, p_b, gate, targets, z)
}

/// Question-only answer distribution per prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPrior {
    pub answer_count: usize,
    pub smoothing: f64,
    pub priors: BTreeMap<usize, Vec<f64>>,
}

impl BiasPrior {
    /// Additive-smoothed answer frequencies from `(prototype, answer)` pairs.
    pub fn fit(pairs: impl IntoIterator<Item = (usize, usize)>, answer_count: usize, smoothing: f64) -> Result<Self> {
        if answer_count == 0 || !(smoothing >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bias prior needs answers > 0 and smoothing >= 0, got {answer_count} and {smoothing}"
            )));
        }
        let mut counts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (proto, answer) in pairs {
            if answer >= answer_count {
                return Err(Error::InvalidConfig(format!("answer {answer} out of range {answer_count}")));
            }
            counts.entry(proto).or_insert_with(|| vec![0.0; answer_count])[answer] += 1.0;
        }
        let priors = counts
            .into_iter()
            .map(|(p, c)| (p, normalize(&c, smoothing)))
            .collect();
        Ok(Self {
            answer_count,
            smoothing,
            priors,
        })
    }

    /// Stored distribution, or uniform for an unseen prototype.
    pub fn lookup(&self, prototype: usize) -> Vec<f64> {
        self.priors
            .get(&prototype)
            .cloned()
            .unwrap_or_else(|| vec![1.0 / self.answer_count as f64; self.answer_count])
    }

    /// `[batch, answers]` rows for the given prototypes.
    pub fn batch(&self, prototypes: &[usize]) -> Tensor {
        let data = prototypes.iter().flat_map(|&p| self.lookup(p)).collect();
        Tensor::new(vec![prototypes.len(), self.answer_count], data).expect("rows of answer_count")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let prior: Self = serde_json::from_str(s)?;
        for (p, d) in &prior.priors {
            let sum: f64 = d.iter().sum();
            if d.len() != prior.answer_count || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("prior for prototype {p} is not a distribution")));
            }
        }
        Ok(prior)
    }
}

fn normalize(counts: &[f64], smoothing: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + smoothing * counts.len() as f64;
    if total <= 0.0 {
        return vec![1.0 / counts.len() as f64; counts.len()];
    }
    counts.iter().map(|c| (c + smoothing) / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_bce(x: f64, t: f64) -> f64 {
        let s = 1.0 / (1.0 + (-x).exp());
        -(t * s.max(LOG_EPS).ln() + (1.0 - t) * (1.0 - s).max(LOG_EPS).ln())
    }

    fn eval_bce(logits: Vec<f64>, targets: Vec<f64>, k: usize) -> f64 {
        let b = logits.len() / k;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![b, k], logits).unwrap());
        let l = bce_loss(&mut g, x, &Tensor::new(vec![b, k], targets).unwrap()).unwrap();
        g.value(l).item()
    }

    #[test]
    fn bce_examples() {
        assert!(eval_bce(vec![20.0], vec![1.0], 1) < 1e-8);
        assert!((eval_bce(vec![0.0], vec![0.5], 1) - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let k = 5;
        let logits: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let targets: Vec<f64> = (0..20).map(|i| [0.0, 0.3, 1.0, 0.0][i % 4]).collect();
        let want: f64 = logits.iter().zip(&targets).map(|(&x, &t)| scalar_bce(x, t)).sum::<f64>() / 20.0;
        assert!((eval_bce(logits, targets, k) - want).abs() < 1e-12);
    }

    fn fuse(pm: &[f64], pb: &[f64], gate: Option<f64>) -> Vec<f64> {
        let k = pm.len();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, k], pm.to_vec()).unwrap());
        let b = g.constant(Tensor::new(vec![1, k], pb.to_vec()).unwrap());
        let out = match gate {
            None => poe_fuse(&mut g, a, b).unwrap(),
            Some(v) => {
                let gv = g.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
                lmh_fuse_with_gate(&mut g, a, b, gv).unwrap()
            }
        };
        g.value(out).data().to_vec()
    }

    #[test]
    fn poe_examples() {
        let p = fuse(&[0.5, 0.5], &[0.9, 0.1], None);
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12);
        let pm = [0.2, 0.5, 0.3];
        let p = fuse(&pm, &[1.0 / 3.0; 3], None);
        for (a, b) in p.iter().zip(pm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lmh_gate_two() {
        let p = fuse(&[0.6, 0.4], &[0.9, 0.1], Some(2.0));
        let (a, b) = (0.6 * 0.81, 0.4 * 0.01);
        assert!((p[0] - a / (a + b)).abs() < 1e-12);
        assert!((p[1] - b / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn lmh_gate_closed_recovers_main() {
        let mut g = Graph::new();
        let pm = g.constant(Tensor::new(vec![1, 2], vec![0.7, 0.3]).unwrap());
        let pb = g.constant(Tensor::new(vec![1, 2], vec![0.99, 0.01]).unwrap());
        let h = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 1], vec![-400.0, -400.0]).unwrap());
        let (p, gate) = lmh_fuse(&mut g, pm, pb, h, w).unwrap();
        assert!(g.value(gate).item() >= 0.0);
        assert!((g.value(p).data()[0] - 0.7).abs() < 1e-12);
    }

    fn entropy(pb: &[f64], gate: f64, z: f64) -> f64 {
        let mut g = Graph::new();
        let b = g.constant(Tensor::new(vec![1, pb.len()], pb.to_vec()).unwrap());
        let gv = g.constant(Tensor::new(vec![1, 1], vec![gate]).unwrap());
        let r = entropy_penalty(&mut g, b, gv, z).unwrap();
        g.value(r).item()
    }

    #[test]
    fn entropy_examples() {
        let k = 4.0f64;
        assert!((entropy(&[0.25; 4], 3.0, 0.5) - 0.5 * k.ln()).abs() < 1e-12);
        assert!((entropy(&[0.7, 0.1, 0.1, 0.1], 0.0, 1.0) - k.ln()).abs() < 1e-12);
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&[0.9, 0.1], 1.0, 1.0) - h).abs() < 1e-12);
        assert!((entropy(&[0.9, 0.1], 1.0, 1.0) - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn prior_examples() {
        let pairs = std::iter::repeat_n((3, 0), 80).chain(std::iter::repeat_n((3, 1), 20));
        let p = BiasPrior::fit(pairs, 2, 0.0).unwrap();
        assert_eq!(p.lookup(3), vec![0.8, 0.2]);
        assert_eq!(p.lookup(99), vec![0.5, 0.5]);
        let empty = normalize(&[0.0; 4], 1.0);
        assert_eq!(empty, vec![0.25; 4]);
        let back = BiasPrior::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
