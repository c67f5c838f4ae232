use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max over elements of `|analytic - numeric| / (|numeric| + 1e-8)`
    pub max_rel_error: f64,
    /// flat index of the element attaining the maximum
    pub worst_index: usize,
}

/// Compares the tape gradient of a scalar map `f` at `x` with central
/// differences of half-width `step`.
///
/// `f` receives a fresh graph and the leaf holding the (perturbed) input, and
/// must return a single-element node.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(AutodiffError::NonFinite {
            index: 0,
            value: base,
        });
    }
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(probe, false);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(AutodiffError::NonFinite {
                index: i,
                value: numeric,
            });
        }
        if !analytic[i].is_finite() {
            return Err(AutodiffError::NonFinite {
                index: i,
                value: analytic[i],
            });
        }
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        if err > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}
