//! Sparsity allocation across modules.
//!
//! The overall budget constraint is
//! `s_L·|θ_Lan| + s_R·|θ_Vis| + s_X·|θ_X| = s·(|θ_Lan| + |θ_Vis| + |θ_X|)`,
//! with the pooler pinned to `s` and left out of the arithmetic.

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_parameters, ModuleTag, ParameterRegistry, TagFilter};
use crate::pruning::{pruned_count, MaskSet};

/// Strict tolerance of [`verify_overall`], relative to the total size.
pub const OVERALL_TOLERANCE: f64 = 1e-6;
const FEASIBILITY_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    ModalitySpecific,
    MatrixSpecific,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::ModalitySpecific => "modality-specific",
            Scheme::MatrixSpecific => "matrix-specific",
        }
    }
}

/// Module sizes in any consistent unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSizes {
    pub language: f64,
    pub visual: f64,
    pub cross: f64,
    pub pooler: f64,
}

impl ModuleSizes {
    /// Base-model sizes in millions.
    pub const BASE_SCALE: ModuleSizes = ModuleSizes {
        language: 83.1,
        visual: 35.3,
        cross: 78.8,
        pooler: 0.5,
    };

    pub fn from_registry(registry: &ParameterRegistry) -> Self {
        let c = |tag| count_parameters(registry, &TagFilter::prunable(&[tag])) as f64;
        Self {
            language: c(ModuleTag::Language),
            visual: c(ModuleTag::Visual),
            cross: c(ModuleTag::Cross),
            pooler: c(ModuleTag::Pooler),
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.language, self.visual, self.cross].iter().all(|v| *v > 0.0) && self.pooler >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidSparsity(format!("module sizes must be positive, got {self:?}")))
        }
    }

    fn constrained_total(&self) -> f64 {
        self.language + self.visual + self.cross
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSparsity {
    pub language: f64,
    pub visual: f64,
    pub cross: f64,
}

impl ModuleSparsity {
    pub fn new(language: f64, visual: f64, cross: f64) -> Self {
        Self {
            language,
            visual,
            cross,
        }
    }

    pub fn rounded(&self) -> Self {
        Self::new(round2(self.language), round2(self.visual), round2(self.cross))
    }

    fn key(&self) -> [i64; 3] {
        [self.language, self.visual, self.cross].map(|v| (round2(v) * 100.0).round() as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub overall: f64,
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modules: Option<ModuleSparsity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<ModuleSizes>,
}

impl SparsityConfig {
    pub fn uniform(s: f64) -> Self {
        Self {
            overall: s,
            scheme: Scheme::Uniform,
            modules: Some(ModuleSparsity::new(s, s, s)),
            sizes: None,
        }
    }

    pub fn modality_specific(s: f64, modules: ModuleSparsity, sizes: ModuleSizes) -> Self {
        Self {
            overall: s,
            scheme: Scheme::ModalitySpecific,
            modules: Some(modules),
            sizes: Some(sizes),
        }
    }

    pub fn matrix_specific(s: f64) -> Self {
        Self {
            overall: s,
            scheme: Scheme::MatrixSpecific,
            modules: None,
            sizes: None,
        }
    }

    pub fn is_matrix_specific(&self) -> bool {
        self.scheme == Scheme::MatrixSpecific
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.overall) {
            return Err(Error::Infeasible { value: self.overall });
        }
        if let Some(m) = &self.modules {
            for v in [m.language, m.visual, m.cross] {
                if !in_unit(v) {
                    return Err(Error::Infeasible { value: v });
                }
            }
        }
        match self.scheme {
            Scheme::Uniform => {
                if let Some(m) = &self.modules {
                    if [m.language, m.visual, m.cross].iter().any(|&v| v != self.overall) {
                        return Err(Error::InvalidSparsity("uniform scheme with unequal module sparsities".into()));
                    }
                }
            }
            Scheme::ModalitySpecific => {
                if self.modules.is_none() {
                    return Err(Error::InvalidSparsity("modality-specific scheme needs module sparsities".into()));
                }
                if let Some(sizes) = &self.sizes {
                    sizes.validate()?;
                }
            }
            Scheme::MatrixSpecific => {}
        }
        Ok(())
    }

    /// Target sparsity of a matrix with this tag. The pooler follows the
    /// overall budget and the classifier is never pruned.
    pub fn target_for(&self, tag: ModuleTag) -> f64 {
        let m = match (self.scheme, &self.modules) {
            (Scheme::ModalitySpecific, Some(m)) => *m,
            _ => ModuleSparsity::new(self.overall, self.overall, self.overall),
        };
        match tag {
            ModuleTag::Language => m.language,
            ModuleTag::Visual => m.visual,
            ModuleTag::Cross => m.cross,
            ModuleTag::Pooler => self.overall,
            ModuleTag::Classifier => 0.0,
        }
    }

    /// Per-matrix targets for every prunable matrix. The matrix-specific
    /// scheme ranks magnitudes from `source` (or the weights when absent).
    pub fn targets(&self, registry: &ParameterRegistry, source: Option<&MaskSet>) -> Result<IndexMap<String, f64>> {
        self.validate()?;
        if self.is_matrix_specific() {
            return matrix_specific_targets(registry, self.overall, source);
        }
        Ok(registry
            .prunable()
            .map(|(name, p)| (name.clone(), self.target_for(p.tag)))
            .collect())
    }

    /// Label used in reports, e.g. `uniform 0.50` or `modality 0.50/0.70/0.41`.
    pub fn label(&self) -> String {
        match (self.scheme, &self.modules) {
            (Scheme::ModalitySpecific, Some(m)) => format!(
                "modality {:.2}/{:.2}/{:.2}",
                m.language, m.visual, m.cross
            ),
            (scheme, _) => format!("{} {:.2}", scheme.as_str(), self.overall),
        }
    }
}

/// Round half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    // 0.145 is stored as 0.14499999999999999
    let nudged = scaled + scaled.signum() * 1e-9;
    nudged.round() / 100.0
}

/// Which two module sparsities are known.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Known {
    LanguageVisual(f64, f64),
    LanguageCross(f64, f64),
    VisualCross(f64, f64),
}

/// Solves the remaining module sparsity from the other two.
pub fn solve_third(s: f64, known: Known, sizes: &ModuleSizes) -> Result<f64> {
    sizes.validate()?;
    let budget = s * sizes.constrained_total();
    let raw = match known {
        Known::LanguageVisual(l, r) => (budget - l * sizes.language - r * sizes.visual) / sizes.cross,
        Known::LanguageCross(l, x) => (budget - l * sizes.language - x * sizes.cross) / sizes.visual,
        Known::VisualCross(r, x) => (budget - r * sizes.visual - x * sizes.cross) / sizes.language,
    };
    if raw < -FEASIBILITY_SLACK || raw > 1.0 + FEASIBILITY_SLACK || !raw.is_finite() {
        return Err(Error::Infeasible { value: raw });
    }
    Ok(raw.clamp(0.0, 1.0))
}

/// Completes a triple from two known values.
pub fn complete(s: f64, known: Known, sizes: &ModuleSizes) -> Result<ModuleSparsity> {
    let third = solve_third(s, known, sizes)?;
    Ok(match known {
        Known::LanguageVisual(l, r) => ModuleSparsity::new(l, r, third),
        Known::LanguageCross(l, x) => ModuleSparsity::new(l, third, x),
        Known::VisualCross(r, x) => ModuleSparsity::new(third, r, x),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub verified: bool,
    /// `|Σ s_i·n_i − s·Σ n_i| / Σ n_i`
    pub residual: f64,
    /// Overall sparsity the module triple actually implies.
    pub implied_overall: f64,
}

pub fn implied_overall(modules: &ModuleSparsity, sizes: &ModuleSizes) -> f64 {
    (modules.language * sizes.language + modules.visual * sizes.visual + modules.cross * sizes.cross)
        / sizes.constrained_total()
}

/// Checks the budget constraint to [`OVERALL_TOLERANCE`].
pub fn verify_overall(config: &SparsityConfig) -> Result<Verification> {
    verify_overall_within(config, OVERALL_TOLERANCE)
}

/// Checks the budget constraint to a caller-chosen tolerance, e.g. the
/// half-unit of a printed table's last digit.
pub fn verify_overall_within(config: &SparsityConfig, tolerance: f64) -> Result<Verification> {
    let modules = config
        .modules
        .ok_or_else(|| Error::InvalidSparsity("verification needs all three module sparsities".into()))?;
    let sizes = config.sizes.unwrap_or(ModuleSizes::BASE_SCALE);
    sizes.validate()?;
    let implied = implied_overall(&modules, &sizes);
    let residual = (implied - config.overall).abs();
    Ok(Verification {
        verified: residual <= tolerance,
        residual,
        implied_overall: implied,
    })
}

const COARSE_STEPS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

fn dedupe(mut found: Vec<ModuleSparsity>) -> Vec<ModuleSparsity> {
    found.sort_by(|a, b| a.key()[..2].cmp(&b.key()[..2]));
    let mut seen = std::collections::HashSet::new();
    found.retain(|m| seen.insert(m.key()));
    found
}

fn pair_grid(s: f64, sizes: &ModuleSizes, axes: [&[f64]; 3]) -> Vec<ModuleSparsity> {
    let [l_axis, r_axis, x_axis] = axes;
    let mut found = Vec::new();
    let mut push = |k: Known| {
        if let Ok(m) = complete(s, k, sizes) {
            found.push(m);
        }
    };
    for &a in l_axis {
        for &b in r_axis {
            push(Known::LanguageVisual(a, b));
        }
        for &b in x_axis {
            push(Known::LanguageCross(a, b));
        }
    }
    for &a in r_axis {
        for &b in x_axis {
            push(Known::VisualCross(a, b));
        }
    }
    found
}

fn configs(s: f64, sizes: &ModuleSizes, found: Vec<ModuleSparsity>) -> Vec<SparsityConfig> {
    dedupe(found)
        .into_iter()
        .map(|m| SparsityConfig::modality_specific(s, m, *sizes))
        .collect()
}

/// Every pairing of two modules over {0.1, 0.3, 0.5, 0.7, 0.9}, the third
/// solved, infeasible triples dropped, duplicates (at two decimals) merged
/// keeping the first in `(s_L, s_R)` order. The uniform point is included.
pub fn coarse_grid(s: f64, sizes: &ModuleSizes) -> Result<Vec<SparsityConfig>> {
    sizes.validate()?;
    let mut found = pair_grid(s, sizes, [&COARSE_STEPS; 3]);
    if (0.0..=1.0).contains(&s) {
        found.push(ModuleSparsity::new(s, s, s));
    }
    Ok(configs(s, sizes, found))
}

/// Inclusive bounds per module for [`refine_grid`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub language: (f64, f64),
    pub visual: (f64, f64),
    pub cross: (f64, f64),
}

impl Region {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self {
            language: (lo, hi),
            visual: (lo, hi),
            cross: (lo, hi),
        }
    }
}

fn axis((lo, hi): (f64, f64), step: f64) -> Vec<f64> {
    if !(lo <= hi) || !(step > 0.0) {
        return Vec::new();
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Same enumeration as [`coarse_grid`] at a finer step inside `region`.
/// The solved module only has to be feasible, not inside the region.
pub fn refine_grid(region: &Region, s: f64, sizes: &ModuleSizes, step: f64) -> Result<Vec<SparsityConfig>> {
    sizes.validate()?;
    for (lo, hi) in [region.language, region.visual, region.cross] {
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::InvalidSparsity(format!("region bound ({lo}, {hi}) outside [0, 1]")));
        }
    }
    let (l, r, x) = (axis(region.language, step), axis(region.visual, step), axis(region.cross, step));
    if l.is_empty() || r.is_empty() || x.is_empty() {
        return Ok(Vec::new());
    }
    Ok(configs(s, sizes, pair_grid(s, sizes, [&l, &r, &x])))
}

/// One global magnitude ranking over every prunable scalar; the induced
/// per-matrix sparsities average (size-weighted) to `⌈s·N⌉ / N`.
pub fn matrix_specific_targets(
    registry: &ParameterRegistry,
    s: f64,
    source: Option<&MaskSet>,
) -> Result<IndexMap<String, f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Infeasible { value: s });
    }
    let mut scores: Vec<(f64, usize, usize)> = Vec::new();
    let mut names = Vec::new();
    for (mi, (name, p)) in registry.prunable().enumerate() {
        let real = source.and_then(|m| m.get(name)).and_then(|m| m.real.as_ref());
        match real {
            Some(r) => scores.extend(r.iter().enumerate().map(|(i, &v)| (v, mi, i))),
            None => scores.extend(p.value.data().iter().enumerate().map(|(i, &v)| (v.abs(), mi, i))),
        }
        names.push((name.clone(), p.value.numel()));
    }
    let k = pruned_count(s, scores.len());
    if k < scores.len() {
        scores.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    }
    let mut pruned = vec![0usize; names.len()];
    for &(_, mi, _) in &scores[..k] {
        pruned[mi] += 1;
    }
    Ok(names
        .into_iter()
        .zip(pruned)
        .map(|((name, n), p)| (name, p as f64 / n as f64))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRow {
    #[serde(rename = "s_L")]
    s_l: f64,
    #[serde(rename = "s_R")]
    s_r: f64,
    #[serde(rename = "s_X")]
    s_x: f64,
    feasible: bool,
}

/// Writes `s_L, s_R, s_X, feasible` rows.
pub fn write_grid_csv<W: Write>(writer: W, grid: &[SparsityConfig]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if grid.is_empty() {
        w.write_record(["s_L", "s_R", "s_X", "feasible"])?;
    }
    for c in grid {
        let m = c
            .modules
            .ok_or_else(|| Error::InvalidSparsity("grid rows need module sparsities".into()))?;
        let feasible = c.validate().is_ok() && verify_overall(c)?.verified;
        w.serialize(GridRow {
            s_l: m.language,
            s_r: m.visual,
            s_x: m.cross,
            feasible,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_grid_csv`] as `(triple, feasible)`.
pub fn read_grid_csv<R: Read>(reader: R) -> Result<Vec<(ModuleSparsity, bool)>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<GridRow>()
        .map(|row| {
            let row = row?;
            Ok((ModuleSparsity::new(row.s_l, row.s_r, row.s_x), row.feasible))
        })
        .collect()
}
