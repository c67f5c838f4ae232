//! Soft-score accuracy, seed aggregation, gaps and report export.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QuestionType};
use crate::error::{Error, Result};
use crate::model::{forward, ParameterRegistry};
use crate::pruning::{AuditReport, MaskSet};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub passed: bool,
    pub overall_sparsity: f64,
    pub target_overall: f64,
}

impl From<&AuditReport> for AuditSummary {
    fn from(r: &AuditReport) -> Self {
        Self {
            passed: r.passed,
            overall_sparsity: r.overall_sparsity,
            target_overall: r.target_overall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMetric {
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub seed: u64,
    pub overall: f64,
    pub count: usize,
    pub per_type: BTreeMap<QuestionType, TypeMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSummary>,
}

impl MetricsRecord {
    /// Example-weighted mean of the per-type accuracies.
    pub fn recombined(&self) -> f64 {
        let total: usize = self.per_type.values().map(|t| t.count).sum();
        if total == 0 {
            return 0.0;
        }
        self.per_type.values().map(|t| t.accuracy * t.count as f64).sum::<f64>() / total as f64
    }

    /// `overall`, then one entry per question type present.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![("overall".to_string(), self.overall)];
        for (t, m) in &self.per_type {
            out.push((t.as_str().to_string(), m.accuracy));
        }
        out
    }
}

/// Soft-score accuracy: each example earns the target score of the argmax
/// answer. Ties in the logits go to the lowest answer index.
pub fn evaluate(registry: &ParameterRegistry, masks: Option<&MaskSet>, split: &Dataset, seed: u64) -> Result<MetricsRecord> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.clone()));
    }
    let k = registry.config().answer_count;
    let mut sums: BTreeMap<QuestionType, (f64, usize)> = BTreeMap::new();
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (input, _) = split.batch(chunk);
        let out = forward(registry, masks, &input)?;
        for (row, &i) in out.logits.data().chunks_exact(k).zip(chunk) {
            let pred = argmax(row);
            let e = &split.examples[i];
            let entry = sums.entry(e.question_type).or_insert((0.0, 0));
            entry.0 += e.score(pred);
            entry.1 += 1;
        }
    }
    let total: f64 = sums.values().map(|s| s.0).sum();
    Ok(MetricsRecord {
        split: split.name.clone(),
        seed,
        overall: total / split.len() as f64,
        count: split.len(),
        per_type: sums
            .into_iter()
            .map(|(t, (s, n))| {
                (
                    t,
                    TypeMetric {
                        accuracy: s / n as f64,
                        count: n,
                    },
                )
            })
            .collect(),
        audit: None,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: String,
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Mean and population std per metric over seeds.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate> {
    let first = records
        .first()
        .ok_or_else(|| Error::InconsistentRecords("nothing to aggregate".into()))?;
    let names: Vec<String> = first.metrics().into_iter().map(|(n, _)| n).collect();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.split != first.split {
            return Err(Error::InconsistentRecords(format!(
                "splits `{}` and `{}` mixed",
                first.split, r.split
            )));
        }
        let m = r.metrics();
        if m.iter().map(|(n, _)| n).ne(names.iter()) {
            return Err(Error::InconsistentRecords("records carry different metrics".into()));
        }
        for (n, v) in m {
            columns.entry(n).or_default().push(v);
        }
    }
    Ok(Aggregate {
        split: first.split.clone(),
        metrics: columns
            .into_iter()
            .map(|(n, v)| (n, MeanStd::of(&v).expect("non-empty")))
            .collect(),
    })
}

/// `sub − full` per metric.
pub fn gap(sub: &MetricsRecord, full: &MetricsRecord) -> Result<BTreeMap<String, f64>> {
    if sub.split != full.split {
        return Err(Error::InconsistentRecords(format!(
            "gap between `{}` and `{}`",
            sub.split, full.split
        )));
    }
    let full_m: BTreeMap<String, f64> = full.metrics().into_iter().collect();
    Ok(sub
        .metrics()
        .into_iter()
        .filter_map(|(n, v)| full_m.get(&n).map(|f| (n, v - f)))
        .collect())
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub recipe: String,
    pub sparsity: String,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seed_count: usize,
}

/// Records of one recipe at one sparsity configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeResult {
    pub recipe: String,
    pub sparsity: String,
    /// Overall target sparsity, the x-axis of the curves.
    pub overall_sparsity: f64,
    pub records: Vec<MetricsRecord>,
}

/// Reference accuracies of the full-size experiments; context only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: String,
    pub name: String,
    pub value: f64,
}

pub const ANNOTATION_LABEL: &str = "paper-scale, not reproduced";

pub fn reference_annotations() -> Vec<Annotation> {
    [
        ("lxmert full model, bce", 48.01),
        ("lxmert full model, lmh", 63.55),
        ("best subnetwork at 50% sparsity", 63.88),
    ]
    .into_iter()
    .map(|(name, value)| Annotation {
        label: ANNOTATION_LABEL.into(),
        name: name.into(),
        value,
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sparsity: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    /// recipe → split → metric → points sorted by sparsity
    pub curves: BTreeMap<String, BTreeMap<String, BTreeMap<String, Vec<CurvePoint>>>>,
    pub annotations: Vec<Annotation>,
}

/// Flattens results into table rows, one per (recipe, sparsity, split,
/// metric).
pub fn report_rows(results: &[RecipeResult]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for r in results {
        let mut by_split: BTreeMap<&str, Vec<MetricsRecord>> = BTreeMap::new();
        for rec in &r.records {
            by_split.entry(&rec.split).or_default().push(rec.clone());
        }
        for (split, recs) in by_split {
            let agg = aggregate(&recs)?;
            for (metric, ms) in agg.metrics {
                rows.push(ReportRow {
                    recipe: r.recipe.clone(),
                    sparsity: r.sparsity.clone(),
                    split: split.to_string(),
                    metric,
                    mean: ms.mean,
                    std: ms.std,
                    seed_count: ms.n,
                });
            }
        }
    }
    Ok(rows)
}

pub fn bundle(results: &[RecipeResult]) -> Result<ReportBundle> {
    let mut curves: BTreeMap<String, BTreeMap<String, BTreeMap<String, Vec<CurvePoint>>>> = BTreeMap::new();
    for r in results {
        let mut by_split: BTreeMap<&str, Vec<MetricsRecord>> = BTreeMap::new();
        for rec in &r.records {
            by_split.entry(&rec.split).or_default().push(rec.clone());
        }
        for (split, recs) in by_split {
            for (metric, ms) in aggregate(&recs)?.metrics {
                curves
                    .entry(r.recipe.clone())
                    .or_default()
                    .entry(split.to_string())
                    .or_default()
                    .entry(metric)
                    .or_default()
                    .push(CurvePoint {
                        sparsity: r.overall_sparsity,
                        mean: ms.mean,
                        std: ms.std,
                    });
            }
        }
    }
    for splits in curves.values_mut() {
        for metrics in splits.values_mut() {
            for points in metrics.values_mut() {
                points.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity));
            }
        }
    }
    Ok(ReportBundle {
        curves,
        annotations: reference_annotations(),
    })
}

const CSV_HEADER: [&str; 7] = ["recipe", "sparsity", "split", "metric", "mean", "std", "seed_count"];

pub fn write_rows_csv<W: Write>(writer: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!("unexpected report header {headers:?}")));
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn export(results: &[RecipeResult], dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("report.json");
    write_rows_csv(std::fs::File::create(&csv_path)?, &report_rows(results)?)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&bundle(results)?)?)?;
    Ok((csv_path, json_path))
}

/// Plain-text table of the rows.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<48} {:<26} {:<6} {:<8} {:>8} {:>8} {:>5}\n",
        "recipe", "sparsity", "split", "metric", "mean", "std", "seeds"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<48} {:<26} {:<6} {:<8} {:>8.4} {:>8.4} {:>5}\n",
            r.recipe, r.sparsity, r.split, r.metric, r.mean, r.std, r.seed_count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(split: &str, overall: f64) -> MetricsRecord {
        MetricsRecord {
            split: split.into(),
            seed: 0,
            overall,
            count: 1,
            per_type: BTreeMap::from([(QuestionType::YesNo, TypeMetric { accuracy: overall, count: 1 })]),
            audit: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[record("test", 0.5), record("test", 0.7)]).unwrap();
        let m = a.metrics["overall"];
        assert!((m.mean - 0.6).abs() < 1e-12 && (m.std - 0.1).abs() < 1e-12);
        let one = aggregate(&[record("test", 0.4)]).unwrap();
        assert_eq!(one.metrics["overall"].std, 0.0);
        assert!(aggregate(&[record("test", 0.5), record("train", 0.5)]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn gap_examples() {
        let (s, f) = (record("test", 0.55), record("test", 0.48));
        assert!((gap(&s, &f).unwrap()["overall"] - 0.07).abs() < 1e-12);
        assert!(gap(&s, &s).unwrap().values().all(|v| *v == 0.0));
        let (ab, ba) = (gap(&s, &f).unwrap(), gap(&f, &s).unwrap());
        for (k, v) in &ab {
            assert_eq!(*v, -ba[k]);
        }
    }

    #[test]
    fn empty_rows_give_header_only() {
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().trim(), CSV_HEADER.join(","));
        assert!(read_rows_csv(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn annotations_carry_reference_values() {
        let a = reference_annotations();
        let vals: Vec<f64> = a.iter().map(|x| x.value).collect();
        assert_eq!(vals, vec![48.01, 63.55, 63.88]);
        assert!(a.iter().all(|x| x.label == ANNOTATION_LABEL));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }
}
