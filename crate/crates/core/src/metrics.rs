//! Task metrics: top-k accuracy, image-wise mean average precision, mean
//! absolute error in years, interval accuracy and confusion matrices.
//!
//! Every ranking breaks score ties by the lower class id so results are
//! reproducible across platforms.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::model::TaskKind;
use crate::{Error, Result};

/// Default tolerance, in years, for [`interval_accuracy`].
pub const PERIOD_TOLERANCE_YEARS: f64 = 50.0;

/// Whether class `a` ranks before class `b` in a score row.
#[inline]
fn ranks_before(scores: ArrayView1<f64>, a: usize, b: usize) -> bool {
    scores[a] > scores[b] || (scores[a] == scores[b] && a < b)
}

/// Label indices of one row sorted by descending score, ties by lower id.
pub fn ranked_labels(scores: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Arg-max per row with the lower id winning ties.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| (0..row.len()).fold(0, |best, j| if ranks_before(row, j, best) { j } else { best }))
        .collect()
}

/// Fraction of rows whose true class is among the `k` highest scores.
pub fn topk_accuracy(scores: ArrayView2<f64>, truth: &[usize], k: usize) -> Result<f64> {
    let (b, classes) = scores.dim();
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k = {k} outside 1..={classes}")));
    }
    if truth.len() != b {
        return Err(Error::dims(format!("{} truth labels for {} score rows", truth.len(), b)));
    }
    if b == 0 {
        return Err(Error::UndefinedMetric("top-k accuracy of zero samples".into()));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("true class {t} out of range")));
    }
    let hits = scores
        .rows()
        .into_iter()
        .zip(truth)
        .filter(|(row, &t)| (0..classes).filter(|&j| j != t && ranks_before(*row, j, t)).count() < k)
        .count();
    Ok(hits as f64 / b as f64)
}

/// Average precision of one ranked row; `None` when the row has no positive.
pub fn average_precision(scores: ArrayView1<f64>, truth: ArrayView1<bool>) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, label) in ranked_labels(scores).into_iter().enumerate() {
        if truth[label] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Image-wise MAP: per-sample average precision over the ranked label list,
/// averaged over samples with at least one positive label.
pub fn sample_map(scores: ArrayView2<f64>, truth: ArrayView2<bool>) -> Result<f64> {
    if scores.dim() != truth.dim() {
        return Err(Error::dims(format!("scores {:?} vs truth {:?}", scores.dim(), truth.dim())));
    }
    let aps: Vec<f64> = scores
        .rows()
        .into_iter()
        .zip(truth.rows())
        .filter_map(|(s, t)| average_precision(s, t))
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no sample has a positive label".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Label-wise (macro) MAP: average precision per label column over the
/// ranked samples, averaged over labels with at least one positive.
pub fn label_map(scores: ArrayView2<f64>, truth: ArrayView2<bool>) -> Result<f64> {
    if scores.dim() != truth.dim() {
        return Err(Error::dims(format!("scores {:?} vs truth {:?}", scores.dim(), truth.dim())));
    }
    let aps: Vec<f64> = scores
        .columns()
        .into_iter()
        .zip(truth.columns())
        .filter_map(|(s, t)| average_precision(s, t))
        .collect();
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no label has a positive sample".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean absolute error in years after undoing `z = (y - mean) / std`.
pub fn mae_years(pred_std: &[f64], truth_std: &[f64], train_mean: f64, train_std: f64) -> Result<f64> {
    if !(train_std > 0.0) {
        return Err(Error::invalid(format!("train std must be > 0, got {train_std}")));
    }
    if pred_std.len() != truth_std.len() {
        return Err(Error::dims(format!("{} predictions vs {} targets", pred_std.len(), truth_std.len())));
    }
    if pred_std.is_empty() {
        return Err(Error::UndefinedMetric("MAE of zero samples".into()));
    }
    let total: f64 = pred_std
        .iter()
        .zip(truth_std)
        .map(|(p, t)| ((p * train_std + train_mean) - (t * train_std + train_mean)).abs())
        .sum();
    Ok(total / pred_std.len() as f64)
}

/// Fraction of predictions within `tolerance` of the truth, boundary inclusive.
pub fn interval_accuracy(pred_years: &[f64], truth_years: &[f64], tolerance: f64) -> Result<f64> {
    if pred_years.len() != truth_years.len() {
        return Err(Error::dims(format!("{} predictions vs {} targets", pred_years.len(), truth_years.len())));
    }
    if pred_years.is_empty() {
        return Err(Error::UndefinedMetric("interval accuracy of zero samples".into()));
    }
    let hits = pred_years
        .iter()
        .zip(truth_years)
        .filter(|(p, t)| (*p - *t).abs() <= tolerance)
        .count();
    Ok(hits as f64 / pred_years.len() as f64)
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    #[serde(with = "nested_rows")]
    pub counts: Array2<u64>,
}

/// Serializes a matrix as a list of rows.
mod nested_rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<u64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.rows().into_iter().map(|r| r.to_vec()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<u64>, D::Error> {
        let rows: Vec<Vec<u64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).map_err(D::Error::custom)
    }
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::dims(format!("{} predictions vs {} targets", pred.len(), truth.len())));
    }
    let mut counts = Array2::zeros((classes, classes));
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!("class index ({t}, {p}) out of range for {classes} classes")));
        }
        counts[[t, p]] += 1;
    }
    Ok(ConfusionMatrix {
        labels: (0..classes).map(|i| i.to_string()).collect(),
        counts,
    })
}

impl ConfusionMatrix {
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.counts.nrows() {
            return Err(Error::dims(format!("{} labels for {} classes", labels.len(), self.counts.nrows())));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts.diag().sum()
    }

    /// Copy with the main diagonal zeroed, leaving only the confusions.
    pub fn offdiagonal(&self) -> ConfusionMatrix {
        let mut out = self.clone();
        out.counts.diag_mut().fill(0);
        out
    }

    /// CSV with a header row `true\predicted,<labels...>` and one row per true class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(self.counts.rows()) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let labels: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let k = labels.len();
        if k == 0 {
            return Err(Error::Csv("confusion matrix header has no class labels".into()));
        }
        let mut counts = Array2::zeros((k, k));
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= k || rec.len() != k + 1 {
                return Err(Error::Csv(format!("row {} does not fit a {k}x{k} matrix", i + 1)));
            }
            if rec[0] != labels[i] {
                return Err(Error::Csv(format!("row {} label '{}' does not match column '{}'", i + 1, &rec[0], labels[i])));
            }
            for j in 0..k {
                counts[[i, j]] = rec[j + 1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("row {}, column {}: not a count", i + 1, j + 1)))?;
            }
            rows += 1;
        }
        if rows != k {
            return Err(Error::Csv(format!("expected {k} rows, found {rows}")));
        }
        Ok(Self { labels, counts })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Metrics for a single task. Fields that do not apply to the task kind are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub kind: TaskKind,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_years: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

impl TaskMetrics {
    pub fn empty(kind: TaskKind) -> Self {
        Self {
            kind,
            samples: 0,
            top1: None,
            top3: None,
            map: None,
            label_map: None,
            mae_years: None,
            interval_accuracy: None,
            confusion: None,
        }
    }
}

/// Per-task metrics for one evaluated split, keyed by task name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub tasks: BTreeMap<String, TaskMetrics>,
}
