//! Evaluation: mean-per-label precision/recall/F1, precision-recall
//! curves over a threshold or top-n sweep, and annotation-time benchmarks
//! against a nearest-neighbor baseline.

use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::annotator::{encode, score_labels};
use crate::baselines::knn_annotate;
use crate::data::{FeatureMatrix, LabelMatrix, Model};
use crate::error::{Error, Result};

/// Mean-per-label precision, recall, and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PRF {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mean-per-label metrics of a binary prediction against ground truth.
///
/// Per label: precision is TP/(TP+FP), zero when the label is never
/// predicted; recall is TP/(TP+FN). Labels with no positive ground truth
/// are excluded from both means; with every label excluded all three
/// metrics are zero.
pub fn per_label_prf(pred: &LabelMatrix, truth: &LabelMatrix) -> Result<PRF> {
    if pred.label_count() != truth.label_count() || pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "predictions are {}x{}, truth is {}x{}",
            pred.label_count(),
            pred.len(),
            truth.label_count(),
            truth.len()
        )));
    }
    let mut sum_p = 0.0;
    let mut sum_r = 0.0;
    let mut retained = 0usize;
    for t in 0..truth.label_count() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut pos = 0usize;
        for i in 0..truth.len() {
            let p = pred.values()[[t, i]] != 0.0;
            let y = truth.values()[[t, i]] != 0.0;
            if y {
                pos += 1;
            }
            match (p, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                _ => {}
            }
        }
        if pos == 0 {
            continue;
        }
        retained += 1;
        if tp + fp > 0 {
            sum_p += tp as f64 / (tp + fp) as f64;
        }
        sum_r += tp as f64 / pos as f64;
    }
    if retained == 0 {
        return Ok(PRF { precision: 0.0, recall: 0.0, f1: 0.0 });
    }
    let precision = sum_p / retained as f64;
    let recall = sum_r / retained as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PRF { precision, recall, f1 })
}

/// How a precision-recall curve varies its operating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMode {
    /// Sweep the decision threshold over the observed score range.
    Threshold,
    /// Assign each query its n best labels, n = 1..label count.
    TopN,
}

impl FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(CurveMode::Threshold),
            "topn" => Ok(CurveMode::TopN),
            other => Err(Error::InvalidParam(format!(
                "unknown curve mode '{other}', expected 'threshold' or 'topn'"
            ))),
        }
    }
}

impl std::fmt::Display for CurveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CurveMode::Threshold => "threshold",
            CurveMode::TopN => "topn",
        })
    }
}

/// One operating point: the threshold or top-n value it was computed at,
/// plus the mean-per-label precision and recall there.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub operating: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall curve; operating values strictly increase.
#[derive(Debug, Clone, Serialize)]
pub struct PRCurve {
    pub points: Vec<CurvePoint>,
}

/// Precision-recall curve of a score matrix against ground truth.
///
/// Threshold mode evaluates at zero, at the midpoints of consecutive
/// distinct scores, and at the maximum score, predicting labels whose
/// score strictly exceeds the threshold. Top-n mode evaluates n = 1 up
/// to the label count, assigning each query its n highest-scoring labels
/// with ties broken toward the lowest index.
pub fn pr_curve(scores: &Array2<f64>, truth: &LabelMatrix, mode: CurveMode) -> Result<PRCurve> {
    if scores.nrows() != truth.label_count() || scores.ncols() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "scores are {}x{}, truth is {}x{}",
            scores.nrows(),
            scores.ncols(),
            truth.label_count(),
            truth.len()
        )));
    }
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let mut points = Vec::new();
    match mode {
        CurveMode::Threshold => {
            let mut distinct: Vec<f64> = scores.iter().copied().collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let mut candidates = vec![0.0, *distinct.last().unwrap()];
            for w in distinct.windows(2) {
                candidates.push(0.5 * (w[0] + w[1]));
            }
            candidates.sort_by(f64::total_cmp);
            candidates.dedup();
            for &tau in &candidates {
                let pred = LabelMatrix::new(
                    scores.mapv(|s| if s > tau { 1.0 } else { 0.0 }),
                )?;
                let prf = per_label_prf(&pred, truth)?;
                points.push(CurvePoint {
                    operating: tau,
                    precision: prf.precision,
                    recall: prf.recall,
                });
            }
        }
        CurveMode::TopN => {
            for n in 1..=truth.label_count() {
                let mut pred = Array2::zeros((truth.label_count(), truth.len()));
                for i in 0..truth.len() {
                    for t in top_n_indices(scores.column(i), n) {
                        pred[[t, i]] = 1.0;
                    }
                }
                let prf = per_label_prf(&LabelMatrix::new(pred)?, truth)?;
                points.push(CurvePoint {
                    operating: n as f64,
                    precision: prf.precision,
                    recall: prf.recall,
                });
            }
        }
    }
    Ok(PRCurve { points })
}

/// Indices of the n largest finite scores, best first; exact ties rank
/// the lower index first.
pub fn top_n_indices(scores: ArrayView1<f64>, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Brute-force nearest-neighbor baseline over a held training set.
#[derive(Debug, Clone, Copy)]
pub struct KnnConfig<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a LabelMatrix,
    pub k: usize,
}

/// Wall-time comparison of the two annotation paths, milliseconds per
/// query. Each sample is one timed pass over the whole query batch
/// divided by the batch size; the means average the samples.
#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub mcdl_mean_ms: f64,
    pub knn_mean_ms: f64,
    /// Relative time saved by the dictionary path, in percent.
    pub reduction_percent: f64,
    pub mcdl_samples_ms: Vec<f64>,
    pub knn_samples_ms: Vec<f64>,
}

/// Times model annotation against the nearest-neighbor baseline on the
/// same queries. Both measured paths run single-threaded.
pub fn bench_annotation(
    model: &Model,
    queries: &FeatureMatrix,
    baseline: &KnnConfig,
    repeats: usize,
) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::InvalidParam("repeats must be at least 1".into()));
    }
    let q_count = queries.len() as f64;

    // One untimed pass per path so lazy setup stays out of the samples.
    let first = queries.values().column(0);
    let code = encode(model, first)?;
    std::hint::black_box(score_labels(model, &code));
    std::hint::black_box(knn_annotate(
        baseline.features,
        baseline.labels,
        first,
        baseline.k,
    )?);

    let mut mcdl_samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for i in 0..queries.len() {
            let code = encode(model, queries.values().column(i))?;
            std::hint::black_box(score_labels(model, &code));
        }
        mcdl_samples_ms.push(start.elapsed().as_secs_f64() * 1e3 / q_count);
    }
    let mut knn_samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for i in 0..queries.len() {
            std::hint::black_box(knn_annotate(
                baseline.features,
                baseline.labels,
                queries.values().column(i),
                baseline.k,
            )?);
        }
        knn_samples_ms.push(start.elapsed().as_secs_f64() * 1e3 / q_count);
    }

    let mcdl_mean_ms = mcdl_samples_ms.iter().sum::<f64>() / repeats as f64;
    let knn_mean_ms = knn_samples_ms.iter().sum::<f64>() / repeats as f64;
    let reduction_percent = (knn_mean_ms - mcdl_mean_ms) / knn_mean_ms * 100.0;
    Ok(TimingReport {
        mcdl_mean_ms,
        knn_mean_ms,
        reduction_percent,
        mcdl_samples_ms,
        knn_samples_ms,
    })
}
