//! Query-time annotation: encode a raw vector against the visual
//! dictionary, score labels through the semantic dictionary, and threshold
//! with the stored decision cutoff. Per-query cost depends only on the
//! model's dimensions, never on the size of the training set.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::data::{apply_pca_vector, FeatureMatrix, LabelMatrix, Model};
use crate::error::{Error, Result};
use crate::solver::{nn_lasso_with_gram, SparseCode};

/// Result of annotating one query.
#[derive(Debug, Clone)]
pub struct Annotation {
    /// Per-label scores in [0, cap].
    pub scores: Array1<f64>,
    /// predicted[t] holds exactly when scores[t] strictly exceeds the
    /// stored threshold (ties predict negative).
    pub predicted: Vec<bool>,
    pub code: SparseCode,
}

/// Sparse-codes one raw query: stored projection, unit normalization,
/// then the nonnegative l1-ball solve against the visual dictionary using
/// the model's cached Gram.
pub fn encode(model: &Model, x_raw: ArrayView1<f64>) -> Result<SparseCode> {
    if x_raw.len() != model.raw_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} features, model expects {}",
            x_raw.len(),
            model.raw_dim()
        )));
    }
    if !x_raw.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("query vector".into()));
    }
    let mut x = match model.pca() {
        Some(p) => apply_pca_vector(p, &x_raw.to_owned())?,
        None => x_raw.to_owned(),
    };
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.mapv_inplace(|v| v / norm);
    }
    // Row-accumulated D'x: every dictionary row is contiguous, the
    // transposed gemv is not.
    let dict = model.visual_dict();
    let mut corr = Array1::zeros(dict.ncols());
    for (r, &xr) in x.iter().enumerate() {
        corr.scaled_add(xr, &dict.row(r));
    }
    let hp = model.hyperparams();
    nn_lasso_with_gram(model.visual_gram(), &corr, hp.code_l1_bound, hp.tol)
}

/// Semantic scores of a code: the matrix-vector product with the semantic
/// dictionary, clamped to [0, cap] against float drift.
pub fn score_labels(model: &Model, code: &SparseCode) -> Array1<f64> {
    let cap = model.hyperparams().margin.cap;
    let mut scores = model.semantic_dict().dot(code.coeffs());
    scores.mapv_inplace(|v| v.clamp(0.0, cap));
    scores
}

/// Scores every column of `x` through the annotation path; columns are
/// independent queries. Returns labels x queries.
pub fn score_matrix(model: &Model, x: &FeatureMatrix) -> Result<Array2<f64>> {
    let cols: Vec<Array1<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| -> Result<Array1<f64>> {
            let code = encode(model, x.values().column(i))?;
            Ok(score_labels(model, &code))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Array2::zeros((model.label_count(), x.len()));
    for (i, col) in cols.iter().enumerate() {
        scores.column_mut(i).assign(col);
    }
    Ok(scores)
}

/// Full annotation of one query with the stored threshold.
pub fn annotate(model: &Model, x_raw: ArrayView1<f64>) -> Result<Annotation> {
    let code = encode(model, x_raw)?;
    let scores = score_labels(model, &code);
    let tau = model.tau_optimal();
    let predicted = scores.iter().map(|&s| s > tau).collect();
    Ok(Annotation { scores, predicted, code })
}

/// Indices of the n highest-scoring labels in rank order, lowest index
/// first among ties.
pub fn annotate_topn(model: &Model, x_raw: ArrayView1<f64>, n: usize) -> Result<Vec<usize>> {
    let t_count = model.label_count();
    if n == 0 || n > t_count {
        return Err(Error::InvalidParam(format!(
            "top-n count {n} must be in 1..={t_count}"
        )));
    }
    let code = encode(model, x_raw)?;
    let scores = score_labels(model, &code);
    Ok(crate::eval::top_n_indices(scores.view(), n))
}

/// Decision threshold maximizing mean-per-label F1 over the training set,
/// re-encoding the raw training features through the annotation path.
/// Ties prefer the smallest threshold.
pub fn select_threshold(model: &Model, x_train: &FeatureMatrix, y: &LabelMatrix) -> Result<f64> {
    if x_train.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature columns but {} label columns",
            x_train.len(),
            y.len()
        )));
    }
    let scores = score_matrix(model, x_train)?;
    let (tau, _) = select_threshold_for_scores(&scores, y, model.hyperparams().margin.cap)?;
    Ok(tau)
}

/// Threshold sweep over a precomputed score matrix; returns the chosen
/// threshold and the F1 it achieves.
///
/// Candidates are the midpoints of consecutive distinct scores plus 0 and
/// the cap. The sweep walks candidates from high to low, maintaining
/// per-label confusion counters and the running per-label precision and
/// recall sums, so the whole sweep costs one sort plus O(1) per score.
pub fn select_threshold_for_scores(
    scores: &Array2<f64>,
    truth: &LabelMatrix,
    cap: f64,
) -> Result<(f64, f64)> {
    let t_count = truth.label_count();
    let q = truth.len();
    if scores.nrows() != t_count || scores.ncols() != q {
        return Err(Error::DimensionMismatch(format!(
            "scores are {}x{}, truth is {}x{}",
            scores.nrows(),
            scores.ncols(),
            t_count,
            q
        )));
    }
    if !(cap > 0.0) {
        return Err(Error::InvalidParam(format!(
            "score cap must be positive, got {cap}"
        )));
    }

    // Labels without positive ground truth are excluded from both means.
    let positives: Vec<usize> = (0..t_count)
        .map(|t| truth.values().row(t).iter().filter(|&&v| v != 0.0).count())
        .collect();
    let retained: Vec<bool> = positives.iter().map(|&p| p > 0).collect();
    let retained_count = retained.iter().filter(|&&r| r).count();
    if retained_count == 0 {
        return Ok((0.0, 0.0));
    }

    // Entries of retained labels, sorted by descending score; index order
    // breaks exact ties deterministically.
    let mut entries: Vec<(f64, usize, bool)> = Vec::new();
    for t in 0..t_count {
        if !retained[t] {
            continue;
        }
        for i in 0..q {
            entries.push((scores[[t, i]], t, truth.values()[[t, i]] != 0.0));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    // Candidate thresholds from all scores, high to low.
    let mut distinct: Vec<f64> = scores.iter().copied().collect();
    distinct.sort_by(|a, b| b.partial_cmp(a).unwrap());
    distinct.dedup();
    let mut candidates = vec![cap];
    for w in distinct.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(0.0);
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.dedup();

    let mut tp = vec![0usize; t_count];
    let mut pred = vec![0usize; t_count];
    let mut cursor = 0usize;
    let mut best_tau = candidates[0];
    let mut best_f1 = -1.0;
    for &tau in &candidates {
        // Predictions are strict, so include every score above tau.
        while cursor < entries.len() && entries[cursor].0 > tau {
            let (_, t, is_pos) = entries[cursor];
            pred[t] += 1;
            if is_pos {
                tp[t] += 1;
            }
            cursor += 1;
        }
        // The reduction over labels is recomputed from the integer
        // counters in label order so the result is bit-identical to an
        // independent recount of the same confusion counts.
        let mut sum_p = 0.0;
        let mut sum_r = 0.0;
        for t in 0..t_count {
            if !retained[t] {
                continue;
            }
            if pred[t] > 0 {
                sum_p += tp[t] as f64 / pred[t] as f64;
            }
            sum_r += tp[t] as f64 / positives[t] as f64;
        }
        let p = sum_p / retained_count as f64;
        let r = sum_r / retained_count as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        // >= so equal F1 at a lower threshold wins; the sweep descends.
        if f1 >= best_f1 {
            best_f1 = f1;
            best_tau = tau;
        }
    }
    Ok((best_tau, best_f1))
}
