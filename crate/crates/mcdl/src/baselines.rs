//! Comparison methods: unsupervised dictionary learning (no coupled
//! refinement), coupled learning with a squared loss, and a brute-force
//! nearest-neighbor annotator whose per-query cost grows with the
//! training set.

use ndarray::{Array1, ArrayView1};

use crate::data::{FeatureMatrix, LabelMatrix, Model};
use crate::error::{Error, Result};
use crate::trainer::{train_method, Method, TrainConfig};

/// Unsupervised baseline: dictionary initialization and semantic
/// bootstrap only, no coupled refinement rounds. The decision threshold
/// is still selected as usual.
pub fn train_udl(
    x: &FeatureMatrix,
    y: &LabelMatrix,
    k: usize,
    config: &TrainConfig,
) -> Result<Model> {
    let mut cfg = config.clone();
    cfg.num_prototypes = k;
    Ok(train_method(x, y, &cfg, Method::Udl)?.0)
}

/// Squared-loss ablation: the same alternation as the coupled trainer,
/// with hinge coding replaced by one stacked least-squares solve per
/// sample against fixed targets cap times the label, and the semantic
/// update solving the squared loss without the l1 penalty.
pub fn train_cdl(
    x: &FeatureMatrix,
    y: &LabelMatrix,
    k: usize,
    config: &TrainConfig,
) -> Result<Model> {
    let mut cfg = config.clone();
    cfg.num_prototypes = k;
    Ok(train_method(x, y, &cfg, Method::Cdl)?.0)
}

/// Nearest-neighbor label propagation: mean label vector of the k
/// training columns closest to the query in Euclidean distance. Brute
/// force by design; distance ties prefer the lower column index, so the
/// neighbor set is deterministic.
pub fn knn_annotate(
    x_train: &FeatureMatrix,
    y_train: &LabelMatrix,
    query: ArrayView1<f64>,
    k: usize,
) -> Result<Array1<f64>> {
    let n = x_train.len();
    if x_train.len() != y_train.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} training columns but {} label columns",
            x_train.len(),
            y_train.len()
        )));
    }
    if query.len() != x_train.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} features, training set has {}",
            query.len(),
            x_train.dim()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParam(format!(
            "neighbor count {k} must be in 1..={n}"
        )));
    }
    // Feature-major accumulation: each training row is contiguous, so the
    // whole matrix is streamed once per query instead of strided per column.
    let mut d2 = vec![0.0f64; n];
    for (r, &q) in query.iter().enumerate() {
        let row = x_train.values().row(r);
        match row.as_slice() {
            Some(row) => {
                for (acc, &t) in d2.iter_mut().zip(row) {
                    let d = t - q;
                    *acc += d * d;
                }
            }
            None => {
                for (acc, &t) in d2.iter_mut().zip(row.iter()) {
                    let d = t - q;
                    *acc += d * d;
                }
            }
        }
    }
    let mut dist: Vec<(f64, usize)> = d2.into_iter().zip(0..n).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    dist.select_nth_unstable_by(k - 1, cmp);

    let t_count = y_train.label_count();
    let mut scores = Array1::zeros(t_count);
    for &(_, i) in &dist[..k] {
        scores += &y_train.values().column(i);
    }
    scores /= k as f64;
    Ok(scores)
}
