//! Dictionary initialization and the alternating update pass: seeded
//! k-means++ for the visual warm start, unsupervised refinement, least
//! squares semantic initialization, and the per-column coordinate updates
//! used during coupled training.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetStats, FeatureMatrix, LabelMatrix};
use crate::error::{Error, Result};
use crate::solver::{
    nn_lasso_with_gram, CodeMatrix, MarginParams, DEFAULT_CODE_L1_BOUND, DEFAULT_TOL,
};

/// Lloyd iteration count for the k-means warm start.
const KMEANS_ITERS: usize = 20;

/// Settings of the scalar semantic-element solve.
#[derive(Debug, Clone, Copy)]
pub struct SemanticUpdateConfig {
    /// l1 weight on semantic entries.
    pub beta1: f64,
    /// Proximal damping toward the previous value.
    pub rho: f64,
    /// Upper bound on semantic entries.
    pub cap: f64,
}

impl SemanticUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta1.is_finite() || self.beta1 < 0.0 {
            return Err(Error::InvalidParam(format!(
                "semantic l1 weight must be finite and nonnegative, got {}",
                self.beta1
            )));
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::InvalidParam(format!(
                "proximal weight must be finite and nonnegative, got {}",
                self.rho
            )));
        }
        if !(self.cap > 0.0) || !self.cap.is_finite() {
            return Err(Error::InvalidParam(format!(
                "semantic cap must be positive, got {}",
                self.cap
            )));
        }
        Ok(())
    }
}

/// Seeded k-means++ clustering; returns one center per column, each
/// scaled to unit norm (zero centers are left as zero columns).
pub fn kmeans_init(x: &FeatureMatrix, k: usize, seed: u64) -> Result<Array2<f64>> {
    let n = x.len();
    let m = x.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidParam(format!(
            "prototype count {k} must be in 1..={n} (sample count)"
        )));
    }
    let data = x.values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seeding: first center uniform, the rest weighted by squared
    // distance to the nearest chosen center.
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.column(i), data.column(first)))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if is_chosen[i] {
                    continue;
                }
                target -= w;
                if target <= 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Float underrun at the tail: fall back below.
            pick.unwrap_or_else(|| first_unchosen(&is_chosen))
        } else {
            // All remaining points coincide with a center.
            first_unchosen(&is_chosen)
        };
        chosen.push(next);
        is_chosen[next] = true;
        for i in 0..n {
            let d = sq_dist(data.column(i), data.column(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut centers = Array2::zeros((m, k));
    for (j, &i) in chosen.iter().enumerate() {
        centers.column_mut(j).assign(&data.column(i));
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        // Assign each point to the nearest center, lowest index on ties.
        let center_sq: Vec<f64> = (0..k)
            .map(|j| centers.column(j).iter().map(|v| v * v).sum())
            .collect();
        let cross = centers.t().dot(data); // k x n
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = center_sq[0] - 2.0 * cross[[0, i]];
            for j in 1..k {
                let d = center_sq[j] - 2.0 * cross[[j, i]];
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assignment[i] = best;
        }

        let mut sums = Array2::<f64>::zeros((m, k));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            let mut col = sums.column_mut(j);
            col += &data.column(i);
            counts[j] += 1;
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let mut col = centers.column_mut(j);
                col.assign(&sums.column(j));
                col.mapv_inplace(|v| v / counts[j] as f64);
            } else {
                // Empty cluster: reseed at the point farthest from its
                // center, skipping points already donated this round.
                let mut worst = None;
                let mut worst_d = -1.0;
                for i in 0..n {
                    if taken[i] {
                        continue;
                    }
                    let d = sq_dist(data.column(i), centers.column(assignment[i]));
                    if d > worst_d {
                        worst_d = d;
                        worst = Some(i);
                    }
                }
                let i = worst.expect("n >= k > 0 leaves a donor point");
                taken[i] = true;
                centers.column_mut(j).assign(&data.column(i));
            }
        }
    }

    for mut col in centers.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
    Ok(centers)
}

fn first_unchosen(is_chosen: &[bool]) -> usize {
    is_chosen
        .iter()
        .position(|&c| !c)
        .expect("fewer centers than points")
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Codes every column of `x` against `d` with the default unit budget.
pub(crate) fn code_all(x: &FeatureMatrix, d: &Array2<f64>, tol: f64) -> Result<CodeMatrix> {
    let gram = d.t().dot(d);
    let corr_all = d.t().dot(x.values()); // K x N
    let codes: Vec<Array1<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let corr = corr_all.column(i).to_owned();
            nn_lasso_with_gram(&gram, &corr, DEFAULT_CODE_L1_BOUND, tol)
                .map(|c| c.coeffs().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut a = Array2::zeros((d.ncols(), x.len()));
    for (i, code) in codes.iter().enumerate() {
        a.column_mut(i).assign(code);
    }
    Ok(a)
}

/// Reconstruction-only dictionary learning: k-means warm start, then
/// `iters` alternations of a sequential visual-column pass (uniform
/// sample weights) and a full recode. The returned codes are consistent
/// with the returned dictionary, and the reconstruction objective is
/// non-increasing across alternations.
pub fn unsupervised_dl(
    x: &FeatureMatrix,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Array2<f64>, CodeMatrix)> {
    let mut d = kmeans_init(x, k, seed)?;
    let mut a = code_all(x, &d, DEFAULT_TOL)?;
    let n = x.len();
    let uniform = vec![1.0f64; n];
    for _ in 0..iters {
        let mut residual = x.values() - &d.dot(&a);
        // Sequential column order: updates share the residual matrix.
        for col in 0..k {
            visual_column_update(col, &a, &uniform, &mut d, &mut residual);
        }
        a = code_all(x, &d, DEFAULT_TOL)?;
    }
    Ok((d, a))
}

/// Least-squares semantic initialization: column k regresses each label
/// onto the k-th code row, capped at `cap`; prototypes no sample uses
/// get zero columns.
pub fn init_semantic(codes: &CodeMatrix, y: &LabelMatrix, cap: f64) -> Result<Array2<f64>> {
    if codes.ncols() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "codes cover {} samples, labels {}",
            codes.ncols(),
            y.len()
        )));
    }
    if !(cap > 0.0) {
        return Err(Error::InvalidParam(format!(
            "semantic cap must be positive, got {cap}"
        )));
    }
    let t_count = y.label_count();
    let k_count = codes.nrows();
    let mut d_l = Array2::zeros((t_count, k_count));
    for k in 0..k_count {
        let row = codes.row(k);
        let denom: f64 = row.iter().map(|a| a * a).sum();
        if denom == 0.0 {
            continue;
        }
        // numer[t] = sum_i alpha_k^i * y_t^i
        let numer = y.values().dot(&row.to_owned());
        for t in 0..t_count {
            d_l[[t, k]] = (numer[t] / denom).min(cap);
        }
    }
    Ok(d_l)
}

/// Weighted least-squares update of one visual prototype, recomputing
/// residuals from scratch: minimizes sum_i w_i ||z_k^i - alpha_k^i d||^2
/// over d and scales the result to unit norm. A dead prototype (zero
/// weighted coefficient mass) is replaced by the normalized residual of
/// the worst-reconstructed sample, or kept when that residual is zero.
pub fn update_visual_prototype(
    k: usize,
    x: &FeatureMatrix,
    codes: &CodeMatrix,
    weights: &[f64],
    d_i: &Array2<f64>,
) -> Result<Array1<f64>> {
    let n = x.len();
    if codes.ncols() != n || weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "codes cover {} samples, weights {}, features {}",
            codes.ncols(),
            weights.len(),
            n
        )));
    }
    if d_i.nrows() != x.dim() || d_i.ncols() != codes.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary is {}x{}, expected {}x{}",
            d_i.nrows(),
            d_i.ncols(),
            x.dim(),
            codes.nrows()
        )));
    }
    if k >= d_i.ncols() {
        return Err(Error::InvalidParam(format!(
            "prototype index {k} out of range 0..{}",
            d_i.ncols()
        )));
    }
    let mut residual = x.values() - &d_i.dot(codes);
    let mut d = d_i.to_owned();
    visual_column_update(k, codes, weights, &mut d, &mut residual);
    Ok(d.column(k).to_owned())
}

/// Shared column update against a maintained residual matrix
/// R = X - D*A. On return both `d.column(k)` and `residual` reflect the
/// new prototype; returns false for the dead-atom replacement path.
fn visual_column_update(
    k: usize,
    codes: &CodeMatrix,
    weights: &[f64],
    d: &mut Array2<f64>,
    residual: &mut Array2<f64>,
) -> bool {
    let row = codes.row(k);
    let users: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != 0.0)
        .map(|(i, _)| i)
        .collect();
    let denom: f64 = users.iter().map(|&i| weights[i] * row[i] * row[i]).sum();

    if users.is_empty() || denom == 0.0 {
        // Dead atom: take over the worst-reconstructed sample's residual
        // direction (lowest index on ties). The code row is zero, so the
        // residual matrix is unaffected by the swap.
        let mut worst = 0usize;
        let mut worst_norm = -1.0;
        for (i, col) in residual.columns().into_iter().enumerate() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > worst_norm {
                worst_norm = norm;
                worst = i;
            }
        }
        if worst_norm > 0.0 {
            let repl = residual.column(worst).mapv(|v| v / worst_norm);
            d.column_mut(k).assign(&repl);
        }
        return false;
    }

    // d_hat = sum_i w_i a_i (r_i + d_old a_i) / denom; using the residual
    // avoids touching the K-1 other columns.
    let mut numer: Array1<f64> = Array1::zeros(d.nrows());
    for &i in &users {
        let a = row[i];
        numer.scaled_add(weights[i] * a, &residual.column(i));
    }
    numer.scaled_add(denom, &d.column(k));
    let norm = numer.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Complete cancellation; fall back to the dead-atom policy by
        // keeping the old unit-norm direction.
        return true;
    }
    numer.mapv_inplace(|v| v / norm);
    let delta = &d.column(k).to_owned() - &numer;
    for &i in &users {
        let a = row[i];
        residual.column_mut(i).scaled_add(a, &delta);
    }
    d.column_mut(k).assign(&numer);
    true
}

/// Exact minimizer over [0, cap] of the per-element semantic objective
///
///   sum_i max(0, margin - s_i (d*a_i + q_i - center))^2
///     + beta1*d + rho*(d - d_old)^2,    s_i = 2*y_i - 1,
///
/// restricted to the samples that use the prototype. The objective is a
/// convex piecewise quadratic, so the minimum lies at a hinge breakpoint,
/// an interval's stationary point, or a box edge; all are enumerated and
/// the smallest minimizer wins ties.
pub fn update_semantic_element(
    alphas: &[f64],
    partial_scores: &[f64],
    labels: &[f64],
    d_old: f64,
    cfg: &SemanticUpdateConfig,
    m: &MarginParams,
) -> f64 {
    debug_assert_eq!(alphas.len(), partial_scores.len());
    debug_assert_eq!(alphas.len(), labels.len());
    let cap = cfg.cap;

    let objective = |d: f64| -> f64 {
        let mut f = cfg.beta1 * d + cfg.rho * (d - d_old) * (d - d_old);
        for ((&a, &q), &y) in alphas.iter().zip(partial_scores).zip(labels) {
            let sign = 2.0 * y - 1.0;
            let viol = (m.margin - sign * (d * a + q - m.center)).max(0.0);
            f += viol * viol;
        }
        f
    };

    // Breakpoints where a sample's hinge switches on or off.
    let mut knots: Vec<f64> = vec![0.0, cap];
    for ((&a, &q), &y) in alphas.iter().zip(partial_scores).zip(labels) {
        if a == 0.0 {
            continue;
        }
        let b = if y != 0.0 {
            (m.center + m.margin - q) / a
        } else {
            (m.center - m.margin - q) / a
        };
        if b > 0.0 && b < cap {
            knots.push(b);
        }
    }
    knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    knots.dedup();

    let mut candidates = knots.clone();
    // Stationary point of the quadratic active on each interval.
    for w in knots.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        let mut a2 = cfg.rho;
        let mut a1 = cfg.beta1 - 2.0 * cfg.rho * d_old;
        for ((&a, &q), &y) in alphas.iter().zip(partial_scores).zip(labels) {
            let sign = 2.0 * y - 1.0;
            if m.margin - sign * (mid * a + q - m.center) > 0.0 {
                let g = m.margin - sign * (q - m.center);
                let h = sign * a;
                a2 += h * h;
                a1 += -2.0 * g * h;
            }
        }
        if a2 > 0.0 {
            let stat = -a1 / (2.0 * a2);
            if stat > lo && stat < hi {
                candidates.push(stat);
            }
        }
    }

    candidates.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut best_d = candidates[0];
    let mut best_f = objective(best_d);
    for &d in &candidates[1..] {
        let f = objective(d);
        if f < best_f {
            best_f = f;
            best_d = d;
        }
    }
    best_d
}

/// Loss placed on semantic elements during an update pass.
pub(crate) enum SemanticRule<'a> {
    /// Margin hinge with l1 and proximal terms.
    Hinge {
        cfg: &'a SemanticUpdateConfig,
        m: &'a MarginParams,
    },
    /// Squared distance to cap*y with a proximal term and no l1.
    Squared { cap: f64, proximal: f64 },
}

/// One full coordinate pass over the coupled dictionaries with codes
/// fixed: columns visited in a seeded random permutation, visual
/// prototype then all semantic elements per column, residuals maintained
/// incrementally. Never increases the coupled training objective.
pub fn dictionary_update_pass(
    x: &FeatureMatrix,
    y: &LabelMatrix,
    codes: &CodeMatrix,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    stats: &DatasetStats,
    cfg: &SemanticUpdateConfig,
    m: &MarginParams,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    m.validate()?;
    let (di, dl, _, _) = update_pass_full(
        x,
        y,
        codes,
        d_i,
        d_l,
        stats,
        &SemanticRule::Hinge { cfg, m },
        seed,
    )?;
    Ok((di, dl))
}

/// Update pass variant with the squared semantic loss (targets cap*y,
/// no l1 term); the visual update is identical.
pub fn squared_loss_update_pass(
    x: &FeatureMatrix,
    y: &LabelMatrix,
    codes: &CodeMatrix,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    stats: &DatasetStats,
    cap: f64,
    proximal: f64,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(cap > 0.0) || !proximal.is_finite() || proximal < 0.0 {
        return Err(Error::InvalidParam(
            "squared-loss pass needs cap > 0 and proximal >= 0".into(),
        ));
    }
    let (di, dl, _, _) = update_pass_full(
        x,
        y,
        codes,
        d_i,
        d_l,
        stats,
        &SemanticRule::Squared { cap, proximal },
        seed,
    )?;
    Ok((di, dl))
}

/// Pass core; also returns the maintained residual matrices
/// (R = X - D_I*A and S = D_L*A) so tests can compare them against
/// from-scratch recomputation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn update_pass_full(
    x: &FeatureMatrix,
    y: &LabelMatrix,
    codes: &CodeMatrix,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    stats: &DatasetStats,
    rule: &SemanticRule,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> {
    let n = x.len();
    let k_count = d_i.ncols();
    let t_count = y.label_count();
    if y.len() != n || codes.ncols() != n || stats.labels_per_sample.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "inconsistent sample counts: features {}, labels {}, codes {}, stats {}",
            n,
            y.len(),
            codes.ncols(),
            stats.labels_per_sample.len()
        )));
    }
    if codes.nrows() != k_count || d_l.ncols() != k_count || d_l.nrows() != t_count
        || d_i.nrows() != x.dim()
    {
        return Err(Error::DimensionMismatch(
            "dictionary/code shapes disagree".into(),
        ));
    }
    let weights: Vec<f64> = stats.labels_per_sample.iter().map(|&c| c as f64).collect();

    let mut d_i = d_i.to_owned();
    let mut d_l = d_l.to_owned();
    let mut residual = x.values() - &d_i.dot(codes);
    let mut scores = d_l.dot(codes); // T x N

    let mut order: Vec<usize> = (0..k_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut alphas_buf = Vec::new();
    let mut partial_buf = Vec::new();
    let mut labels_buf = Vec::new();
    for &k in &order {
        let live = visual_column_update(k, codes, &weights, &mut d_i, &mut residual);
        if !live {
            // Dead prototype: the replacement policy already ran and no
            // sample's semantic loss involves column k, so its semantic
            // entries stay as they are.
            continue;
        }
        let row = codes.row(k).to_owned();
        let users: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(i, _)| i)
            .collect();
        alphas_buf.clear();
        alphas_buf.extend(users.iter().map(|&i| row[i]));
        // The T element solves are independent of one another (each
        // touches only its own row of the score matrix); a sequential
        // loop keeps the merge deterministic.
        for t in 0..t_count {
            let old = d_l[[t, k]];
            partial_buf.clear();
            partial_buf.extend(users.iter().map(|&i| scores[[t, i]] - old * row[i]));
            labels_buf.clear();
            labels_buf.extend(users.iter().map(|&i| y.values()[[t, i]]));
            let new = match rule {
                SemanticRule::Hinge { cfg, m } => {
                    update_semantic_element(&alphas_buf, &partial_buf, &labels_buf, old, cfg, m)
                }
                SemanticRule::Squared { cap, proximal } => squared_semantic_element(
                    &alphas_buf,
                    &partial_buf,
                    &labels_buf,
                    old,
                    *cap,
                    *proximal,
                ),
            };
            if new != old {
                for (u, &i) in users.iter().enumerate() {
                    scores[[t, i]] += (new - old) * alphas_buf[u];
                }
                d_l[[t, k]] = new;
            }
        }
    }
    Ok((d_i, d_l, residual, scores))
}

/// Closed-form minimizer over [0, cap] of
/// sum_i (cap*y_i - (d*a_i + q_i))^2 + proximal*(d - d_old)^2.
fn squared_semantic_element(
    alphas: &[f64],
    partial_scores: &[f64],
    labels: &[f64],
    d_old: f64,
    cap: f64,
    proximal: f64,
) -> f64 {
    let mut denom = proximal;
    let mut numer = proximal * d_old;
    for ((&a, &q), &y) in alphas.iter().zip(partial_scores).zip(labels) {
        denom += a * a;
        numer += a * (cap * y - q);
    }
    if denom == 0.0 {
        return d_old.clamp(0.0, cap);
    }
    (numer / denom).clamp(0.0, cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_stats;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn features(values: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(values).unwrap()
    }

    fn random_unit_columns(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        let mut x = Array2::from_shape_fn((m, n), |_| rng.sample::<f64, _>(StandardNormal));
        for mut col in x.columns_mut() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            col.mapv_inplace(|v| v / norm);
        }
        x
    }

    fn margin_default() -> MarginParams {
        MarginParams::new(0.5, 0.5, 5.0).unwrap()
    }

    #[test]
    fn kmeans_with_k_equal_n_returns_the_points() {
        let x = features(Array2::eye(4));
        let centers = kmeans_init(&x, 4, 3).unwrap();
        // Each basis vector must appear exactly once among the centers.
        for i in 0..4 {
            let point = x.values().column(i);
            let hits = (0..4)
                .filter(|&j| {
                    centers
                        .column(j)
                        .iter()
                        .zip(point.iter())
                        .all(|(a, b)| (a - b).abs() < 1e-9)
                })
                .count();
            assert_eq!(hits, 1, "basis vector {i} not recovered exactly once");
        }
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean_a = array![1.0, 0.0, 0.0];
        let mean_b = array![0.0, 1.0, 0.0];
        let mut cols = Vec::new();
        for i in 0..60 {
            let base = if i % 2 == 0 { &mean_a } else { &mean_b };
            let noisy = base + &Array1::from_shape_fn(3, |_| {
                0.01 * rng.sample::<f64, _>(StandardNormal)
            });
            cols.push(noisy);
        }
        let mut x = Array2::zeros((3, 60));
        for (i, c) in cols.iter().enumerate() {
            x.column_mut(i).assign(c);
        }
        let centers = kmeans_init(&features(x), 2, 7).unwrap();
        // Means are unit vectors already, so compare directly.
        for mean in [&mean_a, &mean_b] {
            let close = (0..2).any(|j| {
                let d: f64 = centers
                    .column(j)
                    .iter()
                    .zip(mean.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                d < 0.1
            });
            assert!(close, "no center near blob mean {mean:?}");
        }
    }

    #[test]
    fn kmeans_single_cluster_is_normalized_mean() {
        let x = features(array![[1.0, 3.0], [2.0, 2.0]]);
        let centers = kmeans_init(&x, 1, 1).unwrap();
        let mean = array![2.0, 2.0];
        let norm = 8.0f64.sqrt();
        for r in 0..2 {
            assert!((centers[[r, 0]] - mean[r] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_rejects_more_centers_than_points() {
        let x = features(Array2::eye(3));
        assert!(kmeans_init(&x, 4, 0).is_err());
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = features(random_unit_columns(&mut rng, 6, 40));
        let a = kmeans_init(&x, 5, 42).unwrap();
        let b = kmeans_init(&x, 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn udl_zero_iters_returns_kmeans_and_its_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = features(random_unit_columns(&mut rng, 6, 30));
        let (d, a) = unsupervised_dl(&x, 5, 0, 11).unwrap();
        let km = kmeans_init(&x, 5, 11).unwrap();
        assert_eq!(d, km);
        let recoded = code_all(&x, &km, DEFAULT_TOL).unwrap();
        assert_eq!(a, recoded);
    }

    #[test]
    fn udl_recovers_an_exact_dictionary() {
        let x = features(Array2::eye(8));
        let (d, a) = unsupervised_dl(&x, 8, 10, 2).unwrap();
        let recon = x.values() - &d.dot(&a);
        let err: f64 = recon.iter().map(|v| v * v).sum();
        assert!(err <= 1e-6, "reconstruction error {err}");
    }

    #[test]
    fn udl_objective_is_non_increasing_across_alternations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = features(random_unit_columns(&mut rng, 10, 60));
        // Alternations are deterministic, so running with increasing
        // iteration budgets observes successive states of one run.
        let mut prev = f64::INFINITY;
        for iters in 0..=10 {
            let (d, a) = unsupervised_dl(&x, 12, iters, 4).unwrap();
            let recon = x.values() - &d.dot(&a);
            let obj: f64 = recon.iter().map(|v| v * v).sum();
            assert!(
                obj <= prev + 1e-9,
                "objective rose from {prev} to {obj} at iters={iters}"
            );
            prev = obj;
            for col in d.columns() {
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn init_semantic_matches_hand_values() {
        // Single sample, alpha_k = 0.5, y = (1, 0).
        let codes = array![[0.5]];
        let y = LabelMatrix::new(array![[1.0], [0.0]]).unwrap();
        let d_l = init_semantic(&codes, &y, 5.0).unwrap();
        assert_eq!(d_l, array![[2.0], [0.0]]);

        // Cap branch: 0.1 / 0.01 = 10, capped at 5.
        let codes = array![[0.1]];
        let y = LabelMatrix::new(array![[1.0]]).unwrap();
        let d_l = init_semantic(&codes, &y, 5.0).unwrap();
        assert_eq!(d_l, array![[5.0]]);

        // Dead atom: zero column.
        let codes = array![[0.5, 0.5], [0.0, 0.0]];
        let y = LabelMatrix::new(array![[1.0, 0.0]]).unwrap();
        let d_l = init_semantic(&codes, &y, 5.0).unwrap();
        assert_eq!(d_l[[0, 1]], 0.0);
    }

    #[test]
    fn visual_update_single_atom_returns_normalized_sample() {
        let x = features(array![[3.0], [4.0]]);
        let codes = array![[0.8]];
        let d_i = array![[1.0], [0.0]];
        let d = update_visual_prototype(0, &x, &codes, &[1.0], &d_i).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn visual_update_replaces_dead_atom_with_worst_residual() {
        let x = features(array![[1.0, 0.0], [0.0, 2.0]]);
        let codes = array![[1.0, 0.0], [0.0, 0.0]];
        let d_i = array![[1.0, 0.0], [0.0, 1.0]];
        // Sample 0 reconstructs exactly; sample 1 is unexplained with
        // residual (0, 2), so the dead atom 1 takes direction (0, 1).
        let d = update_visual_prototype(1, &x, &codes, &[1.0, 1.0], &d_i).unwrap();
        assert_eq!(d, array![0.0, 1.0]);
    }

    #[test]
    fn visual_update_matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let m = 5;
            let x = features(random_unit_columns(&mut rng, m, 3));
            let mut codes = Array2::zeros((2, 3));
            for v in codes.iter_mut() {
                *v = rng.gen_range(0.05..0.5);
            }
            let d_i = random_unit_columns(&mut rng, m, 2);
            let weights = [1.0, 2.0, 3.0];

            let ours = update_visual_prototype(0, &x, &codes, &weights, &d_i).unwrap();

            // Oracle: numeric gradient descent on the unnormalized
            // weighted quadratic, then normalize.
            let z: Vec<Array1<f64>> = (0..3)
                .map(|i| {
                    let mut zi = x.values().column(i).to_owned();
                    zi.scaled_add(-codes[[1, i]], &d_i.column(1));
                    zi
                })
                .collect();
            let lips: f64 = (0..3)
                .map(|i| 2.0 * weights[i] * codes[[0, i]] * codes[[0, i]])
                .sum();
            let mut d = Array1::<f64>::zeros(m);
            for _ in 0..5000 {
                let mut grad = Array1::<f64>::zeros(m);
                for i in 0..3 {
                    let a = codes[[0, i]];
                    let diff = &(a * &d) - &z[i];
                    grad.scaled_add(2.0 * weights[i] * a, &diff);
                }
                d.scaled_add(-1.0 / lips, &grad);
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.mapv_inplace(|v| v / norm);

            let cosine: f64 = ours.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
            assert!(cosine >= 1.0 - 1e-6, "cosine {cosine}");
        }
    }

    #[test]
    fn semantic_element_matches_hand_values() {
        let m = margin_default();
        // One positive sample, alpha = 1, q = 0, beta1 = 0.2:
        // minimize (1 - d)^2 + 0.2 d on the active piece -> d = 0.9.
        let cfg = SemanticUpdateConfig { beta1: 0.2, rho: 0.0, cap: 5.0 };
        let d = update_semantic_element(&[1.0], &[0.0], &[1.0], 0.0, &cfg, &m);
        assert!((d - 0.9).abs() < 1e-9, "got {d}");

        // One negative sample under the narrow margin: hinge inactive
        // for small d and the l1 term pushes to zero.
        let m2 = MarginParams::new(0.25, 0.375, 5.0).unwrap();
        let cfg2 = SemanticUpdateConfig { beta1: 0.05, rho: 0.0, cap: 5.0 };
        let d = update_semantic_element(&[0.5], &[0.0], &[0.0], 1.0, &cfg2, &m2);
        assert_eq!(d, 0.0);

        // No active samples.
        let cfg3 = SemanticUpdateConfig { beta1: 0.1, rho: 0.0, cap: 5.0 };
        let d = update_semantic_element(&[], &[], &[], 2.5, &cfg3, &m);
        assert_eq!(d, 0.0);
    }

    /// Dense grid search over [0, cap]; first grid point wins ties,
    /// matching the smallest-minimizer rule.
    fn grid_oracle(
        alphas: &[f64],
        partial: &[f64],
        labels: &[f64],
        d_old: f64,
        cfg: &SemanticUpdateConfig,
        m: &MarginParams,
        step: f64,
    ) -> f64 {
        let objective = |d: f64| -> f64 {
            let mut f = cfg.beta1 * d + cfg.rho * (d - d_old) * (d - d_old);
            for ((&a, &q), &y) in alphas.iter().zip(partial).zip(labels) {
                let sign = 2.0 * y - 1.0;
                let viol = (m.margin - sign * (d * a + q - m.center)).max(0.0);
                f += viol * viol;
            }
            f
        };
        let steps = (cfg.cap / step).round() as usize;
        let mut best_d = 0.0;
        let mut best_f = objective(0.0);
        for j in 1..=steps {
            let d = j as f64 * step;
            let f = objective(d);
            if f < best_f {
                best_f = f;
                best_d = d;
            }
        }
        best_d
    }

    #[test]
    fn semantic_element_matches_grid_oracle() {
        let m = margin_default();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for case in 0..60 {
            let count = rng.gen_range(0..6);
            let alphas: Vec<f64> = (0..count).map(|_| rng.gen_range(0.01..1.0)).collect();
            let partial: Vec<f64> = (0..count).map(|_| rng.gen_range(-0.5..4.0)).collect();
            let labels: Vec<f64> = (0..count)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let d_old = rng.gen_range(0.0..5.0);
            let cfg = SemanticUpdateConfig {
                beta1: rng.gen_range(0.0..0.5),
                rho: if rng.gen_bool(0.5) { 0.0 } else { 1e-3 },
                cap: 5.0,
            };
            let ours = update_semantic_element(&alphas, &partial, &labels, d_old, &cfg, &m);
            let oracle = grid_oracle(&alphas, &partial, &labels, d_old, &cfg, &m, 1e-5);

            // The oracle quantizes to the grid pitch, so compare the
            // exact objective values and allow one pitch on the argmin.
            let objective = |d: f64| -> f64 {
                let mut f = cfg.beta1 * d + cfg.rho * (d - d_old) * (d - d_old);
                for ((&a, &q), &y) in alphas.iter().zip(&partial).zip(&labels) {
                    let sign = 2.0 * y - 1.0;
                    let viol = (m.margin - sign * (d * a + q - m.center)).max(0.0);
                    f += viol * viol;
                }
                f
            };
            assert!(
                objective(ours) <= objective(oracle) + 1e-6,
                "case {case}: ours {ours} (f={}) vs oracle {oracle} (f={})",
                objective(ours),
                objective(oracle)
            );
            assert!(
                (ours - oracle).abs() <= 1.1e-5,
                "case {case}: minimizers {ours} vs {oracle} disagree"
            );
        }
    }

    #[test]
    fn semantic_element_update_never_increases_its_objective() {
        let m = margin_default();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..200 {
            let count = rng.gen_range(1..6);
            let alphas: Vec<f64> = (0..count).map(|_| rng.gen_range(0.01..1.0)).collect();
            let partial: Vec<f64> = (0..count).map(|_| rng.gen_range(-0.5..4.0)).collect();
            let labels: Vec<f64> = (0..count)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let d_old = rng.gen_range(0.0..5.0);
            let cfg = SemanticUpdateConfig { beta1: 0.1, rho: 1e-3, cap: 5.0 };
            let new = update_semantic_element(&alphas, &partial, &labels, d_old, &cfg, &m);
            let objective = |d: f64| -> f64 {
                let mut f = cfg.beta1 * d + cfg.rho * (d - d_old) * (d - d_old);
                for ((&a, &q), &y) in alphas.iter().zip(&partial).zip(&labels) {
                    let sign = 2.0 * y - 1.0;
                    let viol = (m.margin - sign * (d * a + q - m.center)).max(0.0);
                    f += viol * viol;
                }
                f
            };
            assert!(objective(new) <= objective(d_old) + 1e-12);
        }
    }

    fn random_pass_instance(
        rng: &mut ChaCha8Rng,
        m_dim: usize,
        t_count: usize,
        k_count: usize,
        n: usize,
    ) -> (FeatureMatrix, LabelMatrix, CodeMatrix, Array2<f64>, Array2<f64>) {
        let x = features(random_unit_columns(rng, m_dim, n));
        let mut yv = Array2::zeros((t_count, n));
        for i in 0..n {
            let forced = rng.gen_range(0..t_count);
            for t in 0..t_count {
                if t == forced || rng.gen_bool(0.3) {
                    yv[[t, i]] = 1.0;
                }
            }
        }
        let y = LabelMatrix::new(yv).unwrap();
        let mut codes = Array2::zeros((k_count, n));
        for i in 0..n {
            let picks = rng.gen_range(1..4);
            for _ in 0..picks {
                let k = rng.gen_range(0..k_count);
                codes[[k, i]] = rng.gen_range(0.05..0.4);
            }
        }
        let d_i = random_unit_columns(rng, m_dim, k_count);
        let d_l = Array2::from_shape_fn((t_count, k_count), |_| rng.gen_range(0.0..2.0));
        (x, y, codes, d_i, d_l)
    }

    /// Coupled training objective with codes fixed (reconstruction scaled
    /// by labels-per-sample over lambda, plus hinge terms and the
    /// semantic l1 weight), written out directly.
    fn coupled_objective(
        x: &FeatureMatrix,
        y: &LabelMatrix,
        codes: &CodeMatrix,
        d_i: &Array2<f64>,
        d_l: &Array2<f64>,
        stats: &DatasetStats,
        lambda: f64,
        beta1: f64,
        m: &MarginParams,
    ) -> f64 {
        let recon = x.values() - &d_i.dot(codes);
        let scores = d_l.dot(codes);
        let mut total = 0.0;
        for i in 0..x.len() {
            let w = stats.labels_per_sample[i] as f64 / lambda;
            total += w * recon.column(i).iter().map(|v| v * v).sum::<f64>();
            for t in 0..y.label_count() {
                let sign = 2.0 * y.values()[[t, i]] - 1.0;
                let viol = (m.margin - sign * (scores[[t, i]] - m.center)).max(0.0);
                total += viol * viol;
            }
        }
        total + beta1 * d_l.iter().sum::<f64>()
    }

    #[test]
    fn pass_with_zero_codes_only_applies_dead_atom_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (x, y, _, d_i, d_l) = random_pass_instance(&mut rng, 5, 3, 4, 10);
        let codes = Array2::zeros((4, 10));
        let stats = compute_stats(&y).unwrap();
        let cfg = SemanticUpdateConfig { beta1: 0.1, rho: 1e-3, cap: 5.0 };
        let m = margin_default();
        let (di2, dl2) =
            dictionary_update_pass(&x, &y, &codes, &d_i, &d_l, &stats, &cfg, &m, 9).unwrap();
        // Semantic dictionary untouched; every visual column is some
        // sample's normalized residual direction (all codes are zero, so
        // residuals are the samples themselves).
        assert_eq!(dl2, d_l);
        for col in di2.columns() {
            let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            let matches_sample = (0..x.len()).any(|i| {
                col.iter()
                    .zip(x.values().column(i).iter())
                    .all(|(a, b)| (a - b).abs() < 1e-9)
            });
            assert!(matches_sample);
        }
    }

    #[test]
    fn pass_never_increases_the_coupled_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let m = margin_default();
        let cfg = SemanticUpdateConfig { beta1: 0.1, rho: 1e-3, cap: 5.0 };
        let lambda = 0.25;
        for trial in 0..10 {
            let (x, y, codes, d_i, d_l) = random_pass_instance(&mut rng, 6, 4, 8, 40);
            let stats = compute_stats(&y).unwrap();
            let before =
                coupled_objective(&x, &y, &codes, &d_i, &d_l, &stats, lambda, cfg.beta1, &m);
            let (di2, dl2) =
                dictionary_update_pass(&x, &y, &codes, &d_i, &d_l, &stats, &cfg, &m, trial)
                    .unwrap();
            let after =
                coupled_objective(&x, &y, &codes, &di2, &dl2, &stats, lambda, cfg.beta1, &m);
            assert!(
                after <= before + 1e-7,
                "trial {trial}: objective rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn pass_is_deterministic_and_preserves_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let (x, y, codes, d_i, d_l) = random_pass_instance(&mut rng, 6, 4, 8, 40);
        let stats = compute_stats(&y).unwrap();
        let cfg = SemanticUpdateConfig { beta1: 0.1, rho: 1e-3, cap: 5.0 };
        let m = margin_default();
        let (a_i, a_l) =
            dictionary_update_pass(&x, &y, &codes, &d_i, &d_l, &stats, &cfg, &m, 77).unwrap();
        let (b_i, b_l) =
            dictionary_update_pass(&x, &y, &codes, &d_i, &d_l, &stats, &cfg, &m, 77).unwrap();
        assert_eq!(a_i, b_i);
        assert_eq!(a_l, b_l);
        for col in a_i.columns() {
            let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9 || norm == 0.0);
        }
        assert!(a_l.iter().all(|&v| (0.0..=5.0).contains(&v)));
    }

    #[test]
    fn incremental_residuals_match_fresh_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let (x, y, codes, d_i, d_l) = random_pass_instance(&mut rng, 6, 4, 8, 40);
        let stats = compute_stats(&y).unwrap();
        let cfg = SemanticUpdateConfig { beta1: 0.1, rho: 1e-3, cap: 5.0 };
        let m = margin_default();
        let rule = SemanticRule::Hinge { cfg: &cfg, m: &m };
        let (di2, dl2, residual, scores) =
            update_pass_full(&x, &y, &codes, &d_i, &d_l, &stats, &rule, 5).unwrap();
        let fresh_r = x.values() - &di2.dot(&codes);
        let fresh_s = dl2.dot(&codes);
        for (a, b) in residual.iter().zip(fresh_r.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in scores.iter().zip(fresh_s.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn squared_pass_respects_bounds_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (x, y, codes, d_i, d_l) = random_pass_instance(&mut rng, 6, 4, 8, 40);
        let stats = compute_stats(&y).unwrap();
        let cap = 5.0;
        let lambda = 0.25;
        // Squared-loss analogue of the coupled objective.
        let objective = |di: &Array2<f64>, dl: &Array2<f64>| -> f64 {
            let recon = x.values() - &di.dot(&codes);
            let scores = dl.dot(&codes);
            let mut total = 0.0;
            for i in 0..x.len() {
                let w = stats.labels_per_sample[i] as f64 / lambda;
                total += w * recon.column(i).iter().map(|v| v * v).sum::<f64>();
                for t in 0..y.label_count() {
                    let d = cap * y.values()[[t, i]] - scores[[t, i]];
                    total += d * d;
                }
            }
            total
        };
        let before = objective(&d_i, &d_l);
        let (di2, dl2) =
            squared_loss_update_pass(&x, &y, &codes, &d_i, &d_l, &stats, cap, 1e-3, 13).unwrap();
        let after = objective(&di2, &dl2);
        assert!(after <= before + 1e-7);
        assert!(dl2.iter().all(|&v| (0.0..=cap).contains(&v)));
    }
}
