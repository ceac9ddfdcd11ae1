//! Constrained sparse coding: squared hinge loss, slack and surrogate-target
//! computations, the nonnegative l1-ball least-squares solver, and the
//! majorize-minimize coding loop that couples reconstruction with label fit.
//!
//! The solver minimizes ||b - D*alpha||^2 subject to alpha >= 0 and
//! sum(alpha) <= beta0 by following the regularization path of the
//! penalized problem ||b - D*alpha||^2 + 2*theta*sum(alpha): as theta
//! decreases from max(D'b) the active set changes at discrete events
//! (atom enters, coefficient hits zero, l1 budget reached), and the
//! solution is piecewise linear in theta between events. The path is
//! computed on Gram form (D'D, D'b), so callers that code many vectors
//! against one dictionary can precompute the Gram once.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::trainer::Hyperparams;

/// Default relative tolerance for the sparse-coding solver.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Default l1 budget for codes.
pub const DEFAULT_CODE_L1_BOUND: f64 = 1.0;

/// Codes for a whole collection, one column per sample (K x N).
pub type CodeMatrix = Array2<f64>;

/// Margin geometry of the squared hinge loss: positives must score above
/// `center + margin`, negatives below `center - margin`, and all scores
/// live in [0, cap].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginParams {
    pub margin: f64,
    pub center: f64,
    pub cap: f64,
}

impl MarginParams {
    pub fn new(margin: f64, center: f64, cap: f64) -> Result<Self> {
        let m = MarginParams { margin, center, cap };
        m.validate()?;
        Ok(m)
    }

    /// Places the band at the default policy center 0.25 + margin/2.
    pub fn with_default_center(margin: f64, cap: f64) -> Result<Self> {
        Self::new(margin, 0.25 + margin / 2.0, cap)
    }

    /// Both hinge targets must be attainable by scores in [0, cap].
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::InvalidParam(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.cap > 0.0) || !self.cap.is_finite() {
            return Err(Error::InvalidParam(format!(
                "score cap must be positive, got {}",
                self.cap
            )));
        }
        if self.center - self.margin < 0.0 || self.center + self.margin > self.cap {
            return Err(Error::InvalidParam(format!(
                "margin band [{}, {}] must lie within [0, {}]",
                self.center - self.margin,
                self.center + self.margin,
                self.cap
            )));
        }
        Ok(())
    }
}

/// Nonnegative code with bounded l1 mass.
#[derive(Debug, Clone)]
pub struct SparseCode {
    coeffs: Array1<f64>,
}

impl SparseCode {
    /// Validates nonnegativity and the l1 budget (within 1e-9).
    pub fn new(coeffs: Array1<f64>, l1_bound: f64) -> Result<Self> {
        if coeffs.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Numerical(
                "sparse code has a negative or non-finite entry".into(),
            ));
        }
        let mass: f64 = coeffs.sum();
        if mass > l1_bound + 1e-9 {
            return Err(Error::Numerical(format!(
                "sparse code mass {mass} exceeds budget {l1_bound}"
            )));
        }
        Ok(SparseCode { coeffs })
    }

    pub fn coeffs(&self) -> &Array1<f64> {
        &self.coeffs
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.sum()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Squared hinge loss for one label: zero once the score clears the margin
/// on the correct side, quadratic in the violation otherwise.
pub fn hinge_loss(y: f64, score: f64, m: &MarginParams) -> f64 {
    let sign = 2.0 * y - 1.0;
    let violation = (m.margin - sign * (score - m.center)).max(0.0);
    violation * violation
}

/// Element-wise margin violations; `hinge_loss` equals the square of each.
pub fn slack_vector(
    y: ArrayView1<f64>,
    scores: ArrayView1<f64>,
    m: &MarginParams,
) -> Result<Array1<f64>> {
    if y.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "labels have length {}, scores {}",
            y.len(),
            scores.len()
        )));
    }
    Ok(Array1::from_iter(y.iter().zip(scores.iter()).map(
        |(&yt, &s)| {
            let sign = 2.0 * yt - 1.0;
            (m.margin - sign * (s - m.center)).max(0.0)
        },
    )))
}

/// State of the marginalized coupled sparse-coding iteration for one sample.
#[derive(Debug, Clone)]
pub struct MCSCState {
    /// Margin violations of `code`, one per label.
    pub slacks: Array1<f64>,
    /// Surrogate regression targets the last solve was run against.
    pub targets: Array1<f64>,
    /// Semantic scores of `code`.
    pub scores: Array1<f64>,
    pub code: SparseCode,
    /// Coupled per-sample objective of `code` (reconstruction plus
    /// weighted squared slacks).
    pub objective: f64,
    /// Objective after each inner iteration, oldest first.
    pub objective_trace: Vec<f64>,
}

/// Next-round regression targets: labels whose margin is satisfied keep
/// their current score (their loss term is zero and must stay zero), while
/// violated labels are pulled to the nearest margin edge.
pub fn surrogate_targets(
    state: &MCSCState,
    y: ArrayView1<f64>,
    m: &MarginParams,
) -> Array1<f64> {
    Array1::from_iter(y.iter().enumerate().map(|(t, &yt)| {
        if state.slacks[t] == 0.0 {
            state.scores[t]
        } else if yt != 0.0 {
            m.center + m.margin
        } else {
            m.center - m.margin
        }
    }))
}

/// Coupled per-sample objective: reconstruction error plus the squared
/// margin violations weighted by lambda over the sample's label count.
pub fn coupled_objective_f(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    alpha: &SparseCode,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    lambda: f64,
    n_plus: usize,
    m: &MarginParams,
) -> f64 {
    let recon = &x.to_owned() - &d_i.dot(alpha.coeffs());
    let scores = d_l.dot(alpha.coeffs());
    let hinge: f64 = y
        .iter()
        .zip(scores.iter())
        .map(|(&yt, &s)| hinge_loss(yt, s, m))
        .sum();
    recon.iter().map(|v| v * v).sum::<f64>() + lambda / n_plus as f64 * hinge
}

/// Majorizing surrogate: reconstruction error plus weighted squared
/// distances to fixed regression targets.
pub fn surrogate_objective_g(
    x: ArrayView1<f64>,
    alpha: &SparseCode,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    lambda: f64,
    n_plus: usize,
    targets: ArrayView1<f64>,
) -> f64 {
    let recon = &x.to_owned() - &d_i.dot(alpha.coeffs());
    let scores = d_l.dot(alpha.coeffs());
    let sq: f64 = targets
        .iter()
        .zip(scores.iter())
        .map(|(&t, &s)| (t - s) * (t - s))
        .sum();
    recon.iter().map(|v| v * v).sum::<f64>() + lambda / n_plus as f64 * sq
}

/// Minimizes ||b - D*alpha||^2 subject to alpha >= 0, sum(alpha) <= beta0.
pub fn nn_lasso(d: &Array2<f64>, b: &Array1<f64>, beta0: f64, tol: f64) -> Result<SparseCode> {
    if d.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary has {} rows, target has length {}",
            d.nrows(),
            b.len()
        )));
    }
    if !d.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sparse coding input".into()));
    }
    let gram = d.t().dot(d);
    let corr = d.t().dot(b);
    nn_lasso_with_gram(&gram, &corr, beta0, tol)
}

/// Gram-form entry point: `gram` = D'D and `corr` = D'b. Lets callers
/// amortize the Gram across many targets coded against one dictionary.
pub fn nn_lasso_with_gram(
    gram: &Array2<f64>,
    corr: &Array1<f64>,
    beta0: f64,
    tol: f64,
) -> Result<SparseCode> {
    if gram.nrows() != gram.ncols() || gram.nrows() != corr.len() {
        return Err(Error::DimensionMismatch(format!(
            "gram is {}x{}, correlations have length {}",
            gram.nrows(),
            gram.ncols(),
            corr.len()
        )));
    }
    if !(beta0 > 0.0) {
        return Err(Error::InvalidParam(format!(
            "l1 budget must be positive, got {beta0}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParam(format!(
            "solver tolerance must be positive, got {tol}"
        )));
    }
    if !corr.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sparse coding correlations".into()));
    }
    let alpha = homotopy_path(gram, corr, beta0)?;
    SparseCode::new(alpha, beta0)
}

/// One candidate change of the active set along the path.
#[derive(Clone, Copy, PartialEq)]
enum Event {
    Budget,
    Drop(usize),
    Entry(usize),
}

fn homotopy_path(gram: &Array2<f64>, corr: &Array1<f64>, beta0: f64) -> Result<Array1<f64>> {
    let k = corr.len();
    let mut alpha = Array1::zeros(k);

    // Initial penalty level: the largest correlation. If nothing is
    // positively correlated the zero code is optimal.
    let mut best = 0usize;
    for j in 1..k {
        if corr[j] > corr[best] {
            best = j;
        }
    }
    let theta0 = corr[best];
    if theta0 <= 0.0 {
        return Ok(alpha);
    }
    let eps = 1e-13 * theta0.max(1.0);

    let mut active: Vec<usize> = vec![best];
    let mut is_active = vec![false; k];
    is_active[best] = true;
    let mut theta = theta0;
    // An atom dropped at some theta may not re-enter until the path has
    // moved strictly below that level; prevents event cycling on ties.
    let mut banned: Option<(usize, f64)> = None;

    let max_events = 10 * k + 10;
    let mut w_u = vec![0.0; k];
    let mut w_v = vec![0.0; k];
    for _ in 0..max_events {
        let a = active.len();
        let mut g_sub = vec![0.0; a * a];
        for (r, &i) in active.iter().enumerate() {
            for (c, &j) in active.iter().enumerate() {
                g_sub[r * a + c] = gram[[i, j]];
            }
        }
        let rhs_c: Vec<f64> = active.iter().map(|&i| corr[i]).collect();
        let rhs_1 = vec![1.0; a];
        let (u, v) = solve_spd_two(&mut g_sub, a, &rhs_c, &rhs_1)?;

        // Affine coefficients of every atom's correlation along the
        // segment: c_j(theta) = p_j + theta * q_j. The Gram matrix is
        // symmetric, so rows stand in for columns and stay contiguous.
        w_u.fill(0.0);
        w_v.fill(0.0);
        for (r, &i) in active.iter().enumerate() {
            let (ur, vr) = (u[r], v[r]);
            let row = gram.row(i);
            match row.as_slice() {
                Some(row) => {
                    for ((wu, wv), &g) in w_u.iter_mut().zip(w_v.iter_mut()).zip(row) {
                        *wu += g * ur;
                        *wv += g * vr;
                    }
                }
                None => {
                    for (j, &g) in row.iter().enumerate() {
                        w_u[j] += g * ur;
                        w_v[j] += g * vr;
                    }
                }
            }
        }

        let sum_u: f64 = u.iter().sum();
        let sum_v: f64 = v.iter().sum();
        let mut next: Option<(f64, Event)> = None;
        let consider = |cand: f64, ev: Event, next: &mut Option<(f64, Event)>| {
            if !(cand >= -eps && cand <= theta + eps) {
                return;
            }
            let cand = cand.clamp(0.0, theta);
            match next {
                Some((t, e)) => {
                    let better = cand > *t + eps
                        || (cand >= *t - eps && event_priority(ev, *e, cand, *t));
                    if better {
                        *next = Some((cand, ev));
                    }
                }
                None => *next = Some((cand, ev)),
            }
        };

        if sum_v > 0.0 {
            consider((sum_u - beta0) / sum_v, Event::Budget, &mut next);
        }
        // A coefficient moves by v[r] per unit decrease of theta, so only
        // negative v[r] can push it to zero from above; the crossing of a
        // growing coefficient lies behind the path and must not fire.
        for (r, &i) in active.iter().enumerate() {
            if v[r] < 0.0 {
                consider(u[r] / v[r], Event::Drop(i), &mut next);
            }
        }
        for j in 0..k {
            if is_active[j] {
                continue;
            }
            if let Some((bj, bt)) = banned {
                if bj == j && theta >= bt - eps {
                    continue;
                }
            }
            let denom = 1.0 - w_v[j];
            if denom > 1e-12 {
                consider((corr[j] - w_u[j]) / denom, Event::Entry(j), &mut next);
            }
        }

        match next {
            Some((t, Event::Budget)) => {
                for (r, &i) in active.iter().enumerate() {
                    alpha[i] = (u[r] - t * v[r]).max(0.0);
                }
                return Ok(finalize(alpha, beta0));
            }
            Some((t, Event::Drop(j))) if t > eps => {
                theta = t;
                let pos = active.iter().position(|&i| i == j).expect("drop of active atom");
                active.remove(pos);
                is_active[j] = false;
                banned = Some((j, t));
            }
            Some((t, Event::Entry(j))) if t > eps => {
                theta = t;
                active.push(j);
                is_active[j] = true;
            }
            // The penalty reaches zero before any constraint binds: the
            // active-set least-squares solution is the optimum.
            _ => {
                for (r, &i) in active.iter().enumerate() {
                    alpha[i] = u[r].max(0.0);
                }
                return Ok(finalize(alpha, beta0));
            }
        }
    }
    // Event cap reached (pathologically degenerate input); the current
    // path point is feasible and near-optimal.
    Ok(finalize(alpha, beta0))
}

/// Tie rule between events at equal theta: stopping at the budget is
/// always valid, and drops must precede entries.
fn event_priority(new: Event, old: Event, _tn: f64, _to: f64) -> bool {
    let rank = |e: Event| match e {
        Event::Budget => 2,
        Event::Drop(_) => 1,
        Event::Entry(_) => 0,
    };
    let (rn, ro) = (rank(new), rank(old));
    if rn != ro {
        return rn > ro;
    }
    // Same kind: keep the lowest atom index for determinism.
    match (new, old) {
        (Event::Drop(a), Event::Drop(b)) | (Event::Entry(a), Event::Entry(b)) => a < b,
        _ => false,
    }
}

/// Clips float dust so the returned code is feasible exactly.
fn finalize(mut alpha: Array1<f64>, beta0: f64) -> Array1<f64> {
    for v in alpha.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mass: f64 = alpha.sum();
    if mass > beta0 {
        let scale = beta0 / mass;
        alpha.mapv_inplace(|v| v * scale);
    }
    alpha
}

/// Solves the symmetric positive-definite system for two right-hand sides
/// via an in-place Cholesky factorization; retries with a small ridge when
/// the subdictionary is numerically rank-deficient.
fn solve_spd_two(
    g: &mut [f64],
    a: usize,
    rhs1: &[f64],
    rhs2: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let original = g.to_vec();
    let max_diag = (0..a).map(|i| original[i * a + i]).fold(0.0f64, f64::max);
    let mut ridge = 0.0;
    for attempt in 0..4 {
        if attempt > 0 {
            ridge = if ridge == 0.0 {
                1e-10 * max_diag.max(1e-30)
            } else {
                ridge * 1e4
            };
            g.copy_from_slice(&original);
            for i in 0..a {
                g[i * a + i] += ridge;
            }
        }
        if cholesky_in_place(g, a) {
            let mut u = rhs1.to_vec();
            let mut v = rhs2.to_vec();
            cholesky_solve(g, a, &mut u);
            cholesky_solve(g, a, &mut v);
            return Ok((u, v));
        }
    }
    Err(Error::Numerical(
        "active-set gram matrix is not positive definite".into(),
    ))
}

/// In-place lower Cholesky; returns false when a pivot is not positive.
fn cholesky_in_place(g: &mut [f64], a: usize) -> bool {
    for i in 0..a {
        for j in 0..=i {
            let mut s = g[i * a + j];
            for l in 0..j {
                s -= g[i * a + l] * g[j * a + l];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                g[i * a + i] = s.sqrt();
            } else {
                g[i * a + j] = s / g[j * a + j];
            }
        }
    }
    true
}

/// Forward and back substitution against the factor from
/// `cholesky_in_place`.
fn cholesky_solve(l: &[f64], a: usize, rhs: &mut [f64]) {
    for i in 0..a {
        let mut s = rhs[i];
        for j in 0..i {
            s -= l[i * a + j] * rhs[j];
        }
        rhs[i] = s / l[i * a + i];
    }
    for i in (0..a).rev() {
        let mut s = rhs[i];
        for j in i + 1..a {
            s -= l[j * a + i] * rhs[j];
        }
        rhs[i] = s / l[i * a + i];
    }
}

/// Precomputed Gram matrices of the two dictionary blocks; the stacked
/// coding problem's Gram is `visual + weight * semantic`.
#[derive(Debug, Clone)]
pub struct CoupledGram {
    pub visual: Array2<f64>,
    pub semantic: Array2<f64>,
}

impl CoupledGram {
    pub fn new(d_i: &Array2<f64>, d_l: &Array2<f64>) -> Self {
        CoupledGram {
            visual: d_i.t().dot(d_i),
            semantic: d_l.t().dot(d_l),
        }
    }
}

/// Single coupled solve against fixed regression targets: minimizes
/// ||x - D_I*a||^2 + (lambda/n_plus) * ||targets - D_L*a||^2 over feasible
/// codes. This is the whole coding step when the label loss is squared
/// (the surrogate is exact), and the inner step of [`mcsc`] otherwise.
pub fn coupled_ls_code(
    x: ArrayView1<f64>,
    targets: ArrayView1<f64>,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    gram: &CoupledGram,
    hp: &Hyperparams,
    n_plus: usize,
) -> Result<SparseCode> {
    if x.len() != d_i.nrows() || targets.len() != d_l.nrows() || d_i.ncols() != d_l.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "coupled coding shapes disagree: x {} vs {} rows, targets {} vs {} rows",
            x.len(),
            d_i.nrows(),
            targets.len(),
            d_l.nrows()
        )));
    }
    if n_plus == 0 {
        return Err(Error::InvalidParam("sample has no positive label".into()));
    }
    let weight = hp.lambda / n_plus as f64;
    let stacked_gram = &gram.visual + &(weight * &gram.semantic);
    let corr = &d_i.t().dot(&x) + &(weight * &d_l.t().dot(&targets));
    nn_lasso_with_gram(&stacked_gram, &corr, hp.code_l1_bound, hp.tol)
}

/// Marginalized coupled sparse coding for one sample.
///
/// Runs `hp.coding_iters` majorize-minimize rounds. The first round
/// treats every label as violated, so all targets sit at the margin
/// edges; later rounds rebuild targets from the current code. Each round
/// solves one stacked nonnegative lasso over the augmented system
/// [x; sqrt(w) * targets] against [D_I; sqrt(w) * D_L] with
/// w = lambda / n_plus, which never increases the coupled objective.
pub fn mcsc(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    hp: &Hyperparams,
) -> Result<MCSCState> {
    let gram = CoupledGram::new(d_i, d_l);
    mcsc_with_gram(x, y, d_i, d_l, &gram, hp)
}

/// [`mcsc`] with the dictionary Grams precomputed by the caller.
pub fn mcsc_with_gram(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    gram: &CoupledGram,
    hp: &Hyperparams,
) -> Result<MCSCState> {
    if x.len() != d_i.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "sample has {} features, visual dictionary {} rows",
            x.len(),
            d_i.nrows()
        )));
    }
    if y.len() != d_l.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "sample has {} labels, semantic dictionary {} rows",
            y.len(),
            d_l.nrows()
        )));
    }
    if d_i.ncols() != d_l.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "visual dictionary has {} prototypes, semantic has {}",
            d_i.ncols(),
            d_l.ncols()
        )));
    }
    let n_plus = y.iter().filter(|&&v| v != 0.0).count();
    if n_plus == 0 {
        return Err(Error::InvalidParam("sample has no positive label".into()));
    }
    if hp.coding_iters == 0 {
        return Err(Error::InvalidParam("coding_iters must be at least 1".into()));
    }
    let m = &hp.margin;
    let weight = hp.lambda / n_plus as f64;

    let stacked_gram = &gram.visual + &(weight * &gram.semantic);
    let corr_visual = d_i.t().dot(&x);

    // First round: every slack assumed positive, targets at margin edges.
    let mut targets = Array1::from_iter(
        y.iter()
            .map(|&yt| if yt != 0.0 { m.center + m.margin } else { m.center - m.margin }),
    );

    let mut state: Option<MCSCState> = None;
    let mut trace = Vec::with_capacity(hp.coding_iters);
    for s in 0..hp.coding_iters {
        if s > 0 {
            targets = surrogate_targets(state.as_ref().expect("state set after round 1"), y, m);
        }
        let corr = &corr_visual + &(weight * &d_l.t().dot(&targets));
        let code = nn_lasso_with_gram(&stacked_gram, &corr, hp.code_l1_bound, hp.tol)?;
        let scores = d_l.dot(code.coeffs());
        let slacks = slack_vector(y, scores.view(), m)?;
        let recon = &x.to_owned() - &d_i.dot(code.coeffs());
        let objective = recon.iter().map(|v| v * v).sum::<f64>()
            + weight * slacks.iter().map(|v| v * v).sum::<f64>();
        trace.push(objective);
        state = Some(MCSCState {
            slacks,
            targets: targets.clone(),
            scores,
            code,
            objective,
            objective_trace: Vec::new(),
        });
    }
    let mut state = state.expect("coding_iters >= 1");
    state.objective_trace = trace;
    Ok(state)
}
