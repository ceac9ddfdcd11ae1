//! End-to-end training: feature preprocessing, dictionary initialization,
//! alternating coupled optimization, decision-threshold selection, and the
//! validation grid search over the coupling strength, semantic sparsity,
//! and margin width.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotator::{score_matrix, select_threshold};
use crate::data::{
    apply_pca, compute_stats, fit_pca, l2_normalize_columns, DatasetStats, FeatureMatrix,
    LabelMatrix, Model, PcaModel,
};
use crate::dict_update::{
    dictionary_update_pass, init_semantic, squared_loss_update_pass, unsupervised_dl,
    SemanticUpdateConfig,
};
use crate::error::{Error, Result};
use crate::eval::per_label_prf;
use crate::solver::{
    coupled_ls_code, mcsc_with_gram, CodeMatrix, CoupledGram, MarginParams, SparseCode,
};

/// Frozen settings of one training run; persisted with the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Coupling strength between reconstruction and label fit.
    pub lambda: f64,
    /// l1 budget of each sparse code.
    pub code_l1_bound: f64,
    /// l1 weight on semantic dictionary entries.
    pub semantic_l1: f64,
    pub margin: MarginParams,
    /// Proximal damping of the scalar semantic solve.
    pub proximal: f64,
    /// Inner majorize-minimize iterations per sample.
    pub coding_iters: usize,
    /// Outer alternation rounds.
    pub rounds: usize,
    pub num_prototypes: usize,
    pub seed: u64,
    /// Relative tolerance of the sparse-coding solver.
    pub tol: f64,
}

impl Hyperparams {
    /// Defaults around a given coupling strength and margin geometry:
    /// unit code budget, 4 inner iterations, solver tolerance 1e-8.
    pub fn baseline(lambda: f64, margin: MarginParams) -> Self {
        Hyperparams {
            lambda,
            code_l1_bound: 1.0,
            semantic_l1: 0.1,
            margin,
            proximal: 1e-3,
            coding_iters: 4,
            rounds: 15,
            num_prototypes: 0,
            seed: 42,
            tol: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParam(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.code_l1_bound > 0.0) || !self.code_l1_bound.is_finite() {
            return Err(Error::InvalidParam(format!(
                "code l1 budget must be positive, got {}",
                self.code_l1_bound
            )));
        }
        if !self.semantic_l1.is_finite() || self.semantic_l1 < 0.0 {
            return Err(Error::InvalidParam(format!(
                "semantic l1 weight must be nonnegative, got {}",
                self.semantic_l1
            )));
        }
        if !self.proximal.is_finite() || self.proximal < 0.0 {
            return Err(Error::InvalidParam(format!(
                "proximal weight must be nonnegative, got {}",
                self.proximal
            )));
        }
        if self.coding_iters == 0 {
            return Err(Error::InvalidParam("coding_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParam(format!(
                "solver tolerance must be positive, got {}",
                self.tol
            )));
        }
        self.margin.validate()
    }
}

/// Search grids for the validation sweep. Defaults follow the standard
/// policy: lambda = eta^2 / T over a log-ish eta ladder, a dense semantic
/// sparsity ladder, and two margin widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrids {
    pub eta: Vec<f64>,
    pub semantic_l1: Vec<f64>,
    pub margin: Vec<f64>,
}

impl Default for SearchGrids {
    fn default() -> Self {
        SearchGrids {
            eta: vec![0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0],
            semantic_l1: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.75, 1.0],
            margin: vec![0.25, 0.5],
        }
    }
}

/// External training configuration (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Feature/label matrix paths; the CLI may override them.
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub num_prototypes: usize,
    pub rounds: usize,
    pub coding_iters: usize,
    /// Alternations of the unsupervised warm start.
    pub init_iters: usize,
    pub seed: u64,
    /// Coupling scale; lambda = eta^2 / label count.
    pub eta: f64,
    pub semantic_l1: f64,
    /// Margin half-width; the band centers at 0.25 + margin/2.
    pub margin: f64,
    pub score_cap: f64,
    pub proximal: f64,
    pub code_l1_bound: f64,
    pub tol: f64,
    pub grid_search: bool,
    pub grids: SearchGrids,
    pub val_fraction: f64,
    /// Stop the outer loop once the relative objective decrease over a
    /// round falls below 1e-5. Off by default: the reference schedule is
    /// a fixed round count.
    pub early_stop: bool,
    /// Project features to this many dimensions first when they are
    /// wider; null disables the projection.
    pub pca_dim: Option<usize>,
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            features: None,
            labels: None,
            num_prototypes: 50,
            rounds: 15,
            coding_iters: 4,
            init_iters: 10,
            seed: 42,
            eta: 1.0,
            semantic_l1: 0.1,
            margin: 0.5,
            score_cap: 5.0,
            proximal: 1e-3,
            code_l1_bound: 1.0,
            tol: 1e-8,
            grid_search: false,
            grids: SearchGrids::default(),
            val_fraction: 0.1,
            early_stop: false,
            pca_dim: Some(200),
            threads: None,
        }
    }
}

impl TrainConfig {
    /// Fixed-point hyperparameters (no grid search) for a label space of
    /// the given size.
    pub fn hyperparams(&self, label_count: usize) -> Result<Hyperparams> {
        if label_count == 0 {
            return Err(Error::InvalidParam("label count must be positive".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParam(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        let margin = MarginParams::with_default_center(self.margin, self.score_cap)?;
        let hp = Hyperparams {
            lambda: self.eta * self.eta / label_count as f64,
            code_l1_bound: self.code_l1_bound,
            semantic_l1: self.semantic_l1,
            margin,
            proximal: self.proximal,
            coding_iters: self.coding_iters,
            rounds: self.rounds,
            num_prototypes: self.num_prototypes,
            seed: self.seed,
            tol: self.tol,
        };
        hp.validate()?;
        Ok(hp)
    }
}

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Full coupled training with the margin loss.
    Mcdl,
    /// Initialization only: no coupled rounds.
    Udl,
    /// Coupled training with a squared label loss and no semantic l1.
    Cdl,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcdl" => Ok(Method::Mcdl),
            "udl" => Ok(Method::Udl),
            "cdl" => Ok(Method::Cdl),
            other => Err(Error::InvalidParam(format!(
                "unknown method '{other}', expected mcdl, udl, or cdl"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Mcdl => "mcdl",
            Method::Udl => "udl",
            Method::Cdl => "cdl",
        })
    }
}

/// Wall-clock seconds spent in each training phase.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PhaseTimings {
    pub grid_secs: f64,
    pub init_secs: f64,
    pub coding_secs: f64,
    pub update_secs: f64,
    pub threshold_secs: f64,
    pub total_secs: f64,
}

/// Byproducts of a training run. Never persisted with the model: the
/// model directory must be a pure function of inputs and seed.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Global objective after each outer round.
    pub objective_trace: Vec<f64>,
    pub chosen_params: Hyperparams,
    pub wall_times: PhaseTimings,
    /// Indices of all-zero feature columns found during normalization.
    pub zero_feature_columns: Vec<usize>,
}

/// Global training objective: per-sample reconstruction scaled by the
/// sample's label count over lambda, plus all hinge losses, plus the l1
/// weight of the semantic dictionary.
pub fn global_objective(
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    codes: &CodeMatrix,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    stats: &DatasetStats,
    hp: &Hyperparams,
) -> f64 {
    let recon = x.values() - &d_i.dot(codes);
    let scores = d_l.dot(codes);
    let m = &hp.margin;
    let mut total = 0.0;
    for i in 0..x.len() {
        let w = stats.labels_per_sample[i] as f64 / hp.lambda;
        total += w * recon.column(i).iter().map(|v| v * v).sum::<f64>();
        for t in 0..y.label_count() {
            let sign = 2.0 * y.values()[[t, i]] - 1.0;
            let viol = (m.margin - sign * (scores[[t, i]] - m.center)).max(0.0);
            total += viol * viol;
        }
    }
    total + hp.semantic_l1 * d_l.iter().map(|v| v.abs()).sum::<f64>()
}

/// Trains the full coupled model (grid search first when configured).
pub fn train(
    x_raw: &FeatureMatrix,
    y: &LabelMatrix,
    config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    train_method(x_raw, y, config, Method::Mcdl)
}

/// Trains with an explicit method. The grid search applies only to the
/// coupled margin method; ablations train at the configured point.
pub fn train_method(
    x_raw: &FeatureMatrix,
    y: &LabelMatrix,
    config: &TrainConfig,
    method: Method,
) -> Result<(Model, TrainReport)> {
    if x_raw.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature columns but {} label columns",
            x_raw.len(),
            y.len()
        )));
    }
    let stats = compute_stats(y)?;
    let total_start = Instant::now();

    let mut grid_secs = 0.0;
    let mut hp = if config.grid_search && method == Method::Mcdl {
        let start = Instant::now();
        let chosen = grid_search(
            x_raw,
            y,
            &config.grids,
            config.val_fraction,
            config.seed,
            config,
        )?;
        grid_secs = start.elapsed().as_secs_f64();
        chosen
    } else {
        config.hyperparams(y.label_count())?
    };
    if method == Method::Udl {
        hp.rounds = 0;
    }

    let (model, mut report) = train_with(x_raw, y, &stats, &hp, config, method)?;
    report.wall_times.grid_secs = grid_secs;
    report.wall_times.total_secs = total_start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Codes every sample against frozen dictionaries using the method's
/// coding rule; columns are independent and coded in parallel.
fn code_samples(
    x: &FeatureMatrix,
    y: &LabelMatrix,
    d_i: &Array2<f64>,
    d_l: &Array2<f64>,
    hp: &Hyperparams,
    method: Method,
) -> Result<CodeMatrix> {
    let gram = CoupledGram::new(d_i, d_l);
    let n = x.len();
    let cap = hp.margin.cap;
    let codes: Vec<Array1<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Array1<f64>> {
            let xi = x.values().column(i);
            let yi = y.values().column(i);
            let code: SparseCode = match method {
                Method::Cdl => {
                    let targets = yi.mapv(|v| cap * v);
                    let n_plus = yi.iter().filter(|&&v| v != 0.0).count();
                    coupled_ls_code(xi, targets.view(), d_i, d_l, &gram, hp, n_plus)?
                }
                _ => mcsc_with_gram(xi, yi, d_i, d_l, &gram, hp)?.code,
            };
            Ok(code.coeffs().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut a = Array2::zeros((d_i.ncols(), n));
    for (i, code) in codes.iter().enumerate() {
        a.column_mut(i).assign(code);
    }
    Ok(a)
}

fn train_with(
    x_raw: &FeatureMatrix,
    y: &LabelMatrix,
    stats: &DatasetStats,
    hp: &Hyperparams,
    config: &TrainConfig,
    method: Method,
) -> Result<(Model, TrainReport)> {
    hp.validate()?;
    let k = hp.num_prototypes;
    let n = x_raw.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidParam(format!(
            "prototype count {k} must be in 1..{n} (sample count)"
        )));
    }

    // Step 1: optional projection, then column normalization.
    let init_start = Instant::now();
    let pca: Option<PcaModel> = match config.pca_dim {
        Some(dim) if x_raw.dim() > dim => {
            let target = dim.min(n);
            Some(fit_pca(x_raw, target, hp.seed)?)
        }
        _ => None,
    };
    let x_work = match &pca {
        Some(p) => apply_pca(p, x_raw)?,
        None => x_raw.clone(),
    };
    let (x_norm, zero_feature_columns) = l2_normalize_columns(&x_work);

    // Step 2: unsupervised warm start and semantic initialization.
    let (mut d_i, mut codes) = unsupervised_dl(&x_norm, k, config.init_iters, hp.seed)?;
    let mut d_l = init_semantic(&codes, y, hp.margin.cap)?;
    let init_secs = init_start.elapsed().as_secs_f64();

    // Step 3: alternate per-sample coding and dictionary updates.
    let mut coding_secs = 0.0;
    let mut update_secs = 0.0;
    let mut objective_trace = Vec::with_capacity(hp.rounds);
    let sem_cfg = SemanticUpdateConfig {
        beta1: hp.semantic_l1,
        rho: hp.proximal,
        cap: hp.margin.cap,
    };
    for round in 0..hp.rounds {
        let coding_start = Instant::now();
        codes = code_samples(&x_norm, y, &d_i, &d_l, hp, method)?;
        coding_secs += coding_start.elapsed().as_secs_f64();

        let update_start = Instant::now();
        let pass_seed = hp.seed.wrapping_add(round as u64);
        let (ni, nl) = match method {
            Method::Cdl => squared_loss_update_pass(
                &x_norm,
                y,
                &codes,
                &d_i,
                &d_l,
                stats,
                hp.margin.cap,
                hp.proximal,
                pass_seed,
            )?,
            _ => dictionary_update_pass(
                &x_norm,
                y,
                &codes,
                &d_i,
                &d_l,
                stats,
                &sem_cfg,
                &hp.margin,
                pass_seed,
            )?,
        };
        d_i = ni;
        d_l = nl;
        update_secs += update_start.elapsed().as_secs_f64();
        objective_trace.push(global_objective(&d_i, &d_l, &codes, &x_norm, y, stats, hp));

        if config.early_stop && objective_trace.len() >= 2 {
            let prev = objective_trace[objective_trace.len() - 2];
            let cur = objective_trace[objective_trace.len() - 1];
            if prev - cur < 1e-5 * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }

    // Decision threshold: re-encode the raw training features through the
    // exact annotation path.
    let threshold_start = Instant::now();
    let model = Model::new(d_i, d_l, hp.clone(), pca, 0.0)?;
    let tau = select_threshold(&model, x_raw, y)?;
    let model = model.with_tau_optimal(tau);
    let threshold_secs = threshold_start.elapsed().as_secs_f64();

    let report = TrainReport {
        objective_trace,
        chosen_params: hp.clone(),
        wall_times: PhaseTimings {
            grid_secs: 0.0,
            init_secs,
            coding_secs,
            update_secs,
            threshold_secs,
            total_secs: 0.0,
        },
        zero_feature_columns,
    };
    Ok((model, report))
}

/// Seeded validation sweep: splits off a validation fraction, trains each
/// grid cell for two rounds, and returns the cell with the best
/// validation F1. Ties prefer the smaller eta, then the smaller semantic
/// l1 weight, then the smaller margin.
pub fn grid_search(
    x_raw: &FeatureMatrix,
    y: &LabelMatrix,
    grids: &SearchGrids,
    val_fraction: f64,
    seed: u64,
    base: &TrainConfig,
) -> Result<Hyperparams> {
    if grids.eta.is_empty() || grids.semantic_l1.is_empty() || grids.margin.is_empty() {
        return Err(Error::InvalidParam("empty hyperparameter grid".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidParam(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = x_raw.len();
    let val_count = ((n as f64 * val_fraction).floor() as usize).max(1);
    if val_count >= n {
        return Err(Error::InvalidParam(format!(
            "validation split leaves no training samples (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(val_count);

    let x_tr = select_columns(x_raw.values(), train_idx);
    let x_val = select_columns(x_raw.values(), val_idx);
    let y_tr = select_columns(y.values(), train_idx);
    let y_val = select_columns(y.values(), val_idx);
    let x_tr = FeatureMatrix::new(x_tr)?;
    let x_val = FeatureMatrix::new(x_val)?;
    let y_tr = LabelMatrix::new(y_tr)?;
    let y_val = LabelMatrix::new(y_val)?;
    let stats_tr = compute_stats(&y_tr)?;

    // Cell order encodes the tie rule: eta varies slowest, margin fastest.
    let mut cells = Vec::new();
    for &eta in &grids.eta {
        for &beta1 in &grids.semantic_l1 {
            for &margin in &grids.margin {
                cells.push((eta, beta1, margin));
            }
        }
    }

    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(eta, beta1, margin)| -> Result<f64> {
            let mut cfg = base.clone();
            cfg.eta = eta;
            cfg.semantic_l1 = beta1;
            cfg.margin = margin;
            cfg.rounds = 2;
            cfg.grid_search = false;
            let hp = cfg.hyperparams(y_tr.label_count())?;
            let (model, _) = train_with(&x_tr, &y_tr, &stats_tr, &hp, &cfg, Method::Mcdl)?;
            let val_scores = score_matrix(&model, &x_val)?;
            let pred = val_scores.mapv(|s| if s > model.tau_optimal() { 1.0 } else { 0.0 });
            let pred = LabelMatrix::new(pred)?;
            Ok(per_label_prf(&pred, &y_val)?.f1)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0usize;
    for i in 1..cells.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let (eta, beta1, margin) = cells[best];
    let mut chosen = base.clone();
    chosen.eta = eta;
    chosen.semantic_l1 = beta1;
    chosen.margin = margin;
    chosen.hyperparams(y.label_count())
}

fn select_columns(values: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((values.nrows(), idx.len()));
    for (j, &i) in idx.iter().enumerate() {
        out.column_mut(j).assign(&values.column(i));
    }
    out
}
