//! Dataset containers, column normalization, PCA, label statistics, and
//! the on-disk formats for matrices and trained models.
//!
//! Feature and label collections are column-major: column i of a
//! [`FeatureMatrix`] is one sample, column i of a [`LabelMatrix`] is its
//! binary label vector. All types are immutable after construction and
//! safe to share across threads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Hyperparams;

/// Magic prefix of the binary matrix format.
const MATRIX_MAGIC: &[u8; 8] = b"MCDLMAT1";

/// Version stamp written into model `meta.json`.
const MODEL_FORMAT_VERSION: u32 = 1;

/// Real feature vectors, one per column.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    /// Wraps a dense matrix after checking that it is nonempty and finite.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidParam(format!(
                "feature matrix must be nonempty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Feature dimensionality (rows).
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Number of samples (columns).
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn column(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(i)
    }
}

/// Binary label vectors, one per column; entry (t, i) says whether sample
/// i carries label t. Entries must be exactly 0.0 or 1.0.
#[derive(Debug, Clone)]
pub struct LabelMatrix {
    values: Array2<f64>,
}

impl LabelMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidParam(format!(
                "label matrix must be nonempty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        for ((row, col), &v) in values.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidLabel { row, col, value: v });
            }
        }
        Ok(LabelMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Number of distinct labels (rows).
    pub fn label_count(&self) -> usize {
        self.values.nrows()
    }

    /// Number of samples (columns).
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn column(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(i)
    }
}

/// Per-sample and per-label positive counts.
///
/// `labels_per_sample[i]` weights sample i in the visual prototype update
/// and scales its label-fit term, so it must be at least 1; a label with
/// no positive samples is allowed and merely never contributes.
#[derive(Debug, Clone)]
pub struct DatasetStats {
    pub labels_per_sample: Vec<usize>,
    pub samples_per_label: Vec<usize>,
}

/// Counts positives per column and per row of a label matrix.
///
/// Errors with the offending sample index when a column has no positive
/// label, since downstream updates divide by that count.
pub fn compute_stats(labels: &LabelMatrix) -> Result<DatasetStats> {
    let y = labels.values();
    let mut labels_per_sample = Vec::with_capacity(y.ncols());
    for (i, col) in y.columns().into_iter().enumerate() {
        let count = col.iter().filter(|&&v| v != 0.0).count();
        if count == 0 {
            return Err(Error::ZeroLabelSample { sample: i });
        }
        labels_per_sample.push(count);
    }
    let samples_per_label = y
        .rows()
        .into_iter()
        .map(|row| row.iter().filter(|&&v| v != 0.0).count())
        .collect();
    Ok(DatasetStats {
        labels_per_sample,
        samples_per_label,
    })
}

/// Scales every nonzero column to unit Euclidean norm.
///
/// Zero columns are left untouched; their indices are returned so callers
/// can surface a warning.
pub fn l2_normalize_columns(x: &FeatureMatrix) -> (FeatureMatrix, Vec<usize>) {
    let mut values = x.values().clone();
    let mut zero_columns = Vec::new();
    for (i, mut col) in values.columns_mut().into_iter().enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_columns.push(i);
        } else {
            col.mapv_inplace(|v| v / norm);
        }
    }
    (FeatureMatrix { values }, zero_columns)
}

/// Mean vector and orthonormal projection basis fitted by [`fit_pca`].
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// raw_dim x target_dim, orthonormal columns sorted by explained
    /// variance, descending.
    pub basis: Array2<f64>,
}

impl PcaModel {
    pub fn raw_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn target_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Fits a PCA projection to the top `target_dim` principal directions.
///
/// The fit is an exact eigendecomposition of the sample covariance and is
/// fully deterministic; `seed` is accepted for interface uniformity with
/// the other fitting routines and does not influence the result.
pub fn fit_pca(x: &FeatureMatrix, target_dim: usize, seed: u64) -> Result<PcaModel> {
    let _ = seed;
    let m = x.dim();
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidParam(
            "pca requires at least 2 samples".into(),
        ));
    }
    if target_dim == 0 || target_dim > m.min(n) {
        return Err(Error::InvalidParam(format!(
            "pca target dim {} out of range 1..={}",
            target_dim,
            m.min(n)
        )));
    }

    let mean = x
        .values()
        .mean_axis(Axis(1))
        .expect("nonempty by construction");
    let mut centered = x.values().clone();
    for mut col in centered.columns_mut() {
        col -= &mean;
    }
    let cov = centered.dot(&centered.t()) / (n as f64 - 1.0);

    let sym = nalgebra::DMatrix::from_fn(m, m, |r, c| cov[[r, c]]).symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        sym.eigenvalues[b]
            .partial_cmp(&sym.eigenvalues[a])
            .expect("eigenvalues of a finite symmetric matrix are finite")
            .then(a.cmp(&b))
    });

    let mut basis = Array2::zeros((m, target_dim));
    for (j, &src) in order.iter().take(target_dim).enumerate() {
        for r in 0..m {
            basis[[r, j]] = sym.eigenvectors[(r, src)];
        }
    }
    Ok(PcaModel { mean, basis })
}

/// Projects every column of `x` as basis' * (column - mean).
pub fn apply_pca(pca: &PcaModel, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.dim() != pca.raw_dim() {
        return Err(Error::DimensionMismatch(format!(
            "pca expects {} rows, input has {}",
            pca.raw_dim(),
            x.dim()
        )));
    }
    let mut centered = x.values().clone();
    for mut col in centered.columns_mut() {
        col -= &pca.mean;
    }
    FeatureMatrix::new(pca.basis.t().dot(&centered))
}

/// Projects a single raw vector into the PCA space.
pub fn apply_pca_vector(pca: &PcaModel, x: &Array1<f64>) -> Result<Array1<f64>> {
    if x.len() != pca.raw_dim() {
        return Err(Error::DimensionMismatch(format!(
            "pca expects length {}, input has {}",
            pca.raw_dim(),
            x.len()
        )));
    }
    Ok(pca.basis.t().dot(&(x - &pca.mean)))
}

/// A trained annotation model: the coupled dictionary pair, the
/// hyperparameters it was trained with, the stored feature transform, and
/// the decision threshold.
#[derive(Debug, Clone)]
pub struct Model {
    visual_dict: Array2<f64>,
    semantic_dict: Array2<f64>,
    hyperparams: Hyperparams,
    pca: Option<PcaModel>,
    tau_optimal: f64,
    // Cached D'D over the visual dictionary; derived, never persisted.
    // Keeps per-query coding cost independent of how the model was built.
    visual_gram: Array2<f64>,
}

impl Model {
    /// Assembles and validates a model.
    pub fn new(
        visual_dict: Array2<f64>,
        semantic_dict: Array2<f64>,
        hyperparams: Hyperparams,
        pca: Option<PcaModel>,
        tau_optimal: f64,
    ) -> Result<Self> {
        if visual_dict.ncols() != semantic_dict.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "visual dictionary has {} prototypes, semantic has {}",
                visual_dict.ncols(),
                semantic_dict.ncols()
            )));
        }
        if !visual_dict.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("visual dictionary".into()));
        }
        for col in visual_dict.columns() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 + 1e-9 {
                return Err(Error::InvalidParam(format!(
                    "visual prototype norm {norm} exceeds 1"
                )));
            }
        }
        let cap = hyperparams.margin.cap;
        for &v in semantic_dict.iter() {
            if !v.is_finite() || v < 0.0 || v > cap {
                return Err(Error::InvalidParam(format!(
                    "semantic entry {v} outside [0, {cap}]"
                )));
            }
        }
        if let Some(p) = &pca {
            if p.basis.ncols() != visual_dict.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "pca target dim {} does not match visual dictionary rows {}",
                    p.basis.ncols(),
                    visual_dict.nrows()
                )));
            }
        }
        let visual_gram = visual_dict.t().dot(&visual_dict);
        Ok(Model {
            visual_dict,
            semantic_dict,
            hyperparams,
            pca,
            tau_optimal,
            visual_gram,
        })
    }

    pub fn visual_dict(&self) -> &Array2<f64> {
        &self.visual_dict
    }

    pub fn semantic_dict(&self) -> &Array2<f64> {
        &self.semantic_dict
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    pub fn pca(&self) -> Option<&PcaModel> {
        self.pca.as_ref()
    }

    pub fn tau_optimal(&self) -> f64 {
        self.tau_optimal
    }

    pub fn visual_gram(&self) -> &Array2<f64> {
        &self.visual_gram
    }

    /// Feature dimensionality after the stored transform.
    pub fn feature_dim(&self) -> usize {
        self.visual_dict.nrows()
    }

    /// Dimensionality a raw query must have.
    pub fn raw_dim(&self) -> usize {
        self.pca
            .as_ref()
            .map_or(self.visual_dict.nrows(), PcaModel::raw_dim)
    }

    pub fn label_count(&self) -> usize {
        self.semantic_dict.nrows()
    }

    pub fn num_prototypes(&self) -> usize {
        self.visual_dict.ncols()
    }

    /// Returns a copy with a different decision threshold.
    pub fn with_tau_optimal(mut self, tau: f64) -> Self {
        self.tau_optimal = tau;
        self
    }
}

/// Writes a dense matrix in the binary format described in the README:
/// 8 magic bytes, row and column counts as little-endian u64, then
/// row-major IEEE-754 binary64 values.
pub fn save_matrix(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MATRIX_MAGIC).map_err(io_err)?;
    w.write_all(&(matrix.nrows() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(matrix.ncols() as u64).to_le_bytes())
        .map_err(io_err)?;
    for r in 0..matrix.nrows() {
        for c in 0..matrix.ncols() {
            w.write_all(&matrix[[r, c]].to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a matrix written by [`save_matrix`], bit-exactly.
pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let file_len = file.metadata().map_err(io_err)?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    if file_len < 8 || {
        r.read_exact(&mut magic).map_err(io_err)?;
        &magic != MATRIX_MAGIC
    } {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
        });
    }

    if file_len < 24 {
        return Err(Error::TruncatedPayload {
            path: path.display().to_string(),
            rows: 0,
            cols: 0,
        });
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(io_err)?;
    let rows = u64::from_le_bytes(word);
    r.read_exact(&mut word).map_err(io_err)?;
    let cols = u64::from_le_bytes(word);

    let payload = match rows.checked_mul(cols) {
        Some(count) if count <= usize::MAX as u64 => match count.checked_mul(8) {
            Some(bytes) => bytes,
            None => {
                return Err(Error::DimensionOverflow {
                    path: path.display().to_string(),
                    rows,
                    cols,
                })
            }
        },
        _ => {
            return Err(Error::DimensionOverflow {
                path: path.display().to_string(),
                rows,
                cols,
            })
        }
    };
    if file_len - 24 < payload {
        return Err(Error::TruncatedPayload {
            path: path.display().to_string(),
            rows,
            cols,
        });
    }

    let mut bytes = vec![0u8; payload as usize];
    r.read_exact(&mut bytes).map_err(io_err)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), values).map_err(|_| {
        Error::DimensionOverflow {
            path: path.display().to_string(),
            rows,
            cols,
        }
    })
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format_version: u32,
    feature_dim: usize,
    label_count: usize,
    num_prototypes: usize,
    raw_dim: usize,
    seed: u64,
    tau_optimal: f64,
    has_pca: bool,
    hyperparams: Hyperparams,
}

/// Persists a model as a directory: `meta.json` plus matrix files
/// `visual_dict`, `semantic_dict`, and `pca_mean`/`pca_basis` when a
/// transform is stored.
pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let meta = ModelMeta {
        format_version: MODEL_FORMAT_VERSION,
        feature_dim: model.feature_dim(),
        label_count: model.label_count(),
        num_prototypes: model.num_prototypes(),
        raw_dim: model.raw_dim(),
        seed: model.hyperparams.seed,
        tau_optimal: model.tau_optimal,
        has_pca: model.pca.is_some(),
        hyperparams: model.hyperparams.clone(),
    };
    let meta_path = dir.join("meta.json");
    let file = File::create(&meta_path).map_err(|source| Error::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), &meta).map_err(|source| Error::Json {
        path: meta_path.display().to_string(),
        source,
    })?;

    save_matrix(&dir.join("visual_dict"), &model.visual_dict)?;
    save_matrix(&dir.join("semantic_dict"), &model.semantic_dict)?;
    if let Some(pca) = &model.pca {
        let mean = pca
            .mean
            .view()
            .insert_axis(Axis(1))
            .to_owned();
        save_matrix(&dir.join("pca_mean"), &mean)?;
        save_matrix(&dir.join("pca_basis"), &pca.basis)?;
    }
    Ok(())
}

/// Loads a model directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<Model> {
    let meta_path = dir.join("meta.json");
    let file = File::open(&meta_path).map_err(|source| Error::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    let meta: ModelMeta =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
            path: meta_path.display().to_string(),
            source,
        })?;
    if meta.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::InvalidParam(format!(
            "unsupported model format version {}",
            meta.format_version
        )));
    }

    let visual = load_matrix(&dir.join("visual_dict"))?;
    let semantic = load_matrix(&dir.join("semantic_dict"))?;
    let pca = if meta.has_pca {
        let mean = load_matrix(&dir.join("pca_mean"))?;
        let basis = load_matrix(&dir.join("pca_basis"))?;
        Some(PcaModel {
            mean: mean.column(0).to_owned(),
            basis,
        })
    } else {
        None
    };

    let model = Model::new(visual, semantic, meta.hyperparams, pca, meta.tau_optimal)?;
    if model.feature_dim() != meta.feature_dim
        || model.label_count() != meta.label_count
        || model.num_prototypes() != meta.num_prototypes
        || model.raw_dim() != meta.raw_dim
    {
        return Err(Error::DimensionMismatch(format!(
            "model matrices disagree with meta.json in {}",
            dir.display()
        )));
    }
    Ok(model)
}
