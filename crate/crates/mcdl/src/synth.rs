//! Synthetic benchmark generator: plants ground-truth coupled
//! dictionaries, then draws samples as noisy convex mixtures of a few
//! visual prototypes with labels thresholded from the matching semantic
//! mixture. Everything is deterministic per seed.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, LabelMatrix};
use crate::error::{Error, Result};

/// Parameters of one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Ground-truth prototype count.
    pub prototypes: usize,
    pub feature_dim: usize,
    pub label_count: usize,
    pub samples: usize,
    /// Distinct prototypes mixed into each sample.
    pub sparsity: usize,
    pub noise_sigma: f64,
    /// Probability that a semantic entry is nonzero.
    pub label_density: f64,
    pub seed: u64,
    /// Upper bound of semantic entries.
    pub score_cap: f64,
    /// Mixture score above which a label is set.
    pub threshold: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            prototypes: 20,
            feature_dim: 30,
            label_count: 15,
            samples: 600,
            sparsity: 2,
            noise_sigma: 0.01,
            label_density: 0.2,
            seed: 42,
            score_cap: 5.0,
            threshold: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes == 0
            || self.feature_dim == 0
            || self.label_count == 0
            || self.samples == 0
        {
            return Err(Error::InvalidParam(
                "all synthetic dimensions must be positive".into(),
            ));
        }
        if self.sparsity == 0 || self.sparsity > self.prototypes {
            return Err(Error::InvalidParam(format!(
                "sparsity {} must be in 1..={}",
                self.sparsity, self.prototypes
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidParam(format!(
                "noise sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.label_density > 0.0 && self.label_density <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "label density must be in (0, 1], got {}",
                self.label_density
            )));
        }
        if !self.score_cap.is_finite() || self.score_cap <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "score cap must be positive, got {}",
                self.score_cap
            )));
        }
        if !self.threshold.is_finite()
            || self.threshold < 0.0
            || self.threshold >= self.score_cap
        {
            return Err(Error::InvalidParam(format!(
                "threshold {} must lie in [0, {})",
                self.threshold, self.score_cap
            )));
        }
        Ok(())
    }
}

/// The planted dictionaries a synthetic dataset was drawn from.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// feature_dim x prototypes, unit columns.
    pub visual: Array2<f64>,
    /// label_count x prototypes, entries in [0, score_cap].
    pub semantic: Array2<f64>,
}

/// Draws a dataset from a planted model.
///
/// Visual prototypes are unit-normalized Gaussian directions. Semantic
/// columns are sparse with uniform entries; every column is forced to
/// carry at least one entry above the threshold so that each prototype
/// can label a sample on its own. Samples mix `sparsity` distinct
/// prototypes with normalized exponential weights, add isotropic noise,
/// and are unit-normalized; labels are set where the same mixture of
/// semantic columns exceeds the threshold. Mixtures yielding no label at
/// all are redrawn; a bounded retry budget turns persistent failure into
/// an error instead of a hang.
pub fn generate_synthetic(
    spec: &SynthSpec,
) -> Result<(FeatureMatrix, LabelMatrix, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, m, t, n) = (
        spec.prototypes,
        spec.feature_dim,
        spec.label_count,
        spec.samples,
    );

    let mut visual = Array2::zeros((m, k));
    for mut col in visual.columns_mut() {
        loop {
            for v in col.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                col.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }

    let mut semantic = Array2::zeros((t, k));
    for mut col in semantic.columns_mut() {
        for v in col.iter_mut() {
            if rng.gen_bool(spec.label_density) {
                *v = rng.gen_range(0.0..spec.score_cap);
            }
        }
        if !col.iter().any(|&v| v > spec.threshold) {
            let row = rng.gen_range(0..t);
            col[row] = loop {
                let v = rng.gen_range(spec.threshold..spec.score_cap);
                if v > spec.threshold {
                    break v;
                }
            };
        }
    }

    let mut x = Array2::zeros((m, n));
    let mut y = Array2::zeros((t, n));
    let budget = 100usize.saturating_mul(n);
    let mut draws = 0usize;
    for i in 0..n {
        loop {
            draws += 1;
            if draws > budget {
                return Err(Error::InfeasibleSpec(format!(
                    "no labeled sample after {budget} draws; raise label_density \
                     or lower the threshold"
                )));
            }
            let atoms = rand::seq::index::sample(&mut rng, k, spec.sparsity);
            let mut weights: Vec<f64> =
                (0..spec.sparsity).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                continue;
            }
            for w in &mut weights {
                *w /= total;
            }

            let mut score = Array1::zeros(t);
            for (w, a) in weights.iter().zip(atoms.iter()) {
                score.scaled_add(*w, &semantic.column(a));
            }
            if !score.iter().any(|&s| s > spec.threshold) {
                continue;
            }

            let mut feat = Array1::zeros(m);
            for (w, a) in weights.iter().zip(atoms.iter()) {
                feat.scaled_add(*w, &visual.column(a));
            }
            if spec.noise_sigma > 0.0 {
                for v in feat.iter_mut() {
                    *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let norm = feat.dot(&feat).sqrt();
            if !(norm > 0.0) {
                continue;
            }
            feat.mapv_inplace(|v| v / norm);

            x.column_mut(i).assign(&feat);
            for (tt, &s) in score.iter().enumerate() {
                if s > spec.threshold {
                    y[[tt, i]] = 1.0;
                }
            }
            break;
        }
    }

    Ok((
        FeatureMatrix::new(x)?,
        LabelMatrix::new(y)?,
        GroundTruth { visual, semantic },
    ))
}
