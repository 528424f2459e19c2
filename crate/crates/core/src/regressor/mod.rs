//! In-context regressors.
//!
//! Fitting a backend never optimizes parameters: it captures the context
//! dataset (plus cheap precomputation such as feature standardization) in an
//! immutable handle. Prediction and row embedding are pure inference over
//! that handle.

pub mod knn;
pub mod remote;

use std::fmt;
use std::sync::Arc;

use rand::distributions::{Distribution, Open01};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use knn::{Knn, KnnFit};
pub use remote::{RemoteBackend, RemoteFit};

/// Upper bound of the uniform noise added to every regression target.
pub const REWARD_NOISE_SCALE: f64 = 1e-4;

/// Feature rows and their regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct QDataset {
    width: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl QDataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidInput(format!(
                "{} feature rows but {} targets",
                x.len(),
                y.len()
            )));
        }
        let width = x.first().map_or(0, Vec::len);
        check_rows(&x, width)?;
        if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("target {bad} is not finite")));
        }
        Ok(Self { width, x, y })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    /// Same features, new targets.
    pub fn with_targets(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.x.len() {
            return Err(Error::InvalidInput(format!(
                "{} targets for {} rows",
                y.len(),
                self.x.len()
            )));
        }
        if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("target {bad} is not finite")));
        }
        Ok(Self {
            width: self.width,
            x: self.x.clone(),
            y,
        })
    }
}

/// Validates that every row has `width` finite entries.
pub(crate) fn check_rows(rows: &[Vec<f64>], width: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::WidthMismatch {
                expected: width,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("row {i} has a non-finite entry")));
        }
    }
    Ok(())
}

/// Adds independent `U(0, 1e-4)` noise to every target so that no target
/// column has zero variance.
pub fn perturb_rewards<R: Rng + ?Sized>(dataset: &QDataset, rng: &mut R) -> Result<QDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyContext);
    }
    let y = dataset
        .targets()
        .iter()
        .map(|&y| {
            let u: f64 = Open01.sample(rng);
            y + u * REWARD_NOISE_SCALE
        })
        .collect();
    dataset.with_targets(y)
}

/// Per-row representations produced by [`FittedRegressor::embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Predictions that are a fixed convex combination of context targets.
///
/// Row `i` lists `(context index, weight)` pairs for query `i`; applying the
/// smoother to a target vector yields exactly what `fit` followed by
/// `predict` would return for those queries.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSmoother {
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl LinearSmoother {
    pub fn apply(&self, targets: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * targets[j]).sum())
            .collect()
    }
}

/// A backend able to condition on a context dataset.
pub trait Regressor: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit(&self, context: &QDataset) -> Result<Arc<dyn FittedRegressor>>;

    /// Backends whose predictions depend on the targets only linearly (and on
    /// the context features through fixed weights) may return those weights,
    /// letting callers refit on new targets without re-running inference.
    fn smoother(&self, _features: &[Vec<f64>], _queries: &[Vec<f64>]) -> Option<Result<LinearSmoother>> {
        None
    }
}

/// An immutable fitted handle.
pub trait FittedRegressor: Send + Sync + fmt::Debug {
    fn backend(&self) -> &'static str;

    fn width(&self) -> usize;

    fn predict(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>>;

    fn embed(&self, _rows: &[Vec<f64>]) -> Result<EmbeddingMatrix> {
        Err(Error::Capability("embeddings"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Knn {
        k: usize,
    },
    Remote {
        endpoint: String,
        /// Encoder layer the bridge should use for embeddings; bridge default when absent.
        embed_layer: Option<i64>,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Knn { k: knn::DEFAULT_K }
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Regressor>> {
        match self {
            BackendConfig::Knn { k } => Ok(Box::new(Knn::new(*k)?)),
            BackendConfig::Remote {
                endpoint,
                embed_layer,
            } => Ok(Box::new(RemoteBackend::new(endpoint.clone(), *embed_layer))),
        }
    }
}

/// Convenience wrapper: builds the backend and fits it in one call.
pub fn fit(config: &BackendConfig, context: &QDataset) -> Result<Arc<dyn FittedRegressor>> {
    config.build()?.fit(context)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeros(n: usize) -> QDataset {
        QDataset::new(vec![vec![0.0]; n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn perturbation_breaks_constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = perturb_rewards(&zeros(64), &mut rng).unwrap();
        assert!(out.targets().iter().all(|&y| y > 0.0 && y < 1e-4));
        let mean = out.targets().iter().sum::<f64>() / 64.0;
        let var = out.targets().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(var.sqrt() > 0.0);
    }

    #[test]
    fn perturbation_is_seeded_and_bounded() {
        let ds = QDataset::new(vec![vec![1.0], vec![2.0]], vec![5.0, 5.0]).unwrap();
        let a = perturb_rewards(&ds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = perturb_rewards(&ds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.targets().iter().all(|&y| (5.0..=5.0001).contains(&y)));
        assert_eq!(a.features(), ds.features());
    }

    #[test]
    fn perturbation_rejects_empty() {
        let empty = QDataset::new(vec![], vec![]).unwrap();
        assert!(matches!(
            perturb_rewards(&empty, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyContext)
        ));
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            QDataset::new(vec![vec![0.0, 1.0], vec![0.0]], vec![0.0, 0.0]),
            Err(Error::WidthMismatch { .. })
        ));
        assert!(QDataset::new(vec![vec![f64::NAN]], vec![0.0]).is_err());
        assert!(QDataset::new(vec![vec![0.0]], vec![f64::INFINITY]).is_err());
        assert!(QDataset::new(vec![vec![0.0]], vec![0.0, 1.0]).is_err());
    }
}
