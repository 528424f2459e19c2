use std::sync::Arc;

use rayon::prelude::*;

use super::{check_rows, EmbeddingMatrix, FittedRegressor, LinearSmoother, QDataset, Regressor};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

/// Queries per rayon task; small batches run inline.
const PAR_CHUNK: usize = 256;

/// Inverse-distance-weighted k-nearest-neighbour regression over z-scored
/// features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knn {
    k: usize,
}

impl Knn {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Field {
                field: "backend.k",
                message: "must be at least 1".into(),
            });
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fit_knn(&self, context: &QDataset) -> Result<KnnFit> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let width = context.width();
        let stats = Standardizer::from_rows(context.features(), width);
        let mut z = Vec::with_capacity(context.len() * width);
        for row in context.features() {
            stats.push_standardized(row, &mut z);
        }
        Ok(KnnFit {
            k: self.k.min(context.len()),
            width,
            stats,
            z,
            y: context.targets().to_vec(),
        })
    }
}

impl Default for Knn {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

impl Regressor for Knn {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn fit(&self, context: &QDataset) -> Result<Arc<dyn FittedRegressor>> {
        Ok(Arc::new(self.fit_knn(context)?))
    }

    fn smoother(&self, features: &[Vec<f64>], queries: &[Vec<f64>]) -> Option<Result<LinearSmoother>> {
        let run = || {
            let width = features.first().map_or(0, Vec::len);
            check_rows(features, width)?;
            // Targets do not influence neighbour weights, so any placeholder works.
            let ctx = QDataset::new(features.to_vec(), vec![0.0; features.len()])?;
            let fit = self.fit_knn(&ctx)?;
            Ok(LinearSmoother {
                weights: fit.weights(queries)?,
            })
        };
        Some(run())
    }
}

/// Per-feature mean and standard deviation frozen at fit time.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn from_rows(rows: &[Vec<f64>], width: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn push_standardized(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(row.len());
        self.push_standardized(row, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnFit {
    k: usize,
    width: usize,
    stats: Standardizer,
    /// Row-major standardized context features.
    z: Vec<f64>,
    y: Vec<f64>,
}

impl KnnFit {
    pub fn context_len(&self) -> usize {
        self.y.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.stats.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.stats.std
    }

    /// Neighbour weights for every query.
    pub fn weights(&self, queries: &[Vec<f64>]) -> Result<Vec<Vec<(usize, f64)>>> {
        check_rows(queries, self.width)?;
        if queries.len() <= PAR_CHUNK {
            return Ok(queries.iter().map(|q| self.neighbour_weights(q)).collect());
        }
        Ok(queries
            .par_chunks(PAR_CHUNK)
            .flat_map_iter(|chunk| chunk.iter().map(|q| self.neighbour_weights(q)))
            .collect())
    }

    fn neighbour_weights(&self, query: &[f64]) -> Vec<(usize, f64)> {
        let zq = self.stats.standardize(query);
        let mut dist: Vec<(f64, usize)> = self
            .z
            .chunks_exact(self.width)
            .enumerate()
            .map(|(j, row)| {
                let d2: f64 = row.iter().zip(&zq).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, j)
            })
            .collect();

        let exact: Vec<usize> = dist.iter().filter(|(d2, _)| *d2 == 0.0).map(|&(_, j)| j).collect();
        if !exact.is_empty() {
            let w = 1.0 / exact.len() as f64;
            return exact.into_iter().map(|j| (j, w)).collect();
        }

        let by_distance_then_index =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = self.k;
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, by_distance_then_index);
            dist.truncate(k);
        }
        dist.sort_unstable_by(by_distance_then_index);

        let inv: Vec<f64> = dist.iter().map(|(d2, _)| 1.0 / d2.sqrt()).collect();
        let total: f64 = inv.iter().sum();
        dist.iter().zip(inv).map(|(&(_, j), w)| (j, w / total)).collect()
    }
}

impl FittedRegressor for KnnFit {
    fn backend(&self) -> &'static str {
        "knn"
    }

    fn width(&self) -> usize {
        self.width
    }

    fn predict(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        let weights = self.weights(queries)?;
        Ok(weights
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * self.y[j]).sum())
            .collect())
    }

    /// Identity encoder over standardized features.
    fn embed(&self, rows: &[Vec<f64>]) -> Result<EmbeddingMatrix> {
        check_rows(rows, self.width)?;
        Ok(EmbeddingMatrix {
            rows: rows.iter().map(|r| self.stats.standardize(r)).collect(),
        })
    }
}
