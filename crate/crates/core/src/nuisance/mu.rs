//! Outcome-regression families: a penalized logistic model with treatment
//! interactions, and a local-constant (Nadaraya-Watson) kernel smoother.

use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::models::OutcomeModel;
use crate::nuisance::logistic::{fit_logistic_cv, PenalizedLogistic, DEFAULT_RIDGE_GRID};
use crate::nuisance::{unified_base_features, unify_covariates};
use crate::util::{median, sq_dist, Standardizer};

/// Which outcome-regression family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuFamily {
    /// Penalized logistic regression with main effects plus all
    /// (a, abar_peer) x covariate products.
    LogisticInteractions,
    /// Local-constant kernel regression on standardized regressors.
    KernelRegression,
}

/// Hyperparameters for [`fit_outcome_regression`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuHyper {
    /// Ridge grid searched by deviance CV (logistic family).
    pub ridge_grid: Vec<f64>,
    pub cv_folds: usize,
    /// Bandwidth multiplier on the median pairwise distance (kernel family).
    pub bandwidth_factor: f64,
    pub seed: u64,
}

impl Default for MuHyper {
    fn default() -> Self {
        Self { ridge_grid: DEFAULT_RIDGE_GRID.to_vec(), cv_folds: 5, bandwidth_factor: 1.0, seed: 0 }
    }
}

/// A fitted outcome regression. Predictions always lie in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MuModel {
    LogisticInteractions(LogisticMu),
    KernelRegression(KernelMu),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticMu {
    pub model: PenalizedLogistic,
    pub covariate_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMu {
    pub scaler: Standardizer,
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub bandwidth: f64,
    pub mean_y: f64,
    pub covariate_dim: usize,
}

/// Regressors for the logistic family: main effects, squares, and all
/// (a, abar) x covariate products, first- and second-order:
/// [a, abar, base, base^2, a*base, a*base^2, abar*base, abar*base^2].
fn interaction_features(a: f64, abar: f64, base: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 + 6 * base.len());
    f.push(a);
    f.push(abar);
    f.extend_from_slice(base);
    f.extend(base.iter().map(|v| v * v));
    f.extend(base.iter().map(|v| a * v));
    f.extend(base.iter().map(|v| a * v * v));
    f.extend(base.iter().map(|v| abar * v));
    f.extend(base.iter().map(|v| abar * v * v));
    f
}

/// Regressors for the kernel family: [a, abar, base].
fn kernel_features(a: f64, abar: f64, base: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 + base.len());
    f.push(a);
    f.push(abar);
    f.extend_from_slice(base);
    f
}

impl MuModel {
    fn predict_features(&self, a: u8, peer_frac: f64, base: &[f64]) -> f64 {
        match self {
            MuModel::LogisticInteractions(m) => {
                m.model.predict(&interaction_features(a as f64, peer_frac, base))
            }
            MuModel::KernelRegression(m) => {
                let f = m.scaler.apply(&kernel_features(a as f64, peer_frac, base));
                let inv_bw2 = 1.0 / (m.bandwidth * m.bandwidth);
                let mut num = 0.0;
                let mut den = 0.0;
                for (row, &yi) in m.rows.iter().zip(&m.y) {
                    let w = (-sq_dist(&f, row) * inv_bw2).exp();
                    num += w * yi;
                    den += w;
                }
                let p = if den > 1e-300 { num / den } else { m.mean_y };
                p.clamp(0.0, 1.0)
            }
        }
    }

    pub fn covariate_dim(&self) -> usize {
        match self {
            MuModel::LogisticInteractions(m) => m.covariate_dim,
            MuModel::KernelRegression(m) => m.covariate_dim,
        }
    }
}

impl OutcomeModel for MuModel {
    fn mu(&self, a: u8, peer_frac: f64, cluster: &ClusterData, j: usize) -> f64 {
        let base = unified_base_features(&unify_covariates(cluster, j));
        self.predict_features(a, peer_frac, &base)
    }
}

/// Fits the outcome regression on one household-row per unit:
/// (y; a, abar_peer, unified covariates).
pub fn fit_outcome_regression(train: &Dataset, family: MuFamily, hyper: &MuHyper) -> Result<MuModel> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(train.household_count());
    let mut y: Vec<f64> = Vec::with_capacity(rows.capacity());
    let mut group: Vec<usize> = Vec::with_capacity(rows.capacity());
    let mut n_treated = 0usize;
    for (ci, cluster) in train.clusters().iter().enumerate() {
        for j in 0..cluster.n() {
            let h = &cluster.households[j];
            let base = unified_base_features(&unify_covariates(cluster, j));
            let abar = cluster.peer_treated_frac(j);
            match family {
                MuFamily::LogisticInteractions => {
                    rows.push(interaction_features(h.a as f64, abar, &base));
                }
                MuFamily::KernelRegression => rows.push(kernel_features(h.a as f64, abar, &base)),
            }
            y.push(h.y as f64);
            group.push(ci);
            n_treated += h.a as usize;
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    if n_treated == 0 || n_treated == rows.len() {
        return Err(Error::FitFailed(format!(
            "empty treatment stratum: {n_treated} treated of {} rows",
            rows.len()
        )));
    }

    match family {
        MuFamily::LogisticInteractions => {
            let model =
                fit_logistic_cv(&rows, &y, &group, &hyper.ridge_grid, hyper.cv_folds, hyper.seed)?;
            Ok(MuModel::LogisticInteractions(LogisticMu {
                model,
                covariate_dim: train.covariate_dim(),
            }))
        }
        MuFamily::KernelRegression => {
            let scaler = Standardizer::fit(&rows);
            let zrows: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
            let bandwidth = hyper.bandwidth_factor * median_pairwise_distance(&zrows);
            if !(bandwidth > 0.0) {
                return Err(Error::FitFailed("degenerate kernel bandwidth".into()));
            }
            let mean_y = y.iter().sum::<f64>() / y.len() as f64;
            Ok(MuModel::KernelRegression(KernelMu {
                scaler,
                rows: zrows,
                y,
                bandwidth,
                mean_y,
                covariate_dim: train.covariate_dim(),
            }))
        }
    }
}

/// Median pairwise Euclidean distance, subsampled for large inputs.
pub(crate) fn median_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let step = (rows.len() / 256).max(1);
    let sample: Vec<&Vec<f64>> = rows.iter().step_by(step).collect();
    let mut dists = Vec::with_capacity(sample.len() * (sample.len() - 1) / 2);
    for i in 0..sample.len() {
        for j in (i + 1)..sample.len() {
            dists.push(sq_dist(sample[i], sample[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let m = median(&dists);
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}
