//! Gaussian-kernel machinery: kernel matrices, representer-form rules, and
//! winsorization into the unit interval.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::util::{median, sq_dist, Standardizer};

/// Clamp a real-valued rule into [0, 1].
pub fn winsorize(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

/// K(x, x') = exp(-|x - x'|^2 / gamma^2).
pub fn kernel_value(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-sq_dist(a, b) / (gamma * gamma)).exp()
}

/// Dense kernel matrix over standardized points.
pub fn kernel_matrix(points: &[Vec<f64>], gamma: f64) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} must be positive")));
    }
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("kernel point {i}")));
        }
    }
    let n = points.len();
    let mut k: DMatrix<f64> = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = kernel_value(&points[i], &points[j], gamma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Median pairwise distance over standardized points; the center of the
/// bandwidth grid searched by cross-validation.
pub fn median_heuristic(points: &[Vec<f64>]) -> f64 {
    let step = (points.len() / 512).max(1);
    let sample: Vec<&Vec<f64>> = points.iter().step_by(step).collect();
    let mut d = Vec::with_capacity(sample.len() * sample.len() / 2);
    for i in 0..sample.len() {
        for j in (i + 1)..sample.len() {
            d.push(sq_dist(sample[i], sample[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let m = median(&d);
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}

/// Representer-form rule: theta(x) = sum_j eta_j K(x, x_j) + b over
/// standardized cluster features, with the standardization statistics
/// frozen from the training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRule {
    pub support: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
    pub b: f64,
    pub gamma: f64,
    pub scaler: Standardizer,
}

impl KernelRule {
    /// Unwinsorized prediction from raw (unstandardized) cluster features.
    pub fn raw_predict(&self, raw_features: &[f64]) -> f64 {
        let z = self.scaler.apply(raw_features);
        let mut acc = 0.0;
        for (sj, ej) in self.support.iter().zip(&self.eta) {
            acc += ej * kernel_value(&z, sj, self.gamma);
        }
        acc + self.b
    }

    pub fn predict_cluster(&self, cluster: &ClusterData) -> f64 {
        self.raw_predict(&Dataset::cluster_features(cluster))
    }
}

/// A kernel rule whose predictions are clamped into [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinsorizedRule {
    pub inner: KernelRule,
}

impl WinsorizedRule {
    pub fn predict_cluster(&self, cluster: &ClusterData) -> f64 {
        winsorize(self.inner.predict_cluster(cluster))
    }

    pub fn predict_features(&self, raw_features: &[f64]) -> f64 {
        winsorize(self.inner.raw_predict(raw_features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn winsorize_endpoints() {
        assert_eq!(winsorize(-0.3), 0.0);
        assert_eq!(winsorize(0.42), 0.42);
        assert_eq!(winsorize(1.7), 1.0);
    }

    #[test]
    fn kernel_matrix_unit_diagonal_and_symmetry() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![0.5, 0.5], vec![0.5, 0.5]];
        let k = kernel_matrix(&pts, 1.3).unwrap();
        for i in 0..4 {
            assert_eq!(k[(i, i)], 1.0);
            for j in 0..4 {
                assert!((k[(i, j)] - k[(j, i)]).abs() <= 1e-15);
            }
        }
        // Identical points give off-diagonal one.
        assert_eq!(k[(2, 3)], 1.0);
    }

    #[test]
    fn kernel_matrix_rejects_non_finite() {
        let pts = vec![vec![0.0], vec![f64::NAN]];
        assert!(kernel_matrix(&pts, 1.0).is_err());
        assert!(kernel_matrix(&[vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn representer_prediction_matches_matrix_product() {
        let pts = vec![vec![0.0, 0.3], vec![1.0, -0.2], vec![-0.4, 0.9]];
        let scaler = Standardizer::fit(&pts);
        let z: Vec<Vec<f64>> = pts.iter().map(|p| scaler.apply(p)).collect();
        let gamma = 0.9;
        let k = kernel_matrix(&z, gamma).unwrap();
        let rule = KernelRule {
            support: z.clone(),
            eta: vec![0.3, -0.7, 1.1],
            b: 0.25,
            gamma,
            scaler,
        };
        for i in 0..3 {
            let via_matrix: f64 =
                (0..3).map(|j| rule.eta[j] * k[(i, j)]).sum::<f64>() + rule.b;
            assert_abs_diff_eq!(rule.raw_predict(&pts[i]), via_matrix, epsilon = 1e-12);
        }
    }
}
