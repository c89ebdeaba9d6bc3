//! Ridge-penalized logistic regression fit by iteratively reweighted least
//! squares, with the penalty strength chosen by grouped deviance
//! cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{expit, Standardizer};

/// Default penalty grid searched by [`fit_logistic_cv`].
pub const DEFAULT_RIDGE_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

/// A fitted penalized logistic model. Feature rows exclude the intercept;
/// non-intercept columns are standardized internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedLogistic {
    /// Intercept followed by standardized-feature coefficients.
    pub coef: Vec<f64>,
    pub scaler: Standardizer,
    pub ridge: f64,
}

impl PenalizedLogistic {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let z = self.scaler.apply(features);
        let lp = self.coef[0] + z.iter().zip(&self.coef[1..]).map(|(a, b)| a * b).sum::<f64>();
        expit(lp)
    }
}

/// Deviance of predictions against binary outcomes, clamped away from 0/1.
fn deviance(p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let pi = pi.clamp(1e-12, 1.0 - 1e-12);
            -2.0 * (yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln())
        })
        .sum()
}

/// One IRLS fit at a fixed ridge penalty on standardized features.
/// `zrows` must already be standardized; the intercept is unpenalized.
fn irls(zrows: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let n = zrows.len();
    let d = zrows[0].len() + 1;
    let x = DMatrix::from_fn(n, d, |i, j| if j == 0 { 1.0 } else { zrows[i][j - 1] });
    let yv = DVector::from_row_slice(y);
    let mut beta = DVector::zeros(d);

    let mut pen_dev = f64::INFINITY;
    for _ in 0..100 {
        let eta = &x * &beta;
        let p: DVector<f64> = eta.map(expit);
        let grad_data: DVector<f64> = x.transpose() * (&yv - &p);
        let mut grad = grad_data;
        for j in 1..d {
            grad[j] -= ridge * beta[j];
        }
        let gnorm = grad.amax();
        if gnorm < 1e-8 * (n as f64).max(1.0) {
            break;
        }

        let w: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-10)).collect();
        let mut h: DMatrix<f64> = DMatrix::zeros(d, d);
        for i in 0..n {
            let xi = x.row(i);
            for a in 0..d {
                let wa = w[i] * xi[a];
                for b in a..d {
                    h[(a, b)] += wa * xi[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        for j in 1..d {
            h[(j, j)] += ridge;
        }

        let chol = h.clone().cholesky().ok_or_else(|| {
            let diag = h.diagonal();
            let cond = diag.max() / diag.min().max(f64::MIN_POSITIVE);
            Error::Singular { context: "logistic IRLS normal equations".into(), condition: cond }
        })?;
        let delta = chol.solve(&grad);

        // Step-halving on the penalized deviance.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &delta * step;
            let eta_c = &x * &cand;
            let p_c: Vec<f64> = eta_c.iter().map(|&e| expit(e)).collect();
            let mut dev = deviance(&p_c, y);
            for j in 1..d {
                dev += ridge * cand[j] * cand[j];
            }
            if dev <= pen_dev + 1e-12 {
                beta = cand;
                pen_dev = dev;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic coefficients".into()));
    }
    Ok(beta.iter().copied().collect())
}

/// Fits a penalized logistic model, choosing the ridge strength from `grid`
/// by `folds`-fold deviance cross-validation with rows grouped by `group`
/// (rows of one group never straddle folds). Ties prefer the larger penalty.
pub fn fit_logistic_cv(
    rows: &[Vec<f64>],
    y: &[f64],
    group: &[usize],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<PenalizedLogistic> {
    if rows.is_empty() {
        return Err(Error::InvalidData("empty design matrix".into()));
    }
    if rows.len() != y.len() || rows.len() != group.len() {
        return Err(Error::InvalidData("design/outcome/group length mismatch".into()));
    }
    let scaler = Standardizer::fit(rows);
    let zrows: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();

    let mut groups: Vec<usize> = {
        let mut g: Vec<usize> = group.to_vec();
        g.sort_unstable();
        g.dedup();
        g
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let n_folds = folds.max(2).min(groups.len().max(2));
    let fold_of_group: std::collections::HashMap<usize, usize> =
        groups.iter().enumerate().map(|(i, &g)| (g, i % n_folds)).collect();

    let best_ridge = if grid.len() == 1 || groups.len() < 2 {
        *grid.last().ok_or_else(|| Error::InvalidConfig("empty ridge grid".into()))?
    } else {
        let mut best = (f64::INFINITY, grid[0]);
        for &ridge in grid {
            let mut total_dev = 0.0;
            let mut feasible = true;
            for f in 0..n_folds {
                let train_idx: Vec<usize> =
                    (0..rows.len()).filter(|&i| fold_of_group[&group[i]] != f).collect();
                let test_idx: Vec<usize> =
                    (0..rows.len()).filter(|&i| fold_of_group[&group[i]] == f).collect();
                if train_idx.is_empty() || test_idx.is_empty() {
                    continue;
                }
                let tr_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| zrows[i].clone()).collect();
                let tr_y: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
                match irls(&tr_rows, &tr_y, ridge) {
                    Ok(beta) => {
                        let p: Vec<f64> = test_idx
                            .iter()
                            .map(|&i| {
                                let lp = beta[0]
                                    + zrows[i].iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
                                expit(lp)
                            })
                            .collect();
                        let ty: Vec<f64> = test_idx.iter().map(|&i| y[i]).collect();
                        total_dev += deviance(&p, &ty);
                    }
                    Err(_) => {
                        feasible = false;
                        break;
                    }
                }
            }
            if feasible && (total_dev < best.0 - 1e-12 || (total_dev <= best.0 + 1e-12 && ridge > best.1))
            {
                best = (total_dev, ridge);
            }
        }
        best.1
    };

    let coef = irls(&zrows, y, best_ridge)?;
    Ok(PenalizedLogistic { coef, scaler, ridge: best_ridge })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn recovers_separable_signal() {
        // y = 1 exactly when x > 0.
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 - 99.5) / 50.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(r[0] > 0.0)).collect();
        let group: Vec<usize> = (0..200).collect();
        let m = fit_logistic_cv(&rows, &y, &group, &DEFAULT_RIDGE_GRID, 5, 1).unwrap();
        assert!(m.predict(&[1.5]) > 0.95);
        assert!(m.predict(&[-1.5]) < 0.05);
    }

    #[test]
    fn constant_outcome_saturates() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 50.0]).collect();
        let y = vec![1.0; 50];
        let group: Vec<usize> = (0..50).collect();
        let m = fit_logistic_cv(&rows, &y, &group, &[1e-8], 5, 1).unwrap();
        for i in 0..50 {
            assert_abs_diff_eq!(m.predict(&rows[i]), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|i| vec![(i % 7) as f64, ((i * 13) % 5) as f64])
            .collect();
        let y: Vec<f64> = (0..80).map(|i| f64::from(i % 3 == 0)).collect();
        let group: Vec<usize> = (0..80).map(|i| i / 4).collect();
        let a = fit_logistic_cv(&rows, &y, &group, &DEFAULT_RIDGE_GRID, 5, 9).unwrap();
        let b = fit_logistic_cv(&rows, &y, &group, &DEFAULT_RIDGE_GRID, 5, 9).unwrap();
        assert_eq!(a.coef, b.coef);
        assert_eq!(a.ridge, b.ridge);
    }
}
