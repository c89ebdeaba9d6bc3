//! Joint cross-validation of the kernel bandwidth and the regularization
//! strength: each candidate pair is fit on the training folds and scored by
//! the mean estimated loss of its winsorized predictions on the held-out
//! tuning folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::Grid;
use crate::loss::LossTable;
use crate::models::{OutcomeModel, PropensityModel};
use crate::solver::dc::{dc_fit, DcConfig};
use crate::solver::kernel::winsorize;

/// Candidate scores from one cross-validation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub gamma: f64,
    pub lambda: f64,
    pub risk: f64,
}

/// Selects (gamma, lambda) minimizing the cross-validated empirical risk.
/// Ties break toward larger lambda, then larger gamma. Candidates whose fit
/// fails score infinity.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    dataset: &Dataset,
    loss: &LossTable,
    mu: &dyn OutcomeModel,
    e: &dyn PropensityModel,
    gamma_grid: &[f64],
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
    init_grid: &Grid,
    dc: &DcConfig,
) -> Result<(f64, f64, Vec<CvReport>)> {
    if gamma_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("empty cross-validation grid".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {folds}")));
    }
    if dataset.len() != loss.len() {
        return Err(Error::InvalidData("dataset and loss table are misaligned".into()));
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_folds = folds.min(dataset.len());
    let fold_of: Vec<usize> = {
        let mut f = vec![0; dataset.len()];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % n_folds;
        }
        f
    };

    let candidates: Vec<(f64, f64)> = gamma_grid
        .iter()
        .flat_map(|&g| lambda_grid.iter().map(move |&l| (g, l)))
        .collect();

    let reports: Vec<CvReport> = candidates
        .par_iter()
        .map(|&(gamma, lambda)| {
            let mut total = 0.0;
            let mut count = 0usize;
            let mut failed = false;
            for f in 0..n_folds {
                let train: Vec<usize> =
                    (0..dataset.len()).filter(|&i| fold_of[i] != f).collect();
                let tune: Vec<usize> = (0..dataset.len()).filter(|&i| fold_of[i] == f).collect();
                if train.len() < 2 || tune.is_empty() {
                    continue;
                }
                let train_data = dataset.subset(&train);
                let train_loss = loss.subset(&train);
                match dc_fit(&train_data, &train_loss, mu, e, gamma, lambda, init_grid, dc, None) {
                    Ok(fit) => {
                        for &i in &tune {
                            let pred =
                                winsorize(fit.rule.predict_cluster(&dataset.clusters()[i]));
                            total += loss.loss(i, pred);
                            count += 1;
                        }
                    }
                    Err(err) => {
                        log::warn!("cv candidate (gamma={gamma}, lambda={lambda}) failed: {err}");
                        failed = true;
                        break;
                    }
                }
            }
            let risk = if failed || count == 0 { f64::INFINITY } else { total / count as f64 };
            CvReport { gamma, lambda, risk }
        })
        .collect();

    let mut best: Option<&CvReport> = None;
    for r in &reports {
        let better = match best {
            None => true,
            Some(b) => {
                r.risk < b.risk - 1e-12
                    || ((r.risk - b.risk).abs() <= 1e-12
                        && (r.lambda > b.lambda
                            || (r.lambda == b.lambda && r.gamma > b.gamma)))
            }
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("at least one candidate");
    if best.risk.is_infinite() {
        return Err(Error::FitFailed("every cross-validation candidate failed".into()));
    }
    Ok((best.gamma, best.lambda, reports))
}
