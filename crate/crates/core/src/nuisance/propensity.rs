//! Joint propensity e(a, s | x): probability that a household has treatment
//! `a` while exactly `s` of its peers are treated.
//!
//! Two estimators: a product form that fits individual treatment
//! probabilities and composes the peer count by Poisson-binomial dynamic
//! programming, and a semiparametric form that models the binned peer
//! treated-fraction with a cumulative-logit (ordinal) regression and the
//! ego treatment with a conditional logistic model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::models::PropensityModel;
use crate::nuisance::logistic::{fit_logistic_cv, PenalizedLogistic, DEFAULT_RIDGE_GRID};
use crate::nuisance::{unified_base_features, unify_covariates};
use crate::util::expit;

/// Probability mass function of a sum of independent Bernoulli draws,
/// computed by dynamic programming. `pmf[k]` = P(sum = k).
pub fn poisson_binomial_pmf(probs: &[f64]) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(probs.len() + 1);
    pmf.push(1.0);
    for &p in probs {
        pmf.push(0.0);
        for k in (0..pmf.len() - 1).rev() {
            let m = pmf[k];
            pmf[k + 1] += m * p;
            pmf[k] = m * (1.0 - p);
        }
    }
    pmf
}

/// Propensity estimator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EVariant {
    Product,
    Ordinal,
}

/// Hyperparameters for [`fit_propensity`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EHyper {
    /// Number of peer-fraction bins (M + 1) for the ordinal variant.
    pub bins: usize,
    /// Lower clip applied to every predicted cell probability.
    pub floor: f64,
    pub ridge_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for EHyper {
    fn default() -> Self {
        Self {
            bins: crate::util::MAX_CLUSTER_SIZE,
            floor: 0.01,
            ridge_grid: DEFAULT_RIDGE_GRID.to_vec(),
            cv_folds: 5,
            seed: 0,
        }
    }
}

/// A fitted joint propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EModel {
    Product(ProductPropensity),
    Ordinal(OrdinalPropensity),
}

/// Individual-logistic model composed by Poisson-binomial DP over peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductPropensity {
    pub individual: PenalizedLogistic,
    pub floor: f64,
}

/// Cumulative-logit model for the binned peer treated-fraction plus a
/// conditional logistic model for the ego treatment.
///
/// `thresholds` holds the M free cutpoints for bins 0..M-1; the cumulative
/// probability of the top bin is one by construction, so the M + 1 cell
/// probabilities sum to one exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalPropensity {
    pub thresholds: Vec<f64>,
    pub beta_ego: Vec<f64>,
    pub beta_peer: Vec<f64>,
    pub feature_scaler: crate::util::Standardizer,
    pub ego_model: PenalizedLogistic,
    pub bins: usize,
    pub floor: f64,
}

impl EModel {
    pub fn floor(&self) -> f64 {
        match self {
            EModel::Product(m) => m.floor,
            EModel::Ordinal(m) => m.floor,
        }
    }

    /// Joint cell probability before flooring. For fixed covariates the
    /// cells sum to one over (a, s).
    pub fn cell_prob_unfloored(&self, a: u8, s: usize, cluster: &ClusterData, j: usize) -> f64 {
        match self {
            EModel::Product(m) => {
                let p_j = m.individual.predict(&cluster.households[j].x);
                let peer_probs: Vec<f64> = cluster
                    .households
                    .iter()
                    .enumerate()
                    .filter(|(l, _)| *l != j)
                    .map(|(_, h)| m.individual.predict(&h.x))
                    .collect();
                let pmf = poisson_binomial_pmf(&peer_probs);
                let ego = if a == 1 { p_j } else { 1.0 - p_j };
                ego * pmf[s]
            }
            EModel::Ordinal(m) => {
                let n = cluster.n();
                let peer_frac = if n == 1 { 0.0 } else { s as f64 / (n - 1) as f64 };
                let uc = unify_covariates(cluster, j);
                let base = unified_base_features(&uc);

                // Ego treatment given the peer fraction.
                let mut ego_feat = Vec::with_capacity(1 + base.len());
                ego_feat.push(peer_frac);
                ego_feat.extend_from_slice(&base);
                let p_a1 = m.ego_model.predict(&ego_feat);
                let ego = if a == 1 { p_a1 } else { 1.0 - p_a1 };

                // Peer-count probability: bins are partitioned among the
                // attainable counts of this cluster by nearest bin value, so
                // the cell probabilities sum to one per household.
                let eta = m.linear_predictor(&uc.ego, &uc.peer_max, &uc.peer_min);
                let mut peer_prob = 0.0;
                let m_top = m.bins - 1;
                for t in 0..m.bins {
                    let v_t = t as f64 / m_top as f64;
                    let nearest = if n == 1 { 0 } else { (v_t * (n - 1) as f64).round() as usize };
                    if nearest == s {
                        peer_prob += m.bin_prob(t, eta);
                    }
                }
                ego * peer_prob
            }
        }
    }
}

impl OrdinalPropensity {
    fn linear_predictor(&self, ego: &[f64], peer_max: &[f64], peer_min: &[f64]) -> f64 {
        let mut raw = Vec::with_capacity(ego.len() + peer_max.len() + peer_min.len());
        raw.extend_from_slice(ego);
        raw.extend_from_slice(peer_max);
        raw.extend_from_slice(peer_min);
        let z = self.feature_scaler.apply(&raw);
        let d = ego.len();
        let mut eta = 0.0;
        for (k, zv) in z.iter().enumerate() {
            let b = if k < d { self.beta_ego[k] } else { self.beta_peer[k - d] };
            eta += b * zv;
        }
        eta
    }

    /// P(bin = t | eta): difference of adjacent cumulative logits, with the
    /// conventions cum(-1) = 0 and cum(top) = 1.
    fn bin_prob(&self, t: usize, eta: f64) -> f64 {
        let upper = if t + 1 == self.bins { 1.0 } else { expit(self.thresholds[t] + eta) };
        let lower = if t == 0 { 0.0 } else { expit(self.thresholds[t - 1] + eta) };
        (upper - lower).max(0.0)
    }
}

impl PropensityModel for EModel {
    fn e(&self, a: u8, s: usize, cluster: &ClusterData, j: usize) -> f64 {
        self.cell_prob_unfloored(a, s, cluster, j).max(self.floor())
    }
}

/// Fits the joint propensity on every household of `train`.
pub fn fit_propensity(train: &Dataset, variant: EVariant, hyper: &EHyper) -> Result<EModel> {
    if train.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    match variant {
        EVariant::Product => {
            let mut rows = Vec::with_capacity(train.household_count());
            let mut y = Vec::with_capacity(rows.capacity());
            let mut group = Vec::with_capacity(rows.capacity());
            for (ci, cluster) in train.clusters().iter().enumerate() {
                for h in &cluster.households {
                    rows.push(h.x.clone());
                    y.push(h.a as f64);
                    group.push(ci);
                }
            }
            let individual =
                fit_logistic_cv(&rows, &y, &group, &hyper.ridge_grid, hyper.cv_folds, hyper.seed)?;
            Ok(EModel::Product(ProductPropensity { individual, floor: hyper.floor }))
        }
        EVariant::Ordinal => fit_ordinal(train, hyper),
    }
}

fn fit_ordinal(train: &Dataset, hyper: &EHyper) -> Result<EModel> {
    if hyper.bins < 2 {
        return Err(Error::InvalidConfig(format!("ordinal variant needs bins >= 2, got {}", hyper.bins)));
    }
    let m_top = hyper.bins - 1;
    let d = train.covariate_dim();

    // Rows for the ordinal response: bin index of the observed peer fraction.
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(train.household_count());
    let mut bins_obs: Vec<usize> = Vec::with_capacity(features.capacity());
    // Rows for the ego-treatment conditional model.
    let mut ego_rows: Vec<Vec<f64>> = Vec::with_capacity(features.capacity());
    let mut ego_y: Vec<f64> = Vec::with_capacity(features.capacity());
    let mut group: Vec<usize> = Vec::with_capacity(features.capacity());

    for (ci, cluster) in train.clusters().iter().enumerate() {
        for j in 0..cluster.n() {
            let uc = unify_covariates(cluster, j);
            let mut raw = Vec::with_capacity(3 * d);
            raw.extend_from_slice(&uc.ego);
            raw.extend_from_slice(&uc.peer_max);
            raw.extend_from_slice(&uc.peer_min);
            features.push(raw);
            let abar = cluster.peer_treated_frac(j);
            bins_obs.push((abar * m_top as f64).round() as usize);

            let base = unified_base_features(&uc);
            let mut ef = Vec::with_capacity(1 + base.len());
            ef.push(abar);
            ef.extend_from_slice(&base);
            ego_rows.push(ef);
            ego_y.push(cluster.households[j].a as f64);
            group.push(ci);
        }
    }

    let scaler = crate::util::Standardizer::fit(&features);
    let z: Vec<Vec<f64>> = features.iter().map(|f| scaler.apply(f)).collect();
    let (thresholds, slopes) = ordinal_mle(&z, &bins_obs, hyper.bins)?;

    let ego_model =
        fit_logistic_cv(&ego_rows, &ego_y, &group, &hyper.ridge_grid, hyper.cv_folds, hyper.seed)?;

    Ok(EModel::Ordinal(OrdinalPropensity {
        thresholds,
        beta_ego: slopes[..d].to_vec(),
        beta_peer: slopes[d..].to_vec(),
        feature_scaler: scaler,
        ego_model,
        bins: hyper.bins,
        floor: hyper.floor,
    }))
}

/// Maximum likelihood for the cumulative-logit model by damped Newton.
/// Returns (thresholds for bins 0..top-1, slopes); thresholds are projected
/// to non-decreasing order if the unconstrained optimum violates it.
fn ordinal_mle(z: &[Vec<f64>], bins_obs: &[usize], bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = z.len();
    let d = z[0].len();
    let m_free = bins - 1;
    let dim = m_free + d;
    const SLOPE_RIDGE: f64 = 1e-6;

    // Initialize thresholds at the empirical cumulative logits.
    let mut counts = vec![0usize; bins];
    for &b in bins_obs {
        if b >= bins {
            return Err(Error::InvalidData(format!("bin index {b} out of range")));
        }
        counts[b] += 1;
    }
    let mut theta = DVector::zeros(dim);
    let mut cum = 0.0;
    for t in 0..m_free {
        cum += counts[t] as f64;
        let frac = ((cum + 0.5) / (n as f64 + 1.0)).clamp(1e-6, 1.0 - 1e-6);
        theta[t] = crate::util::logit(frac);
    }

    let nll = |theta: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for (zi, &b) in z.iter().zip(bins_obs) {
            let eta: f64 = zi.iter().enumerate().map(|(k, v)| theta[m_free + k] * v).sum();
            let upper = if b + 1 == bins { 1.0 } else { expit(theta[b] + eta) };
            let lower = if b == 0 { 0.0 } else { expit(theta[b - 1] + eta) };
            total -= (upper - lower).max(1e-12).ln();
        }
        for k in 0..d {
            total += 0.5 * SLOPE_RIDGE * theta[m_free + k] * theta[m_free + k];
        }
        total
    };

    let mut obj = nll(&theta);
    let mut converged = false;
    let mut grad_norm = f64::NAN;
    for _ in 0..200 {
        let mut grad = DVector::zeros(dim);
        let mut hess: DMatrix<f64> = DMatrix::zeros(dim, dim);
        for (zi, &b) in z.iter().zip(bins_obs) {
            let eta: f64 = zi.iter().enumerate().map(|(k, v)| theta[m_free + k] * v).sum();
            let (fu, has_u) = if b + 1 == bins { (1.0, false) } else { (expit(theta[b] + eta), true) };
            let (fl, has_l) = if b == 0 { (0.0, false) } else { (expit(theta[b - 1] + eta), true) };
            let p = (fu - fl).max(1e-12);
            let du = if has_u { fu * (1.0 - fu) } else { 0.0 };
            let dl = if has_l { fl * (1.0 - fl) } else { 0.0 };
            let ddu = if has_u { du * (1.0 - 2.0 * fu) } else { 0.0 };
            let ddl = if has_l { dl * (1.0 - 2.0 * fl) } else { 0.0 };

            // Active coordinates: threshold b (upper), threshold b-1 (lower),
            // and the slope block. g_vec = d p / d theta on those coords.
            let mut active: Vec<(usize, f64, f64)> = Vec::with_capacity(2 + d);
            if has_u {
                active.push((b, du, ddu));
            }
            if has_l {
                active.push((b - 1, -dl, -ddl));
            }
            // The slope coordinate shares both cumulative terms.
            // dp/dslope_k = (du - dl) z_k ; d2p = (ddu - ddl) z_k z_l
            for (idx, g1, g2) in &active {
                grad[*idx] -= g1 / p;
                for (idx2, h1, _) in &active {
                    hess[(*idx, *idx2)] += (g1 * h1) / (p * p);
                }
                hess[(*idx, *idx)] -= g2 / p;
                for k in 0..d {
                    let gz = (du - dl) * zi[k];
                    hess[(*idx, m_free + k)] += (g1 * gz) / (p * p) - (g2 * zi[k]) / p;
                    hess[(m_free + k, *idx)] = hess[(*idx, m_free + k)];
                }
            }
            let gs = du - dl;
            let gss = ddu - ddl;
            for k in 0..d {
                grad[m_free + k] -= gs * zi[k] / p;
                for l in k..d {
                    hess[(m_free + k, m_free + l)] +=
                        (gs * zi[k] * gs * zi[l]) / (p * p) - (gss * zi[k] * zi[l]) / p;
                }
            }
        }
        for k in 0..d {
            grad[m_free + k] += SLOPE_RIDGE * theta[m_free + k];
            for l in 0..k {
                hess[(m_free + k, m_free + l)] = hess[(m_free + l, m_free + k)];
            }
            hess[(m_free + k, m_free + k)] += SLOPE_RIDGE;
        }

        grad_norm = grad.amax();
        if grad_norm < 1e-6 {
            converged = true;
            break;
        }

        // Damped Newton step.
        let mut tau = 0.0;
        let delta = loop {
            let mut h = hess.clone();
            if tau > 0.0 {
                for i in 0..dim {
                    h[(i, i)] += tau;
                }
            }
            if let Some(ch) = h.cholesky() {
                let delta = ch.solve(&(-&grad));
                if delta.dot(&grad) < 0.0 {
                    break delta;
                }
            }
            tau = if tau == 0.0 { 1e-6 } else { tau * 10.0 };
            if tau > 1e12 {
                break -&grad;
            }
        };

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &theta + &delta * step;
            let cand_obj = nll(&cand);
            if cand_obj <= obj - 1e-12 * step {
                theta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent left; treat the current point as stationary.
            converged = grad_norm < 1e-3;
            break;
        }
    }

    if !converged {
        return Err(Error::NonConvergence { iterations: 200, grad_norm });
    }

    let mut thresholds: Vec<f64> = (0..m_free).map(|t| theta[t]).collect();
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        log::warn!("ordinal thresholds violated monotonicity; projecting");
        isotonic_in_place(&mut thresholds);
    }
    let slopes: Vec<f64> = (0..d).map(|k| theta[m_free + k]).collect();
    Ok((thresholds, slopes))
}

/// Pool-adjacent-violators projection to a non-decreasing sequence.
fn isotonic_in_place(v: &mut [f64]) {
    let n = v.len();
    let mut level: Vec<f64> = v.to_vec();
    let mut weight: Vec<f64> = vec![1.0; n];
    let mut len = 0usize;
    for i in 0..n {
        level[len] = v[i];
        weight[len] = 1.0;
        len += 1;
        while len > 1 && level[len - 2] > level[len - 1] {
            let w = weight[len - 2] + weight[len - 1];
            level[len - 2] = (level[len - 2] * weight[len - 2] + level[len - 1] * weight[len - 1]) / w;
            weight[len - 2] = w;
            len -= 1;
        }
    }
    let mut idx = 0;
    for b in 0..len {
        for _ in 0..weight[b] as usize {
            v[idx] = level[b];
            idx += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Household;
    use crate::simulation::{simulate, SimConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn poisson_binomial_matches_enumeration() {
        let probs = [0.1, 0.37, 0.62, 0.9, 0.25, 0.5];
        for n in 1..=6usize {
            let p = &probs[..n];
            let pmf = poisson_binomial_pmf(p);
            for s in 0..=n {
                let mut oracle = 0.0;
                for mask in 0..(1usize << n) {
                    if mask.count_ones() as usize != s {
                        continue;
                    }
                    let mut w = 1.0;
                    for (k, &pk) in p.iter().enumerate() {
                        w *= if (mask >> k) & 1 == 1 { pk } else { 1.0 - pk };
                    }
                    oracle += w;
                }
                assert_abs_diff_eq!(pmf[s], oracle, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_half_probs_reduce_to_binomial() {
        // e(a=1, s=1 | .) with three households of individual propensity 1/2:
        // 0.5 * C(2,1) * 0.5^2 = 0.25.
        let pmf = poisson_binomial_pmf(&[0.5, 0.5]);
        assert_abs_diff_eq!(0.5 * pmf[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn product_cells_sum_to_one() {
        let data = simulate(&SimConfig { n_clusters: 60, ..Default::default() }, 3).unwrap();
        let m = fit_propensity(&data, EVariant::Product, &EHyper::default()).unwrap();
        for cluster in data.clusters().iter().take(15) {
            for j in 0..cluster.n() {
                let total: f64 = (0..2u8)
                    .flat_map(|a| (0..cluster.n()).map(move |s| (a, s)))
                    .map(|(a, s)| m.cell_prob_unfloored(a, s, cluster, j))
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ordinal_cells_sum_to_one_and_respect_floor() {
        let data = simulate(&SimConfig { n_clusters: 120, ..Default::default() }, 4).unwrap();
        let m = fit_propensity(&data, EVariant::Ordinal, &EHyper::default()).unwrap();
        for cluster in data.clusters().iter().take(15) {
            for j in 0..cluster.n() {
                let total: f64 = (0..2u8)
                    .flat_map(|a| (0..cluster.n()).map(move |s| (a, s)))
                    .map(|(a, s)| m.cell_prob_unfloored(a, s, cluster, j))
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
                for a in 0..2u8 {
                    for s in 0..cluster.n() {
                        assert!(m.e(a, s, cluster, j) >= 0.01);
                    }
                }
            }
        }
    }

    #[test]
    fn ordinal_thresholds_monotone() {
        let data = simulate(&SimConfig { n_clusters: 150, ..Default::default() }, 5).unwrap();
        let m = fit_propensity(&data, EVariant::Ordinal, &EHyper::default()).unwrap();
        if let EModel::Ordinal(o) = m {
            assert!(o.thresholds.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(o.thresholds.len(), o.bins - 1);
        } else {
            panic!("expected ordinal model");
        }
    }

    #[test]
    fn product_recovers_known_propensity() {
        // Single covariate, a ~ Ber(expit(x)); check fitted probabilities.
        let mut clusters = Vec::new();
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(8);
        use rand::Rng;
        for i in 0..400 {
            let hh: Vec<Household> = (0..3)
                .map(|_| {
                    let x: f64 = rng.random_range(-2.0..2.0);
                    let a = u8::from(rng.random::<f64>() < expit(x));
                    Household { y: 0, a, x: vec![x] }
                })
                .collect();
            clusters.push(ClusterData::new(format!("k{i}"), hh).unwrap());
        }
        let data = Dataset::new(clusters).unwrap();
        let m = fit_propensity(&data, EVariant::Product, &EHyper::default()).unwrap();
        if let EModel::Product(p) = &m {
            for x in [-1.5, 0.0, 1.5] {
                assert_abs_diff_eq!(p.individual.predict(&[x]), expit(x), epsilon = 0.08);
            }
        } else {
            panic!("expected product model");
        }
    }

    #[test]
    fn isotonic_projection_pools_violators() {
        let mut v = vec![1.0, 3.0, 2.0, 4.0];
        isotonic_in_place(&mut v);
        assert_eq!(v, vec![1.0, 2.5, 2.5, 4.0]);
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn deterministic_given_seed() {
        let data = simulate(&SimConfig { n_clusters: 50, ..Default::default() }, 6).unwrap();
        let a = fit_propensity(&data, EVariant::Ordinal, &EHyper::default()).unwrap();
        let b = fit_propensity(&data, EVariant::Ordinal, &EHyper::default()).unwrap();
        assert_eq!(a, b);
    }
}
