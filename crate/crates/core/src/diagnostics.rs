//! Assumption checks on fitted nuisances: covariate balance across joint
//! treatment bins, propensity overlap, monotonicity of the fitted response
//! in treatment, and residual trends.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{OutcomeModel, PropensityModel};
use crate::util::median;

/// The four joint-treatment bins: own treatment level crossed with the peer
/// treated-fraction split at a within-level median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinDefinition {
    /// Peer-fraction cut for untreated units (groups 1 vs 2).
    pub alpha0: f64,
    /// Peer-fraction cut for treated units (groups 3 vs 4).
    pub alpha1: f64,
}

impl BinDefinition {
    /// Group index in 0..4 of a unit with own treatment `a` and peer
    /// fraction `abar`.
    pub fn group(&self, a: u8, abar: f64) -> usize {
        match (a, abar) {
            (0, v) if v <= self.alpha0 => 0,
            (0, _) => 1,
            (_, v) if v <= self.alpha1 => 2,
            _ => 3,
        }
    }
}

/// Balance t-statistics for one group and one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: usize,
    pub unadjusted_t: f64,
    /// Propensity-decile-stratified, size-weighted t-statistic.
    pub adjusted_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub bins: BinDefinition,
    /// Indexed by group 0..4, then covariate.
    pub groups: Vec<Vec<CovariateBalance>>,
}

/// Welch two-sample t-statistic; zero when both samples are degenerate.
fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 || b.len() < 2 {
        return f64::NAN;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    let se2 = var(a, ma) / a.len() as f64 + var(b, mb) / b.len() as f64;
    if se2 <= 0.0 {
        return 0.0;
    }
    (ma - mb) / se2.sqrt()
}

/// Unit handle: cluster index, household index.
type Unit = (usize, usize);

fn unit_list(dataset: &Dataset) -> Vec<Unit> {
    dataset
        .clusters()
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.n()).map(move |j| (i, j)))
        .collect()
}

fn bin_definition(dataset: &Dataset) -> BinDefinition {
    let mut abar0 = Vec::new();
    let mut abar1 = Vec::new();
    for c in dataset.clusters() {
        for j in 0..c.n() {
            let abar = c.peer_treated_frac(j);
            if c.households[j].a == 0 {
                abar0.push(abar);
            } else {
                abar1.push(abar);
            }
        }
    }
    BinDefinition {
        alpha0: if abar0.is_empty() { 0.5 } else { median(&abar0) },
        alpha1: if abar1.is_empty() { 0.5 } else { median(&abar1) },
    }
}

/// P(unit's (A, Abar) lands in group k | covariates) under the fitted
/// propensity: the sum of cell probabilities over the group's (a, s) cells.
fn group_propensity(
    dataset: &Dataset,
    e: &dyn PropensityModel,
    bins: &BinDefinition,
    unit: Unit,
    k: usize,
) -> f64 {
    let c = &dataset.clusters()[unit.0];
    let n = c.n();
    let mut total = 0.0;
    for s in 0..n {
        let abar = if n == 1 { 0.0 } else { s as f64 / (n - 1) as f64 };
        for a in 0..2u8 {
            if bins.group(a, abar) == k {
                total += e.e(a, s, c, unit.1);
            }
        }
    }
    total.min(1.0)
}

/// Covariate balance across the four joint-treatment groups, unadjusted and
/// within propensity deciles (size-weighted).
pub fn balance_diagnostic(dataset: &Dataset, e: &dyn PropensityModel) -> Result<BalanceReport> {
    let d = dataset.covariate_dim();
    let units = unit_list(dataset);
    let bins = bin_definition(dataset);
    let group_of: Vec<usize> = units
        .iter()
        .map(|&(i, j)| {
            let c = &dataset.clusters()[i];
            bins.group(c.households[j].a, c.peer_treated_frac(j))
        })
        .collect();

    let mut groups = Vec::with_capacity(4);
    for k in 0..4 {
        let in_k: Vec<bool> = group_of.iter().map(|&g| g == k).collect();
        if !in_k.iter().any(|&b| b) {
            log::warn!("group {k} is empty; reporting NaN balance statistics");
            groups.push(
                (0..d)
                    .map(|cov| CovariateBalance {
                        covariate: cov,
                        unadjusted_t: f64::NAN,
                        adjusted_t: f64::NAN,
                    })
                    .collect(),
            );
            continue;
        }

        let e_k: Vec<f64> =
            units.iter().map(|&u| group_propensity(dataset, e, &bins, u, k)).collect();
        // Deciles of the group's propensities define the strata.
        let mut in_group_e: Vec<f64> = units
            .iter()
            .enumerate()
            .filter(|(idx, _)| in_k[*idx])
            .map(|(idx, _)| e_k[idx])
            .collect();
        in_group_e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let decile = |q: usize| -> f64 {
            let pos = (q as f64 / 10.0 * (in_group_e.len() - 1) as f64).round() as usize;
            in_group_e[pos]
        };
        let cuts: Vec<f64> = (1..10).map(decile).collect();
        let stratum_of = |v: f64| -> usize { cuts.iter().filter(|&&c| v > c).count() };

        let mut per_cov = Vec::with_capacity(d);
        for cov in 0..d {
            let side_a: Vec<f64> = {
                let mut sums = vec![(0.0, 0usize); dataset.len()];
                for (idx, &(i, j)) in units.iter().enumerate() {
                    if in_k[idx] {
                        sums[i].0 += dataset.clusters()[i].households[j].x[cov];
                        sums[i].1 += 1;
                    }
                }
                sums.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
            };
            let side_b: Vec<f64> = {
                let mut sums = vec![(0.0, 0usize); dataset.len()];
                for (idx, &(i, j)) in units.iter().enumerate() {
                    if !in_k[idx] {
                        sums[i].0 += dataset.clusters()[i].households[j].x[cov];
                        sums[i].1 += 1;
                    }
                }
                sums.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
            };
            let unadjusted = welch_t(&side_a, &side_b);

            // Decile-stratified t statistics, weighted by stratum size.
            let mut weighted = 0.0;
            let mut weight_total = 0.0;
            for b in 0..10usize {
                let mut sums_a = vec![(0.0, 0usize); dataset.len()];
                let mut sums_b = vec![(0.0, 0usize); dataset.len()];
                let mut stratum_units = 0usize;
                for (idx, &(i, j)) in units.iter().enumerate() {
                    if stratum_of(e_k[idx]) != b {
                        continue;
                    }
                    stratum_units += 1;
                    let x = dataset.clusters()[i].households[j].x[cov];
                    if in_k[idx] {
                        sums_a[i].0 += x;
                        sums_a[i].1 += 1;
                    } else {
                        sums_b[i].0 += x;
                        sums_b[i].1 += 1;
                    }
                }
                let va: Vec<f64> = sums_a
                    .into_iter()
                    .filter(|(_, n)| *n > 0)
                    .map(|(s, n)| s / n as f64)
                    .collect();
                let vb: Vec<f64> = sums_b
                    .into_iter()
                    .filter(|(_, n)| *n > 0)
                    .map(|(s, n)| s / n as f64)
                    .collect();
                if va.len() < 2 || vb.len() < 2 {
                    log::warn!("group {k} covariate {cov}: decile {b} skipped (too few units)");
                    continue;
                }
                let t = welch_t(&va, &vb);
                if t.is_finite() {
                    weighted += stratum_units as f64 * t;
                    weight_total += stratum_units as f64;
                }
            }
            let adjusted = if weight_total > 0.0 { weighted / weight_total } else { f64::NAN };
            per_cov.push(CovariateBalance { covariate: cov, unadjusted_t: unadjusted, adjusted_t: adjusted });
        }
        groups.push(per_cov);
    }
    Ok(BalanceReport { bins, groups })
}

/// Histogram data of fitted group propensities for units inside and outside
/// each joint-treatment group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapGroup {
    pub group: usize,
    pub in_counts: Vec<usize>,
    pub out_counts: Vec<usize>,
    pub in_range: (f64, f64),
    pub out_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub bins: BinDefinition,
    pub n_bars: usize,
    pub groups: Vec<OverlapGroup>,
}

pub fn overlap_diagnostic(
    dataset: &Dataset,
    e: &dyn PropensityModel,
    n_bars: usize,
) -> Result<OverlapReport> {
    if n_bars == 0 {
        return Err(Error::InvalidConfig("need at least one histogram bar".into()));
    }
    let units = unit_list(dataset);
    let bins = bin_definition(dataset);
    let mut groups = Vec::with_capacity(4);
    for k in 0..4 {
        let mut in_counts = vec![0usize; n_bars];
        let mut out_counts = vec![0usize; n_bars];
        let mut in_range = (f64::INFINITY, f64::NEG_INFINITY);
        let mut out_range = (f64::INFINITY, f64::NEG_INFINITY);
        for &u in &units {
            let c = &dataset.clusters()[u.0];
            let member =
                bins.group(c.households[u.1].a, c.peer_treated_frac(u.1)) == k;
            let p = group_propensity(dataset, e, &bins, u, k);
            let bar = ((p * n_bars as f64) as usize).min(n_bars - 1);
            if member {
                in_counts[bar] += 1;
                in_range = (in_range.0.min(p), in_range.1.max(p));
            } else {
                out_counts[bar] += 1;
                out_range = (out_range.0.min(p), out_range.1.max(p));
            }
        }
        groups.push(OverlapGroup { group: k, in_counts, out_counts, in_range, out_range });
    }
    Ok(OverlapReport { bins, n_bars, groups })
}

/// Monotonicity assessment of a fitted outcome regression: counts of
/// decreasing adjacent variations of the cluster-mean response among the
/// 3n - 2 finest moves per cluster, and their share of the total variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub total_variations: usize,
    pub violation_count: usize,
    pub violation_fraction: f64,
    /// Sum of |V| over decreasing variations divided by the sum over all.
    pub relative_decreasing_magnitude: f64,
}

/// Tolerance separating numerical noise from genuine decreases.
const MONOTONICITY_TOL: f64 = 1e-10;

pub fn monotonicity_diagnostic(
    dataset: &Dataset,
    mu: &dyn OutcomeModel,
) -> Result<MonotonicityReport> {
    let mut total = 0usize;
    let mut violations = 0usize;
    let mut tv = 0.0;
    let mut decreasing_tv = 0.0;
    for c in dataset.clusters() {
        let n = c.n();
        let mean_mu = |a: u8, s: usize| -> f64 {
            let pf = if n == 1 { 0.0 } else { s as f64 / (n - 1) as f64 };
            (0..n).map(|j| mu.mu(a, pf, c, j)).sum::<f64>() / n as f64
        };
        let mut push = |v: f64| {
            total += 1;
            tv += v.abs();
            if v < -MONOTONICITY_TOL {
                violations += 1;
                decreasing_tv += v.abs();
            }
        };
        for a in 0..2u8 {
            for s in 0..n.saturating_sub(1) {
                push(mean_mu(a, s + 1) - mean_mu(a, s));
            }
        }
        for s in 0..n {
            push(mean_mu(1, s) - mean_mu(0, s));
        }
    }
    let expected: usize = dataset.clusters().iter().map(|c| 3 * c.n() - 2).sum();
    debug_assert_eq!(total, expected);
    Ok(MonotonicityReport {
        total_variations: total,
        violation_count: violations,
        violation_fraction: violations as f64 / total as f64,
        relative_decreasing_magnitude: if tv > 0.0 { decreasing_tv / tv } else { 0.0 },
    })
}

/// Mean residuals in equal-count bins of one regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCurve {
    pub regressor: String,
    pub bin_centers: Vec<f64>,
    pub mean_residuals: Vec<f64>,
    pub bin_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub curves: Vec<ResidualCurve>,
}

/// Residuals y - mu(observed cell) binned against the fitted values and
/// each regressor (own treatment, peer fraction, own covariates, peer-mean
/// covariates).
pub fn residual_diagnostic(
    dataset: &Dataset,
    mu: &dyn OutcomeModel,
    n_bins: usize,
) -> Result<ResidualReport> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("need at least one residual bin".into()));
    }
    let d = dataset.covariate_dim();
    let mut fitted = Vec::new();
    let mut resid = Vec::new();
    let mut regressors: Vec<(String, Vec<f64>)> = Vec::new();
    let mut a_vals = Vec::new();
    let mut abar_vals = Vec::new();
    let mut x_vals: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut peer_vals: Vec<Vec<f64>> = vec![Vec::new(); d];

    for c in dataset.clusters() {
        for j in 0..c.n() {
            let h = &c.households[j];
            let pf = c.peer_treated_frac(j);
            let m = mu.mu(h.a, pf, c, j);
            fitted.push(m);
            resid.push(h.y as f64 - m);
            a_vals.push(h.a as f64);
            abar_vals.push(pf);
            for k in 0..d {
                x_vals[k].push(h.x[k]);
                peer_vals[k].push(c.peer_mean_x(j, k));
            }
        }
    }
    regressors.push(("fitted".into(), fitted));
    regressors.push(("a".into(), a_vals));
    regressors.push(("abar_peer".into(), abar_vals));
    for (k, v) in x_vals.into_iter().enumerate() {
        regressors.push((format!("x{}", k + 1), v));
    }
    for (k, v) in peer_vals.into_iter().enumerate() {
        regressors.push((format!("peer_mean_x{}", k + 1), v));
    }

    let curves = regressors
        .into_iter()
        .map(|(name, values)| {
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
            let n = order.len();
            let bins = n_bins.min(n);
            let mut centers = Vec::with_capacity(bins);
            let mut means = Vec::with_capacity(bins);
            let mut counts = Vec::with_capacity(bins);
            for b in 0..bins {
                let lo = b * n / bins;
                let hi = (b + 1) * n / bins;
                let idx = &order[lo..hi];
                let c = idx.len();
                centers.push(idx.iter().map(|&i| values[i]).sum::<f64>() / c as f64);
                means.push(idx.iter().map(|&i| resid[i]).sum::<f64>() / c as f64);
                counts.push(c);
            }
            ResidualCurve { regressor: name, bin_centers: centers, mean_residuals: means, bin_counts: counts }
        })
        .collect();
    Ok(ResidualReport { curves })
}
