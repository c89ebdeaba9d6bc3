//! Synthetic clustered data with known treatment and outcome mechanisms,
//! the matching ground-truth allocation oracle, and a worked demonstration
//! of the bias from fitting rules to block-aggregated data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset, Household};
use crate::error::{Error, Result};
use crate::estimands::{indirect_rule, Estimand, Grid, Target};
use crate::models::{OutcomeModel, PropensityModel};
use crate::nuisance::poisson_binomial_pmf;
use crate::util::{binom_pmf, derive_seed, expit};

/// Coefficients of the generating treatment and outcome models.
///
/// Treatment: A ~ Bernoulli(expit{t_scale (t_intercept + W1 + W2 + W3 + C)}).
/// Outcome:   Y ~ Bernoulli(expit of a linear predictor with a squared
/// ego-treatment interaction in (C + W1) and a squared peer-treatment
/// interaction in the peer means of W2 and W3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCoefficients {
    pub t_scale: f64,
    pub t_intercept: f64,
    pub y_intercept: f64,
    pub ego_base: f64,
    pub ego_het: f64,
    pub peer_base: f64,
    pub peer_het: f64,
    pub x_linear: f64,
    pub x_square: f64,
    pub x_peer: f64,
}

impl Default for SimCoefficients {
    fn default() -> Self {
        Self {
            t_scale: 0.25,
            t_intercept: -2.0,
            y_intercept: -0.35,
            ego_base: 0.1,
            ego_het: 0.25,
            peer_base: 0.05,
            peer_het: 0.15,
            x_linear: 0.1,
            x_square: 0.25,
            x_peer: 0.05,
        }
    }
}

impl SimCoefficients {
    /// Success probability for one household given its own treatment, the
    /// treated fraction among peers, its covariates (W1, W2, W3, C), and the
    /// peer means of (W1, W2, W3).
    pub fn mu(&self, a: u8, abar_peer: f64, ego: &[f64], peer_mean_w: &[f64]) -> f64 {
        let (w1, w2, w3, c) = (ego[0], ego[1], ego[2], ego[3]);
        let (pw1, pw2, pw3) = (peer_mean_w[0], peer_mean_w[1], peer_mean_w[2]);
        let ego_term = self.ego_base + self.ego_het * (c + w1) * (c + w1);
        let peer_term = self.peer_base + self.peer_het * (pw2 + pw3) * (pw2 + pw3);
        let lp = self.y_intercept
            + ego_term * a as f64
            + peer_term * abar_peer
            + self.x_linear * (c + w1 + w2 + w3)
            + self.x_square * (c * c + w1 * w1 + w2 * w2 + w3 * w3)
            + self.x_peer * (pw1 + pw2 + pw3);
        expit(lp)
    }

    /// Individual treatment probability given covariates (W1, W2, W3, C).
    pub fn propensity(&self, x: &[f64]) -> f64 {
        expit(self.t_scale * (self.t_intercept + x[0] + x[1] + x[2] + x[3]))
    }
}

/// Success probability under the default generating outcome model.
pub fn true_mu(a: u8, abar_peer: f64, ego: &[f64], peer_mean_w: &[f64]) -> f64 {
    SimCoefficients::default().mu(a, abar_peer, ego, peer_mean_w)
}

/// Configuration of the synthetic-data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_clusters: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub coefficients: SimCoefficients,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { n_clusters: 1000, size_min: 2, size_max: 5, coefficients: SimCoefficients::default() }
    }
}

/// Generates `config.n_clusters` clusters. Each cluster draws its own RNG
/// from (seed, cluster index), so generation parallelizes without changing
/// the result.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<Dataset> {
    if config.size_min < 1 || config.size_min > config.size_max {
        return Err(Error::InvalidConfig(format!(
            "cluster size range [{}, {}] invalid",
            config.size_min, config.size_max
        )));
    }
    let clusters: Vec<ClusterData> = (0..config.n_clusters)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "sim-cluster", i as u64));
            simulate_cluster(&config.coefficients, config.size_min, config.size_max, i, &mut rng)
        })
        .collect();
    Dataset::new(clusters)
}

fn simulate_cluster(
    coef: &SimCoefficients,
    size_min: usize,
    size_max: usize,
    index: usize,
    rng: &mut ChaCha12Rng,
) -> ClusterData {
    let n = rng.random_range(size_min..=size_max);
    let c: f64 = rng.sample(StandardNormal);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let w1: f64 = rng.sample(StandardNormal);
        let w2: f64 = rng.sample(StandardNormal);
        let w3: f64 = rng.sample(StandardNormal);
        xs.push(vec![w1, w2, w3, c]);
    }
    let a: Vec<u8> = xs
        .iter()
        .map(|x| u8::from(rng.random::<f64>() < coef.propensity(x)))
        .collect();
    let total_a: usize = a.iter().map(|&v| v as usize).sum();
    let mut households = Vec::with_capacity(n);
    for j in 0..n {
        let abar_peer = if n == 1 {
            0.0
        } else {
            (total_a - a[j] as usize) as f64 / (n - 1) as f64
        };
        let peer_means = peer_mean_w(&xs, j);
        let p = coef.mu(a[j], abar_peer, &xs[j], &peer_means);
        let y = u8::from(rng.random::<f64>() < p);
        households.push(Household { y, a: a[j], x: xs[j].clone() });
    }
    ClusterData::new(format!("c{index:06}"), households).expect("generated cluster is valid")
}

fn peer_mean_w(xs: &[Vec<f64>], j: usize) -> [f64; 3] {
    let n = xs.len();
    if n == 1 {
        return [0.0; 3];
    }
    let mut m = [0.0; 3];
    for (l, x) in xs.iter().enumerate() {
        if l != j {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += x[k];
            }
        }
    }
    for mk in &mut m {
        *mk /= (n - 1) as f64;
    }
    m
}

/// The generating outcome regression, usable wherever a fitted model is.
#[derive(Debug, Clone, Default)]
pub struct TrueOutcomeModel {
    pub coefficients: SimCoefficients,
}

impl OutcomeModel for TrueOutcomeModel {
    fn mu(&self, a: u8, peer_frac: f64, cluster: &ClusterData, j: usize) -> f64 {
        let peer_means = [
            cluster.peer_mean_x(j, 0),
            cluster.peer_mean_x(j, 1),
            cluster.peer_mean_x(j, 2),
        ];
        self.coefficients.mu(a, peer_frac, &cluster.households[j].x, &peer_means)
    }
}

/// The generating treatment mechanism composed into joint cell
/// probabilities, floored like a fitted propensity model.
#[derive(Debug, Clone)]
pub struct TruePropensityModel {
    pub coefficients: SimCoefficients,
    pub floor: f64,
}

impl Default for TruePropensityModel {
    fn default() -> Self {
        Self { coefficients: SimCoefficients::default(), floor: 0.01 }
    }
}

impl PropensityModel for TruePropensityModel {
    fn e(&self, a: u8, s: usize, cluster: &ClusterData, j: usize) -> f64 {
        let p_j = self.coefficients.propensity(&cluster.households[j].x);
        let peer_probs: Vec<f64> = cluster
            .households
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != j)
            .map(|(_, h)| self.coefficients.propensity(&h.x))
            .collect();
        let pmf = poisson_binomial_pmf(&peer_probs);
        let ego = if a == 1 { p_j } else { 1.0 - p_j };
        (ego * pmf[s]).max(self.floor)
    }
}

/// Ground-truth minimal allocation fraction for a simulated cluster.
pub fn true_omar_oracle(
    cluster: &ClusterData,
    target: Target,
    estimand: Estimand,
    grid_step: f64,
) -> Result<f64> {
    indirect_rule(&TrueOutcomeModel::default(), cluster, target, estimand, grid_step)
}

/// Configuration of the block-aggregation bias demonstration.
///
/// The household response is beta0 + beta1 a + beta2 ((abar_peer - q_a)_+)^p
/// with beta2 scaled so the response range over abar in [0, 1] is [beta0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDemoConfig {
    pub n: usize,
    pub q_a: Vec<f64>,
    pub p: Vec<u32>,
    pub beta0: f64,
    pub beta1: f64,
    pub target: f64,
    pub grid_step: f64,
}

impl Default for BiasDemoConfig {
    fn default() -> Self {
        Self {
            n: 10,
            q_a: vec![0.4, 0.6, 0.8],
            p: vec![1, 2, 5],
            beta0: 0.0,
            beta1: 0.0,
            target: 0.2,
            grid_step: 1e-3,
        }
    }
}

/// One (q_a, p) bias-demo result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDemoRecord {
    pub q_a: f64,
    pub p: u32,
    pub true_omar: f64,
    pub naive_omar: f64,
    /// naive_omar - true_omar
    pub difference: f64,
}

fn threshold_term(abar: f64, q_a: f64, p: u32) -> f64 {
    let z = (abar - q_a).max(0.0);
    z.powi(p as i32)
}

/// Compares the allocation fraction implied by the household-level response
/// with the one implied by the best-fit block-level response. The block
/// surface plugs the policy rate straight into the household nonlinearity,
/// which only aggregates correctly when the spillover term is linear.
pub fn bias_demo(config: &BiasDemoConfig) -> Result<Vec<BiasDemoRecord>> {
    if config.n < 2 {
        return Err(Error::InvalidConfig("bias demo needs cluster size >= 2".into()));
    }
    let target = Target::new(config.target)?;
    let grid = Grid::from_step(config.grid_step)?;
    let mut records = Vec::new();
    for &q_a in &config.q_a {
        if !(0.0..=1.0).contains(&q_a) {
            return Err(Error::InvalidConfig(format!("q_a {q_a} outside [0,1]")));
        }
        for &p in &config.p {
            if p == 0 {
                return Err(Error::InvalidConfig("p must be a positive integer".into()));
            }
            let span = (1.0 - q_a).powi(p as i32);
            let top = 1.0 - config.beta0 - config.beta1;
            if !(span > 0.0) || !(top > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "degenerate response range for q_a={q_a}, p={p}"
                )));
            }
            let beta2 = top / span;
            let n = config.n;

            // True policy surface: ego term is linear in alpha, spillover term
            // averages the threshold nonlinearity over Binomial(n-1, alpha).
            let true_surface = |alpha: f64| {
                let mut spill = 0.0;
                for s in 0..n {
                    let abar = s as f64 / (n - 1) as f64;
                    spill += binom_pmf(n - 1, s, alpha) * threshold_term(abar, q_a, p);
                }
                config.beta0 + config.beta1 * alpha + beta2 * spill
            };
            // Block-level surface: the nonlinearity evaluated at the block mean.
            let naive_surface =
                |alpha: f64| config.beta0 + config.beta1 * alpha + beta2 * threshold_term(alpha, q_a, p);

            let true_omar = first_crossing(&grid, true_surface, target.value());
            let naive_omar = first_crossing(&grid, naive_surface, target.value());
            records.push(BiasDemoRecord {
                q_a,
                p,
                true_omar,
                naive_omar,
                difference: naive_omar - true_omar,
            });
        }
    }
    Ok(records)
}

fn first_crossing(grid: &Grid, surface: impl Fn(f64) -> f64, target: f64) -> f64 {
    for alpha in grid.iter() {
        if surface(alpha) >= target {
            return alpha;
        }
    }
    1.0
}

/// Exact overall policy surface of a simulated cluster under the generating
/// model, exposed for pooled-surface computations.
pub fn true_surface_point(cluster: &ClusterData, estimand: Estimand, alpha: f64) -> f64 {
    let model = TrueOutcomeModel::default();
    let cells = crate::estimands::mean_mu_cells(&model, cluster).expect("true mu is finite");
    crate::estimands::surface_point(&cells, cluster.n(), estimand, alpha)
}
