//! Expected-outcome surfaces under Bernoulli(alpha) allocation policies and
//! the minimal allocation fractions derived from them.
//!
//! For a cluster of size n, the overall surface at policy rate alpha is
//!
//! ```text
//! (1/n) sum_{j,a,s} C(n-1,s) mu(a, s/(n-1), x_j, x_peers) alpha^(a+s) (1-alpha)^(n-a-s)
//! ```
//!
//! and the spillover surface is the a = 0 slice with peer-only weights. The
//! minimal allocation fraction for target T is the smallest grid alpha whose
//! surface value reaches T, or 1 when no alpha qualifies.

use serde::{Deserialize, Serialize};

use crate::data::ClusterData;
use crate::error::{Error, Result};
use crate::models::OutcomeModel;
use crate::util::{binom_pmf, pow0};

/// Which potential-outcome surface a computation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    /// Expected cluster-mean outcome when every household is treated with
    /// probability alpha (ego treatment included).
    Overall,
    /// Expected outcome of an untreated ego whose peers are treated with
    /// probability alpha.
    Spillover,
}

/// Outcome target in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target(f64);

impl Target {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("target {tau} outside [0,1]")));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A uniform grid over [0, 1]. `grid_step` is rounded to the nearest 1/k so
/// both endpoints are exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    steps: usize,
}

impl Grid {
    pub fn from_step(grid_step: f64) -> Result<Self> {
        if !(grid_step > 0.0 && grid_step <= 1.0) {
            return Err(Error::InvalidConfig(format!("grid step {grid_step} outside (0,1]")));
        }
        let steps = (1.0 / grid_step).round() as usize;
        if steps == 0 {
            return Err(Error::InvalidConfig(format!("grid step {grid_step} too coarse")));
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alpha(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn step(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.alpha(i))
    }
}

/// Expected-outcome values tabulated on a [`Grid`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeSurface {
    grid: Grid,
    values: Vec<f64>,
}

impl OutcomeSurface {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Probability that the policy Bernoulli(alpha) realizes the treatment
/// vector `a_vec`, with the 0^0 = 1 convention at the endpoints.
pub fn policy_weight(a_vec: &[u8], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0,1]")));
    }
    let mut treated = 0i32;
    for (j, &a) in a_vec.iter().enumerate() {
        if a > 1 {
            return Err(Error::InvalidData(format!("treatment vector entry {j} is {a}, not 0/1")));
        }
        treated += i32::from(a);
    }
    let untreated = a_vec.len() as i32 - treated;
    Ok(pow0(alpha, treated) * pow0(1.0 - alpha, untreated))
}

/// Per-cluster mean of mu over households, tabulated at every (a, s) cell.
/// `cells[a][s]` = (1/n) sum_j mu(a, s/(n-1), x_j, x_peers).
pub(crate) fn mean_mu_cells(
    mu: &dyn OutcomeModel,
    cluster: &ClusterData,
) -> Result<[Vec<f64>; 2]> {
    let n = cluster.n();
    let mut cells = [vec![0.0; n], vec![0.0; n]];
    for a in 0..2u8 {
        for s in 0..n {
            let peer_frac = if n == 1 { 0.0 } else { s as f64 / (n - 1) as f64 };
            let mut acc = 0.0;
            for j in 0..n {
                let v = mu.mu(a, peer_frac, cluster, j);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "mu(a={a}, s={s}) for cluster {} household {j}",
                        cluster.cluster_id
                    )));
                }
                acc += v;
            }
            cells[a as usize][s] = acc / n as f64;
        }
    }
    Ok(cells)
}

/// Evaluates one surface point from precomputed mean-mu cells.
pub(crate) fn surface_point(cells: &[Vec<f64>; 2], n: usize, estimand: Estimand, alpha: f64) -> f64 {
    let mut total = 0.0;
    match estimand {
        Estimand::Overall => {
            for a in 0..2usize {
                let ego_w = pow0(alpha, a as i32) * pow0(1.0 - alpha, 1 - a as i32);
                for s in 0..n {
                    total += ego_w * binom_pmf(n - 1, s, alpha) * cells[a][s];
                }
            }
        }
        Estimand::Spillover => {
            for s in 0..n {
                total += binom_pmf(n - 1, s, alpha) * cells[0][s];
            }
        }
    }
    total
}

/// Tabulates the expected-outcome surface of `cluster` under `mu`.
///
/// The binomial-pmf weighted form is used rather than the expanded
/// alternating-sign polynomial; the weights at each alpha sum to one.
pub fn outcome_surface(
    mu: &dyn OutcomeModel,
    cluster: &ClusterData,
    estimand: Estimand,
    grid_step: f64,
) -> Result<OutcomeSurface> {
    let grid = Grid::from_step(grid_step)?;
    let cells = mean_mu_cells(mu, cluster)?;
    let n = cluster.n();
    let values = grid.iter().map(|alpha| surface_point(&cells, n, estimand, alpha)).collect();
    Ok(OutcomeSurface { grid, values })
}

/// Smallest grid alpha whose surface value reaches the target; 1 when the
/// target is unattainable on the grid.
pub fn omar_from_surface(surface: &OutcomeSurface, target: Target) -> f64 {
    for (i, v) in surface.values.iter().enumerate() {
        if *v >= target.value() {
            return surface.grid.alpha(i);
        }
    }
    1.0
}

/// Grid-search allocation rule read off a fitted outcome regression.
pub fn indirect_rule(
    mu: &dyn OutcomeModel,
    cluster: &ClusterData,
    target: Target,
    estimand: Estimand,
    grid_step: f64,
) -> Result<f64> {
    let surface = outcome_surface(mu, cluster, estimand, grid_step)?;
    Ok(omar_from_surface(&surface, target))
}
