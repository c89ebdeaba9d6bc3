//! Prediction contracts for the two nuisance functions.
//!
//! An outcome model mu(a, abar_peer, x_j, x_peers) predicts the success
//! probability of household j given its own treatment and the treated
//! fraction among its peers. A propensity model e(a, s | cluster, j) gives
//! the joint probability that household j has treatment `a` while exactly
//! `s` of its peers are treated. Both are queried against a concrete
//! cluster so implementations can derive whatever covariate views they need.

use crate::data::ClusterData;

/// Outcome-regression contract: predictions must lie in [0, 1].
pub trait OutcomeModel: Sync {
    fn mu(&self, a: u8, peer_frac: f64, cluster: &ClusterData, j: usize) -> f64;
}

impl<F> OutcomeModel for F
where
    F: Fn(u8, f64, &ClusterData, usize) -> f64 + Sync,
{
    fn mu(&self, a: u8, peer_frac: f64, cluster: &ClusterData, j: usize) -> f64 {
        self(a, peer_frac, cluster, j)
    }
}

/// Propensity contract: returns P(A_j = a, S_peers = s | cluster covariates),
/// already floored away from zero by the implementation.
pub trait PropensityModel: Sync {
    fn e(&self, a: u8, s: usize, cluster: &ClusterData, j: usize) -> f64;
}

impl<F> PropensityModel for F
where
    F: Fn(u8, usize, &ClusterData, usize) -> f64 + Sync,
{
    fn e(&self, a: u8, s: usize, cluster: &ClusterData, j: usize) -> f64 {
        self(a, s, cluster, j)
    }
}
