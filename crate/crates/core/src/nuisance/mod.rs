//! Nuisance estimation: the outcome regression and the joint propensity,
//! plus the covariate-dimension unification and undersampling machinery
//! they share.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset};
use crate::error::Result;
use crate::models::{OutcomeModel, PropensityModel};
use crate::util::{derive_seed, median};

pub mod logistic;
mod mu;
mod propensity;

pub use logistic::PenalizedLogistic;
pub use mu::{fit_outcome_regression, KernelMu, LogisticMu, MuFamily, MuHyper, MuModel};
pub use propensity::{
    fit_propensity, poisson_binomial_pmf, EHyper, EModel, EVariant, OrdinalPropensity,
    ProductPropensity,
};

/// Fixed-width covariate view of one household: its own covariates plus the
/// componentwise extremes over its peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedCovariates {
    pub ego: Vec<f64>,
    pub peer_max: Vec<f64>,
    pub peer_min: Vec<f64>,
    pub has_peers: bool,
    pub n: usize,
}

/// Builds the unified view for household `j`. Peerless households get zero
/// peer summaries with the presence flag off.
pub fn unify_covariates(cluster: &ClusterData, j: usize) -> UnifiedCovariates {
    let d = cluster.covariate_dim();
    let n = cluster.n();
    let ego = cluster.households[j].x.clone();
    if n == 1 {
        return UnifiedCovariates {
            ego,
            peer_max: vec![0.0; d],
            peer_min: vec![0.0; d],
            has_peers: false,
            n,
        };
    }
    let mut peer_max = vec![f64::NEG_INFINITY; d];
    let mut peer_min = vec![f64::INFINITY; d];
    for (l, h) in cluster.households.iter().enumerate() {
        if l == j {
            continue;
        }
        for k in 0..d {
            peer_max[k] = peer_max[k].max(h.x[k]);
            peer_min[k] = peer_min[k].min(h.x[k]);
        }
    }
    UnifiedCovariates { ego, peer_max, peer_min, has_peers: true, n }
}

/// Flat regressor block shared by the nuisance models:
/// [ego, peer_max, peer_min, has_peers, n].
pub fn unified_base_features(uc: &UnifiedCovariates) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 * uc.ego.len() + 2);
    f.extend_from_slice(&uc.ego);
    f.extend_from_slice(&uc.peer_max);
    f.extend_from_slice(&uc.peer_min);
    f.push(f64::from(uc.has_peers));
    f.push(uc.n as f64);
    f
}

/// Randomly thins each cluster to the dataset's median size so outlying
/// large clusters cannot dominate the nuisance fits. Household order within
/// a cluster is preserved; the result is a deterministic function of `seed`.
pub fn undersample(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let sizes: Vec<f64> = dataset.clusters().iter().map(|c| c.n() as f64).collect();
    let target = median(&sizes).floor() as usize;
    let target = target.max(1);
    let clusters = dataset
        .clusters()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.n() <= target {
                return c.clone();
            }
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "undersample", i as u64));
            let mut keep: Vec<usize> = sample(&mut rng, c.n(), target).into_vec();
            keep.sort_unstable();
            let households = keep.iter().map(|&j| c.households[j].clone()).collect();
            ClusterData::new(c.cluster_id.clone(), households).expect("thinned cluster is valid")
        })
        .collect();
    Dataset::new(clusters)
}

/// Predicts with the pointwise median over component fits, the aggregation
/// used across undersampling rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianOf<T>(pub Vec<T>);

impl<T: OutcomeModel> OutcomeModel for MedianOf<T> {
    fn mu(&self, a: u8, peer_frac: f64, cluster: &ClusterData, j: usize) -> f64 {
        let preds: Vec<f64> = self.0.iter().map(|m| m.mu(a, peer_frac, cluster, j)).collect();
        median(&preds)
    }
}

impl<T: PropensityModel> PropensityModel for MedianOf<T> {
    fn e(&self, a: u8, s: usize, cluster: &ClusterData, j: usize) -> f64 {
        let preds: Vec<f64> = self.0.iter().map(|m| m.e(a, s, cluster, j)).collect();
        median(&preds)
    }
}
