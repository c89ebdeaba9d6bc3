//! Clustered observational data: binary outcomes and treatments with
//! household-level covariates, grouped by cluster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::MAX_CLUSTER_SIZE;

/// One household's record: binary outcome, binary treatment, covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Household {
    pub y: u8,
    pub a: u8,
    pub x: Vec<f64>,
}

/// One cluster of households.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub cluster_id: String,
    pub households: Vec<Household>,
}

impl ClusterData {
    pub fn new(cluster_id: impl Into<String>, households: Vec<Household>) -> Result<Self> {
        let cluster_id = cluster_id.into();
        if households.is_empty() {
            return Err(Error::InvalidData(format!("cluster {cluster_id} has no households")));
        }
        let d = households[0].x.len();
        for (j, h) in households.iter().enumerate() {
            if h.y > 1 || h.a > 1 {
                return Err(Error::InvalidData(format!(
                    "cluster {cluster_id} household {j}: y and a must be 0/1 (got y={}, a={})",
                    h.y, h.a
                )));
            }
            if h.x.len() != d {
                return Err(Error::InvalidData(format!(
                    "cluster {cluster_id} household {j}: covariate width {} != {d}",
                    h.x.len()
                )));
            }
            if h.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "cluster {cluster_id} household {j}: non-finite covariate"
                )));
            }
        }
        Ok(Self { cluster_id, households })
    }

    pub fn n(&self) -> usize {
        self.households.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.households[0].x.len()
    }

    /// Number of treated households.
    pub fn treated_total(&self) -> usize {
        self.households.iter().map(|h| h.a as usize).sum()
    }

    /// Number of treated peers of household `j`.
    pub fn treated_peers(&self, j: usize) -> usize {
        self.treated_total() - self.households[j].a as usize
    }

    /// Treated fraction among peers of `j`; 0 when there are no peers.
    pub fn peer_treated_frac(&self, j: usize) -> f64 {
        if self.n() == 1 {
            0.0
        } else {
            self.treated_peers(j) as f64 / (self.n() - 1) as f64
        }
    }

    /// Componentwise mean of peers' covariate `k`; 0 when there are no peers.
    pub fn peer_mean_x(&self, j: usize, k: usize) -> f64 {
        if self.n() == 1 {
            return 0.0;
        }
        let sum: f64 = self
            .households
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != j)
            .map(|(_, h)| h.x[k])
            .sum();
        sum / (self.n() - 1) as f64
    }

    pub fn ybar(&self) -> f64 {
        self.households.iter().map(|h| h.y as f64).sum::<f64>() / self.n() as f64
    }

    pub fn abar(&self) -> f64 {
        self.treated_total() as f64 / self.n() as f64
    }
}

/// A collection of clusters sharing one covariate width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    clusters: Vec<ClusterData>,
    covariate_dim: usize,
}

impl Dataset {
    pub fn new(clusters: Vec<ClusterData>) -> Result<Self> {
        Self::with_size_cap(clusters, MAX_CLUSTER_SIZE)
    }

    pub fn with_size_cap(clusters: Vec<ClusterData>, size_cap: usize) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidData("dataset has no clusters".into()));
        }
        let d = clusters[0].covariate_dim();
        for c in &clusters {
            if c.covariate_dim() != d {
                return Err(Error::InvalidData(format!(
                    "cluster {}: covariate width {} != {d}",
                    c.cluster_id,
                    c.covariate_dim()
                )));
            }
            if c.n() > size_cap {
                return Err(Error::InvalidData(format!(
                    "cluster {}: size {} exceeds cap {size_cap}",
                    c.cluster_id,
                    c.n()
                )));
            }
        }
        Ok(Self { clusters, covariate_dim: d })
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn household_count(&self) -> usize {
        self.clusters.iter().map(|c| c.n()).sum()
    }

    /// Builds a new dataset from a subset of cluster indices (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            clusters: indices.iter().map(|&i| self.clusters[i].clone()).collect(),
            covariate_dim: self.covariate_dim,
        }
    }

    /// Cluster-level feature vector used by rules operating on whole
    /// clusters: cluster size, the within-cluster mean of each covariate,
    /// and the mean of each squared covariate (so rules can react to
    /// within-cluster spread, not just location).
    pub fn cluster_features(cluster: &ClusterData) -> Vec<f64> {
        let d = cluster.covariate_dim();
        let n = cluster.n() as f64;
        let mut f = Vec::with_capacity(2 * d + 1);
        f.push(n);
        for k in 0..d {
            f.push(cluster.households.iter().map(|h| h.x[k]).sum::<f64>() / n);
        }
        for k in 0..d {
            f.push(cluster.households.iter().map(|h| h.x[k] * h.x[k]).sum::<f64>() / n);
        }
        f
    }
}
