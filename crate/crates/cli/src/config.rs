//! JSON run configurations, one document per subcommand.

use serde::{Deserialize, Serialize};

use omar_core::estimands::Estimand;
use omar_core::loss::PsiVariant;
use omar_core::nuisance::{EVariant, MuFamily};
use omar_core::pipeline::Aggregation;
use omar_core::simulation::{BiasDemoConfig, SimCoefficients};

fn default_grid_step() -> f64 {
    1e-3
}

fn default_delta() -> f64 {
    0.1
}

fn default_floor() -> f64 {
    0.01
}

fn default_bins() -> usize {
    30
}

fn default_estimand() -> Estimand {
    Estimand::Overall
}

fn default_psi() -> PsiVariant {
    PsiVariant::DoublyRobust
}

fn default_true() -> bool {
    true
}

fn default_n_bins() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub n_clusters: usize,
    #[serde(default = "default_size_min")]
    pub size_min: usize,
    #[serde(default = "default_size_max")]
    pub size_max: usize,
    #[serde(default)]
    pub coefficients: Option<SimCoefficients>,
    pub seed: u64,
    pub out_csv: String,
}

fn default_size_min() -> usize {
    2
}

fn default_size_max() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_rounds")]
    pub undersample_rounds: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    pub seed: u64,
}

fn default_repeats() -> usize {
    5
}

fn default_rounds() -> usize {
    3
}

fn default_aggregation() -> Aggregation {
    Aggregation::Median
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceSection {
    #[serde(default = "default_mu_family")]
    pub mu_family: MuFamily,
    #[serde(default = "default_e_variant")]
    pub e_variant: EVariant,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

impl Default for NuisanceSection {
    fn default() -> Self {
        Self {
            mu_family: default_mu_family(),
            e_variant: default_e_variant(),
            bins: default_bins(),
            floor: default_floor(),
        }
    }
}

fn default_mu_family() -> MuFamily {
    MuFamily::LogisticInteractions
}

fn default_e_variant() -> EVariant {
    EVariant::Product
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSection {
    #[serde(default = "default_gamma_factors")]
    pub gamma_factors: Vec<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            gamma_factors: default_gamma_factors(),
            lambda_grid: default_lambda_grid(),
            cv_folds: default_cv_folds(),
            grid_step: default_grid_step(),
        }
    }
}

fn default_gamma_factors() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}

fn default_lambda_grid() -> Vec<f64> {
    (0..7).map(|k| 10f64.powf(-4.0 + 4.0 * k as f64 / 6.0)).collect()
}

fn default_cv_folds() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDirectConfig {
    pub train_csv: String,
    pub targets: Vec<f64>,
    #[serde(default = "default_estimand")]
    pub estimand: Estimand,
    #[serde(default = "default_psi")]
    pub psi: PsiVariant,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub plan: PlanConfig,
    #[serde(default)]
    pub nuisance: NuisanceSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub out_rules: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitIndirectConfig {
    pub train_csv: String,
    #[serde(default = "default_mu_family")]
    pub family: MuFamily,
    #[serde(default = "default_estimand")]
    pub estimand: Estimand,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    pub plan: PlanConfig,
    pub out_rules: String,
}

/// A rule file to score in `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleRef {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub test_csv: String,
    pub targets: Vec<f64>,
    #[serde(default)]
    pub rules: Vec<RuleRef>,
    /// Score the generating-model oracle alongside the rules (synthetic
    /// data only: covariates must follow the simulator's layout).
    #[serde(default)]
    pub oracle: bool,
    #[serde(default = "default_estimand")]
    pub estimand: Estimand,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    pub out_prefix: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub train_csv: String,
    #[serde(default)]
    pub nuisance: NuisanceSection,
    #[serde(default = "default_rounds")]
    pub undersample_rounds: usize,
    pub seed: u64,
    #[serde(default = "default_n_bins")]
    pub n_bins: usize,
    #[serde(default = "default_true")]
    pub fit_models: bool,
    pub out_prefix: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasDemoCliConfig {
    #[serde(flatten)]
    pub demo: BiasDemoConfig,
    pub out_csv: String,
}
