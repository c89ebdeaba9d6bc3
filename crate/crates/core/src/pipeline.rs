//! End-to-end estimation: two-fold cross-fitting of nuisances and rules,
//! undersampling rounds with median aggregation, repeated splits, and the
//! final across-repeat aggregation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterData, Dataset};
use crate::error::{Error, Result};
use crate::estimands::{indirect_rule, Estimand, Grid, Target};
use crate::loss::{LossConfig, LossTable, PsiVariant};
use crate::nuisance::{
    fit_outcome_regression, fit_propensity, undersample, EHyper, EModel, EVariant, MedianOf,
    MuFamily, MuHyper, MuModel,
};
use crate::solver::{cross_validate, dc_fit, median_heuristic, winsorize, DcConfig, WinsorizedRule};
use crate::util::{derive_seed, median, Standardizer};

/// How per-repeat predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Median,
    Mean,
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Median => median(values),
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        }
    }
}

/// Plan for the repeated two-fold cross-fitting procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    /// Number of independent split repetitions (T).
    pub repeats: usize,
    /// Undersampling rounds per nuisance fit (U), median-aggregated.
    pub undersample_rounds: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for CrossFitPlan {
    fn default() -> Self {
        Self { repeats: 5, undersample_rounds: 3, aggregation: Aggregation::Median, seed: 0 }
    }
}

/// Nuisance estimation choices shared by both folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub mu_family: MuFamily,
    pub mu_hyper: MuHyper,
    pub e_variant: EVariant,
    pub e_hyper: EHyper,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            mu_family: MuFamily::LogisticInteractions,
            mu_hyper: MuHyper::default(),
            e_variant: EVariant::Product,
            e_hyper: EHyper::default(),
        }
    }
}

/// Solver choices: cross-validation grids and iteration controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Bandwidth grid as multiples of the median pairwise distance.
    pub gamma_factors: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub dc: DcConfig,
    /// Grid resolution for per-cluster argmin searches.
    pub grid_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma_factors: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            // Seven log-spaced points on [1e-4, 1].
            lambda_grid: (0..7).map(|k| 10f64.powf(-4.0 + 4.0 * k as f64 / 6.0)).collect(),
            cv_folds: 10,
            dc: DcConfig::default(),
            grid_step: 1e-3,
        }
    }
}

/// Loss choices that do not depend on the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub estimand: Estimand,
    pub psi: PsiVariant,
    pub delta: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self { estimand: Estimand::Overall, psi: PsiVariant::DoublyRobust, delta: 0.1 }
    }
}

/// One repeat's fitted pair of rules and its fold assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatFit {
    /// Fold (0/1) of each training cluster, indexed by training order.
    pub fold_of_cluster: Vec<u8>,
    /// `rules[l]` was trained on fold l with nuisances from its complement.
    pub rules: [WinsorizedRule; 2],
    pub gamma: [f64; 2],
    pub lambda: [f64; 2],
    pub dc_iterations: [usize; 2],
    pub dc_converged: [bool; 2],
}

/// The direct rule for one target: a set of per-repeat rules plus the
/// aggregation that combines them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectRuleFit {
    pub target: Target,
    pub settings: LossSettings,
    pub aggregation: Aggregation,
    pub repeats: Vec<RepeatFit>,
    pub repeats_requested: usize,
}

impl DirectRuleFit {
    pub fn repeats_effective(&self) -> usize {
        self.repeats.len()
    }

    /// Prediction for a cluster outside the training set: per repeat, the
    /// winsorized average of the two unwinsorized rules; across repeats,
    /// the plan aggregation; winsorized once more.
    pub fn predict_new(&self, cluster: &ClusterData) -> f64 {
        let features = Dataset::cluster_features(cluster);
        let per_repeat: Vec<f64> = self
            .repeats
            .iter()
            .map(|r| {
                let raw0 = r.rules[0].inner.raw_predict(&features);
                let raw1 = r.rules[1].inner.raw_predict(&features);
                winsorize(0.5 * (raw0 + raw1))
            })
            .collect();
        winsorize(self.aggregation.apply(&per_repeat))
    }

    /// Prediction for training cluster `index`: per repeat, the rule whose
    /// training fold contains the cluster (its nuisances never saw it).
    pub fn predict_in_sample(&self, index: usize, cluster: &ClusterData) -> Result<f64> {
        let per_repeat: Vec<f64> = self
            .repeats
            .iter()
            .map(|r| {
                let fold = *r.fold_of_cluster.get(index).ok_or_else(|| {
                    Error::InvalidData(format!("cluster index {index} outside the training set"))
                })? as usize;
                if fold > 1 {
                    return Err(Error::InvalidData(format!("unknown fold tag {fold}")));
                }
                Ok(r.rules[fold].predict_cluster(cluster))
            })
            .collect::<Result<_>>()?;
        Ok(winsorize(self.aggregation.apply(&per_repeat)))
    }
}

/// Bandwidth grid from the median heuristic over standardized features.
pub fn default_gamma_grid(dataset: &Dataset, factors: &[f64]) -> Vec<f64> {
    let raw: Vec<Vec<f64>> = dataset.clusters().iter().map(Dataset::cluster_features).collect();
    let scaler = Standardizer::fit(&raw);
    let z: Vec<Vec<f64>> = raw.iter().map(|p| scaler.apply(p)).collect();
    let med = median_heuristic(&z);
    factors.iter().map(|f| f * med).collect()
}

/// Median-aggregated nuisances fit on undersampled rounds of `data`.
fn fit_nuisances(
    data: &Dataset,
    nuisance: &NuisanceConfig,
    rounds: usize,
    seed: u64,
) -> Result<(MedianOf<MuModel>, MedianOf<EModel>)> {
    let mut mus = Vec::with_capacity(rounds);
    let mut es = Vec::with_capacity(rounds);
    for u in 0..rounds {
        let round_seed = derive_seed(seed, "undersample-round", u as u64);
        let thinned = undersample(data, round_seed)?;
        let mu_hyper = MuHyper { seed: derive_seed(seed, "mu", u as u64), ..nuisance.mu_hyper.clone() };
        mus.push(fit_outcome_regression(&thinned, nuisance.mu_family, &mu_hyper)?);
        let e_hyper = EHyper { seed: derive_seed(seed, "e", u as u64), ..nuisance.e_hyper.clone() };
        es.push(fit_propensity(&thinned, nuisance.e_variant, &e_hyper)?);
    }
    Ok((MedianOf(mus), MedianOf(es)))
}

/// Two fold rules with their chosen (gamma, lambda) and solver telemetry.
type FoldRules = ([WinsorizedRule; 2], [f64; 2], [f64; 2], [usize; 2], [bool; 2]);

struct RepeatOutcome {
    fold_of_cluster: Vec<u8>,
    /// Per target: the two fold rules or the error that lost this repeat.
    per_target: Vec<Result<FoldRules>>,
}

fn run_repeat(
    dataset: &Dataset,
    plan: &CrossFitPlan,
    settings: &LossSettings,
    targets: &[Target],
    nuisance: &NuisanceConfig,
    solver: &SolverConfig,
    repeat: usize,
) -> Result<RepeatOutcome> {
    let n = dataset.len();
    let repeat_seed = derive_seed(plan.seed, "repeat", repeat as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(repeat_seed, "folds", 0));
    order.shuffle(&mut rng);
    let mut folds = [order[..n / 2].to_vec(), order[n / 2..].to_vec()];
    folds[0].sort_unstable();
    folds[1].sort_unstable();
    if folds[0].len() < 2 || folds[1].len() < 2 {
        return Err(Error::InvalidData(format!(
            "fold with fewer than 2 clusters (dataset has {n})"
        )));
    }
    let mut fold_of_cluster = vec![0u8; n];
    for &i in &folds[1] {
        fold_of_cluster[i] = 1;
    }

    let grid = Grid::from_step(solver.grid_step)?;
    let mut per_fold: Vec<(Dataset, MedianOf<MuModel>, MedianOf<EModel>)> = Vec::with_capacity(2);
    for l in 0..2 {
        let complement = dataset.subset(&folds[1 - l]);
        let (mu, e) = fit_nuisances(
            &complement,
            nuisance,
            plan.undersample_rounds,
            derive_seed(repeat_seed, "nuisance", l as u64),
        )?;
        per_fold.push((dataset.subset(&folds[l]), mu, e));
    }

    let per_target = targets
        .iter()
        .enumerate()
        .map(|(ti, &target)| {
            let mut rules: Vec<WinsorizedRule> = Vec::with_capacity(2);
            let mut gammas = [0.0; 2];
            let mut lambdas = [0.0; 2];
            let mut iters = [0usize; 2];
            let mut conv = [false; 2];
            for l in 0..2 {
                let (fold_data, mu, e) = &per_fold[l];
                let config = LossConfig::new(settings.estimand, settings.psi, target, settings.delta)?;
                let loss = LossTable::build(fold_data, config, mu, e)?;
                let gamma_grid = default_gamma_grid(fold_data, &solver.gamma_factors);
                let cv_seed = derive_seed(repeat_seed, "cv", (ti * 2 + l) as u64);
                let (gamma, lambda, _) = cross_validate(
                    fold_data,
                    &loss,
                    mu,
                    e,
                    &gamma_grid,
                    &solver.lambda_grid,
                    solver.cv_folds,
                    cv_seed,
                    &grid,
                    &solver.dc,
                )?;
                let fit = dc_fit(fold_data, &loss, mu, e, gamma, lambda, &grid, &solver.dc, None)?;
                gammas[l] = gamma;
                lambdas[l] = lambda;
                iters[l] = fit.outer_iterations;
                conv[l] = fit.converged;
                rules.push(WinsorizedRule { inner: fit.rule });
            }
            let rules: [WinsorizedRule; 2] =
                [rules.remove(0), rules.remove(0)];
            Ok((rules, gammas, lambdas, iters, conv))
        })
        .collect();

    Ok(RepeatOutcome { fold_of_cluster, per_target })
}

/// Fits the direct rule for every target, sharing the per-repeat fold
/// splits and nuisance fits across targets. A repeat whose solve fails for
/// a target is dropped for that target (with a warning); fitting aborts if
/// fewer than 60% of repeats survive.
pub fn fit_direct_rules(
    dataset: &Dataset,
    plan: &CrossFitPlan,
    settings: &LossSettings,
    targets: &[Target],
    nuisance: &NuisanceConfig,
    solver: &SolverConfig,
) -> Result<Vec<DirectRuleFit>> {
    if dataset.len() < 4 {
        return Err(Error::InvalidData(format!(
            "need at least 4 clusters for two-fold cross-fitting, got {}",
            dataset.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no targets supplied".into()));
    }
    if plan.repeats == 0 || plan.undersample_rounds == 0 {
        return Err(Error::InvalidConfig("repeats and undersample rounds must be positive".into()));
    }

    let outcomes: Vec<Result<RepeatOutcome>> = (0..plan.repeats)
        .into_par_iter()
        .map(|t| run_repeat(dataset, plan, settings, targets, nuisance, solver, t))
        .collect();

    let required = ((0.6 * plan.repeats as f64).ceil() as usize).max(1);
    let mut fits = Vec::with_capacity(targets.len());
    for (ti, &target) in targets.iter().enumerate() {
        let mut repeats = Vec::new();
        for (t, outcome) in outcomes.iter().enumerate() {
            match outcome {
                Ok(o) => match &o.per_target[ti] {
                    Ok((rules, gamma, lambda, iters, conv)) => repeats.push(RepeatFit {
                        fold_of_cluster: o.fold_of_cluster.clone(),
                        rules: rules.clone(),
                        gamma: *gamma,
                        lambda: *lambda,
                        dc_iterations: *iters,
                        dc_converged: *conv,
                    }),
                    Err(err) => {
                        log::warn!("repeat {t} dropped for target {}: {err}", target.value());
                    }
                },
                Err(err) => {
                    log::warn!("repeat {t} failed: {err}");
                }
            }
        }
        if repeats.len() < required {
            return Err(Error::FitFailed(format!(
                "only {} of {} repeats succeeded for target {} (need {required})",
                repeats.len(),
                plan.repeats,
                target.value()
            )));
        }
        fits.push(DirectRuleFit {
            target,
            settings: *settings,
            aggregation: plan.aggregation,
            repeats,
            repeats_requested: plan.repeats,
        });
    }
    Ok(fits)
}

/// Convenience wrapper for a single target.
pub fn fit_direct_rule(
    dataset: &Dataset,
    plan: &CrossFitPlan,
    settings: &LossSettings,
    target: Target,
    nuisance: &NuisanceConfig,
    solver: &SolverConfig,
) -> Result<DirectRuleFit> {
    Ok(fit_direct_rules(dataset, plan, settings, &[target], nuisance, solver)?.remove(0))
}

/// The indirect rule: an outcome regression (median-aggregated over
/// undersampling rounds) read off by per-cluster grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndirectRuleFit {
    pub mu: MedianOf<MuModel>,
    pub family: MuFamily,
    pub estimand: Estimand,
    pub grid_step: f64,
}

impl IndirectRuleFit {
    pub fn predict(&self, cluster: &ClusterData, target: Target) -> Result<f64> {
        indirect_rule(&self.mu, cluster, target, self.estimand, self.grid_step)
    }
}

/// Fits the indirect rule's outcome regression on the full dataset with
/// the plan's undersampling rounds.
pub fn fit_indirect_rule(
    dataset: &Dataset,
    plan: &CrossFitPlan,
    family: MuFamily,
    mu_hyper: &MuHyper,
    estimand: Estimand,
    grid_step: f64,
) -> Result<IndirectRuleFit> {
    if plan.undersample_rounds == 0 {
        return Err(Error::InvalidConfig("undersample rounds must be positive".into()));
    }
    let seed = derive_seed(plan.seed, "indirect", 0);
    let mut mus = Vec::with_capacity(plan.undersample_rounds);
    for u in 0..plan.undersample_rounds {
        let thinned = undersample(dataset, derive_seed(seed, "undersample-round", u as u64))?;
        let hyper = MuHyper { seed: derive_seed(seed, "mu", u as u64), ..mu_hyper.clone() };
        mus.push(fit_outcome_regression(&thinned, family, &hyper)?);
    }
    Ok(IndirectRuleFit { mu: MedianOf(mus), family, estimand, grid_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate, true_omar_oracle, SimConfig};

    fn tiny_solver() -> SolverConfig {
        SolverConfig {
            gamma_factors: vec![1.0],
            lambda_grid: vec![0.05],
            cv_folds: 2,
            dc: DcConfig::default(),
            grid_step: 1e-2,
        }
    }

    fn tiny_plan(repeats: usize) -> CrossFitPlan {
        CrossFitPlan { repeats, undersample_rounds: 1, aggregation: Aggregation::Median, seed: 11 }
    }

    #[test]
    fn direct_rule_concentrates_near_zero_for_easy_target() {
        let data = simulate(&SimConfig { n_clusters: 60, ..Default::default() }, 23).unwrap();
        let test = simulate(&SimConfig { n_clusters: 40, ..Default::default() }, 24).unwrap();
        let fit = fit_direct_rule(
            &data,
            &tiny_plan(1),
            &LossSettings::default(),
            Target::new(0.15).unwrap(),
            &NuisanceConfig::default(),
            &tiny_solver(),
        )
        .unwrap();
        let mean: f64 =
            test.clusters().iter().map(|c| fit.predict_new(c)).sum::<f64>() / test.len() as f64;
        assert!(mean <= 0.1, "mean prediction {mean}");
    }

    #[test]
    fn identical_repeats_aggregate_to_single_repeat() {
        let data = simulate(&SimConfig { n_clusters: 40, ..Default::default() }, 29).unwrap();
        let single = fit_direct_rule(
            &data,
            &tiny_plan(1),
            &LossSettings::default(),
            Target::new(0.7).unwrap(),
            &NuisanceConfig::default(),
            &tiny_solver(),
        )
        .unwrap();
        let mut tripled = single.clone();
        tripled.repeats = vec![
            single.repeats[0].clone(),
            single.repeats[0].clone(),
            single.repeats[0].clone(),
        ];
        for c in data.clusters().iter().take(10) {
            assert_eq!(single.predict_new(c), tripled.predict_new(c));
        }
    }

    #[test]
    fn in_sample_prediction_ignores_other_fold() {
        let data = simulate(&SimConfig { n_clusters: 40, ..Default::default() }, 31).unwrap();
        let fit = fit_direct_rule(
            &data,
            &tiny_plan(1),
            &LossSettings::default(),
            Target::new(0.7).unwrap(),
            &NuisanceConfig::default(),
            &tiny_solver(),
        )
        .unwrap();
        let mut tampered = fit.clone();
        // Wreck fold 1's rule; fold-0 clusters must be unaffected.
        for w in &mut tampered.repeats[0].rules[1].inner.eta {
            *w += 100.0;
        }
        tampered.repeats[0].rules[1].inner.b = -50.0;
        for (i, c) in data.clusters().iter().enumerate() {
            if fit.repeats[0].fold_of_cluster[i] == 0 {
                assert_eq!(
                    fit.predict_in_sample(i, c).unwrap(),
                    tampered.predict_in_sample(i, c).unwrap()
                );
            }
        }
        assert!(fit.predict_in_sample(10_000, &data.clusters()[0]).is_err());
    }

    #[test]
    fn out_of_sample_prediction_is_aggregated_repeat_prediction() {
        let data = simulate(&SimConfig { n_clusters: 44, ..Default::default() }, 37).unwrap();
        let test = simulate(&SimConfig { n_clusters: 10, ..Default::default() }, 38).unwrap();
        let fit = fit_direct_rule(
            &data,
            &tiny_plan(3),
            &LossSettings::default(),
            Target::new(0.7).unwrap(),
            &NuisanceConfig::default(),
            &tiny_solver(),
        )
        .unwrap();
        assert_eq!(fit.repeats_effective(), 3);
        for c in test.clusters() {
            let features = Dataset::cluster_features(c);
            let per_repeat: Vec<f64> = fit
                .repeats
                .iter()
                .map(|r| {
                    winsorize(
                        0.5 * (r.rules[0].inner.raw_predict(&features)
                            + r.rules[1].inner.raw_predict(&features)),
                    )
                })
                .collect();
            let expected = winsorize(median(&per_repeat));
            let got = fit.predict_new(c);
            assert_eq!(got, expected);
            let mn = per_repeat.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = per_repeat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(winsorize(mn) <= got && got <= winsorize(mx), "aggregation sandwich");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let data = simulate(&SimConfig { n_clusters: 40, ..Default::default() }, 41).unwrap();
        let run = || {
            fit_direct_rule(
                &data,
                &tiny_plan(2),
                &LossSettings::default(),
                Target::new(0.7).unwrap(),
                &NuisanceConfig::default(),
                &tiny_solver(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for c in data.clusters().iter().take(10) {
            assert_eq!(a.predict_new(c), b.predict_new(c));
        }
    }

    #[test]
    fn rejects_tiny_datasets_and_empty_targets() {
        let data = simulate(&SimConfig { n_clusters: 3, ..Default::default() }, 43).unwrap();
        assert!(fit_direct_rule(
            &data,
            &tiny_plan(1),
            &LossSettings::default(),
            Target::new(0.7).unwrap(),
            &NuisanceConfig::default(),
            &tiny_solver(),
        )
        .is_err());
        let data = simulate(&SimConfig { n_clusters: 10, ..Default::default() }, 43).unwrap();
        assert!(fit_direct_rules(
            &data,
            &tiny_plan(1),
            &LossSettings::default(),
            &[],
            &NuisanceConfig::default(),
            &tiny_solver(),
        )
        .is_err());
    }

    #[test]
    fn indirect_rule_trivial_targets() {
        let data = simulate(&SimConfig { n_clusters: 60, ..Default::default() }, 47).unwrap();
        let fit = fit_indirect_rule(
            &data,
            &tiny_plan(1),
            MuFamily::LogisticInteractions,
            &MuHyper::default(),
            Estimand::Overall,
            1e-3,
        )
        .unwrap();
        for c in data.clusters().iter().take(10) {
            assert_eq!(fit.predict(c, Target::new(0.0).unwrap()).unwrap(), 0.0);
            assert_eq!(fit.predict(c, Target::new(1.0).unwrap()).unwrap(), 1.0);
        }
    }

    #[test]
    fn indirect_rule_with_true_mu_matches_oracle() {
        // Fitted on abundant data the logistic-family rule lands within a
        // few grid steps of the oracle for most clusters; the exact-oracle
        // property is covered at the estimands level. Here: sanity on the
        // pipeline plumbing using a moderate sample.
        let data = simulate(&SimConfig { n_clusters: 400, ..Default::default() }, 53).unwrap();
        let test = simulate(&SimConfig { n_clusters: 60, ..Default::default() }, 54).unwrap();
        let fit = fit_indirect_rule(
            &data,
            &tiny_plan(1),
            MuFamily::LogisticInteractions,
            &MuHyper::default(),
            Estimand::Overall,
            1e-2,
        )
        .unwrap();
        let t = Target::new(0.70).unwrap();
        let mut close = 0;
        for c in test.clusters() {
            let pred = fit.predict(c, t).unwrap();
            let oracle = true_omar_oracle(c, t, Estimand::Overall, 1e-2).unwrap();
            if (pred - oracle).abs() <= 0.25 {
                close += 1;
            }
        }
        assert!(close >= test.len() * 6 / 10, "only {close}/{} close", test.len());
    }
}
