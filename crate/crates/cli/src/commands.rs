//! Subcommand implementations. Each command reads one JSON config, writes
//! its artifacts under the output directory, and registers every file with
//! the tracker so failures leave no partial outputs behind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use omar_core::diagnostics::{
    balance_diagnostic, monotonicity_diagnostic, overlap_diagnostic, residual_diagnostic,
};
use omar_core::estimands::Target;
use omar_core::evaluation::{confusion, metrics, squared_deviation, weighted_mean_omar};
use omar_core::nuisance::{EHyper, MuHyper};
use omar_core::pipeline::{
    fit_direct_rules, fit_indirect_rule, CrossFitPlan, DirectRuleFit, IndirectRuleFit, LossSettings,
    NuisanceConfig, SolverConfig,
};
use omar_core::simulation::{bias_demo, simulate, true_omar_oracle, SimConfig};
use omar_core::solver::DcConfig;
use omar_core::{ClusterData, Error, Result};

use crate::config::*;
use crate::io::{export_csv, fmt_sig, ingest_csv, Report};

/// Files created so far in this run; deleted if the run fails.
#[derive(Default)]
pub struct OutputTracker {
    files: Vec<PathBuf>,
}

impl OutputTracker {
    pub fn register(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn remove_all(&self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
    }
}

/// Serialized fitted rules, tagged by estimation route.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RuleBundle {
    Direct { fits: Vec<DirectRuleFit> },
    Indirect { fit: IndirectRuleFit },
}

impl RuleBundle {
    fn predict(&self, cluster: &ClusterData, target: Target) -> Result<f64> {
        match self {
            RuleBundle::Direct { fits } => {
                let fit = fits
                    .iter()
                    .find(|f| (f.target.value() - target.value()).abs() < 1e-12)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "rule bundle has no fit for target {}",
                            target.value()
                        ))
                    })?;
                Ok(fit.predict_new(cluster))
            }
            RuleBundle::Indirect { fit } => fit.predict(cluster, target),
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidData(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, body)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

pub fn run_simulate(
    cfg: &SimulateConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    tracker: &mut OutputTracker,
) -> Result<()> {
    let sim = SimConfig {
        n_clusters: cfg.n_clusters,
        size_min: cfg.size_min,
        size_max: cfg.size_max,
        coefficients: cfg.coefficients.clone().unwrap_or_default(),
    };
    let seed = seed_override.unwrap_or(cfg.seed);
    let data = simulate(&sim, seed)?;
    let path = tracker.register(out_dir.join(&cfg.out_csv));
    export_csv(&data, &path)
}

fn plan_from(cfg: &PlanConfig, seed_override: Option<u64>) -> CrossFitPlan {
    CrossFitPlan {
        repeats: cfg.repeats,
        undersample_rounds: cfg.undersample_rounds,
        aggregation: cfg.aggregation,
        seed: seed_override.unwrap_or(cfg.seed),
    }
}

fn nuisance_from(cfg: &NuisanceSection) -> NuisanceConfig {
    NuisanceConfig {
        mu_family: cfg.mu_family,
        mu_hyper: MuHyper::default(),
        e_variant: cfg.e_variant,
        e_hyper: EHyper { bins: cfg.bins, floor: cfg.floor, ..Default::default() },
    }
}

fn solver_from(cfg: &SolverSection) -> SolverConfig {
    SolverConfig {
        gamma_factors: cfg.gamma_factors.clone(),
        lambda_grid: cfg.lambda_grid.clone(),
        cv_folds: cfg.cv_folds,
        dc: DcConfig::default(),
        grid_step: cfg.grid_step,
    }
}

pub fn run_fit_direct(
    cfg: &FitDirectConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    tracker: &mut OutputTracker,
) -> Result<()> {
    let data = ingest_csv(Path::new(&cfg.train_csv))?;
    let targets = cfg
        .targets
        .iter()
        .map(|&t| Target::new(t))
        .collect::<Result<Vec<_>>>()?;
    let settings = LossSettings { estimand: cfg.estimand, psi: cfg.psi, delta: cfg.delta };
    let fits = fit_direct_rules(
        &data,
        &plan_from(&cfg.plan, seed_override),
        &settings,
        &targets,
        &nuisance_from(&cfg.nuisance),
        &solver_from(&cfg.solver),
    )?;
    let path = tracker.register(out_dir.join(&cfg.out_rules));
    write_json(&RuleBundle::Direct { fits }, &path)
}

pub fn run_fit_indirect(
    cfg: &FitIndirectConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    tracker: &mut OutputTracker,
) -> Result<()> {
    let data = ingest_csv(Path::new(&cfg.train_csv))?;
    let fit = fit_indirect_rule(
        &data,
        &plan_from(&cfg.plan, seed_override),
        cfg.family,
        &MuHyper::default(),
        cfg.estimand,
        cfg.grid_step,
    )?;
    let path = tracker.register(out_dir.join(&cfg.out_rules));
    write_json(&RuleBundle::Indirect { fit }, &path)
}

pub fn run_evaluate(cfg: &EvaluateConfig, out_dir: &Path, tracker: &mut OutputTracker) -> Result<()> {
    let data = ingest_csv(Path::new(&cfg.test_csv))?;
    if cfg.rules.is_empty() && !cfg.oracle {
        return Err(Error::InvalidConfig("nothing to evaluate: no rules and no oracle".into()));
    }
    if cfg.oracle && data.covariate_dim() != 4 {
        return Err(Error::InvalidConfig(format!(
            "oracle scoring needs the simulator's 4-covariate layout, found {} covariates",
            data.covariate_dim()
        )));
    }
    let mut methods: Vec<(String, Option<RuleBundle>)> = Vec::new();
    if cfg.oracle {
        methods.push(("oracle".to_string(), None));
    }
    for r in &cfg.rules {
        methods.push((r.name.clone(), Some(read_json::<RuleBundle>(Path::new(&r.path))?)));
    }

    let weights: Vec<f64> = data.clusters().iter().map(|c| c.n() as f64).collect();
    let groups: Vec<String> = vec!["all".to_string(); data.len()];

    let mut report = Report::new(&[
        "target",
        "method",
        "tp",
        "tn",
        "fp",
        "fn",
        "accuracy",
        "f1_two_sided",
        "mcc",
        "mean_sq_dev",
        "weighted_mean_omar",
    ]);

    for &t in &cfg.targets {
        let target = Target::new(t)?;
        let oracle_preds: Option<Vec<f64>> = if cfg.oracle {
            Some(
                data.clusters()
                    .iter()
                    .map(|c| true_omar_oracle(c, target, cfg.estimand, cfg.grid_step))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        for (name, bundle) in &methods {
            let preds: Vec<f64> = match bundle {
                None => oracle_preds.clone().expect("oracle preds exist"),
                Some(b) => data
                    .clusters()
                    .iter()
                    .map(|c| b.predict(c, target))
                    .collect::<Result<_>>()?,
            };
            let counts = confusion(data.clusters(), &preds, target)?;
            let m = metrics(&counts)?;
            let msd = match &oracle_preds {
                Some(oracle) => {
                    let (_, mean) = squared_deviation(&preds, oracle)?;
                    fmt_sig(mean)
                }
                None => String::new(),
            };
            let (_, overall) = weighted_mean_omar(&preds, &groups, &weights)?;
            report.push(vec![
                fmt_sig(t),
                name.clone(),
                counts.tp.to_string(),
                counts.tn.to_string(),
                counts.fp.to_string(),
                counts.fn_.to_string(),
                fmt_sig(m.accuracy),
                fmt_sig(m.f1_two_sided),
                fmt_sig(m.mcc),
                msd,
                fmt_sig(overall),
            ]);
        }
    }

    let csv_path = tracker.register(out_dir.join(format!("{}-metrics.csv", cfg.out_prefix)));
    report.write_csv(&csv_path)?;
    let json_path = tracker.register(out_dir.join(format!("{}-metrics.json", cfg.out_prefix)));
    report.write_json(&json_path)
}

pub fn run_diagnose(
    cfg: &DiagnoseConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    tracker: &mut OutputTracker,
) -> Result<()> {
    let data = ingest_csv(Path::new(&cfg.train_csv))?;
    let seed = seed_override.unwrap_or(cfg.seed);

    // Median-aggregated nuisances over undersampling rounds.
    let mut mus = Vec::new();
    let mut es = Vec::new();
    for u in 0..cfg.undersample_rounds.max(1) {
        let round = omar_core::util::derive_seed(seed, "diagnose-undersample", u as u64);
        let thinned = omar_core::nuisance::undersample(&data, round)?;
        let mu_hyper = MuHyper {
            seed: omar_core::util::derive_seed(seed, "diagnose-mu", u as u64),
            ..Default::default()
        };
        mus.push(omar_core::nuisance::fit_outcome_regression(
            &thinned,
            cfg.nuisance.mu_family,
            &mu_hyper,
        )?);
        let e_hyper = EHyper {
            bins: cfg.nuisance.bins,
            floor: cfg.nuisance.floor,
            seed: omar_core::util::derive_seed(seed, "diagnose-e", u as u64),
            ..Default::default()
        };
        es.push(omar_core::nuisance::fit_propensity(&thinned, cfg.nuisance.e_variant, &e_hyper)?);
    }
    let mu = omar_core::nuisance::MedianOf(mus);
    let e = omar_core::nuisance::MedianOf(es);

    let balance = balance_diagnostic(&data, &e)?;
    let mut balance_report =
        Report::new(&["group", "covariate", "unadjusted_t", "adjusted_t"]);
    for (k, group) in balance.groups.iter().enumerate() {
        for cb in group {
            balance_report.push(vec![
                (k + 1).to_string(),
                format!("x{}", cb.covariate + 1),
                fmt_sig(cb.unadjusted_t),
                fmt_sig(cb.adjusted_t),
            ]);
        }
    }
    let p = tracker.register(out_dir.join(format!("{}-balance.csv", cfg.out_prefix)));
    balance_report.write_csv(&p)?;
    let p = tracker.register(out_dir.join(format!("{}-balance.json", cfg.out_prefix)));
    balance_report.write_json(&p)?;

    let overlap = overlap_diagnostic(&data, &e, cfg.n_bins)?;
    let mut overlap_report =
        Report::new(&["group", "bar", "in_count", "out_count", "in_min", "in_max", "out_min", "out_max"]);
    for g in &overlap.groups {
        for bar in 0..overlap.n_bars {
            overlap_report.push(vec![
                (g.group + 1).to_string(),
                bar.to_string(),
                g.in_counts[bar].to_string(),
                g.out_counts[bar].to_string(),
                fmt_sig(g.in_range.0),
                fmt_sig(g.in_range.1),
                fmt_sig(g.out_range.0),
                fmt_sig(g.out_range.1),
            ]);
        }
    }
    let p = tracker.register(out_dir.join(format!("{}-overlap.csv", cfg.out_prefix)));
    overlap_report.write_csv(&p)?;
    let p = tracker.register(out_dir.join(format!("{}-overlap.json", cfg.out_prefix)));
    overlap_report.write_json(&p)?;

    let mono = monotonicity_diagnostic(&data, &mu)?;
    let mut mono_report = Report::new(&[
        "total_variations",
        "violation_count",
        "violation_fraction",
        "relative_decreasing_magnitude",
    ]);
    mono_report.push(vec![
        mono.total_variations.to_string(),
        mono.violation_count.to_string(),
        fmt_sig(mono.violation_fraction),
        fmt_sig(mono.relative_decreasing_magnitude),
    ]);
    let p = tracker.register(out_dir.join(format!("{}-monotonicity.csv", cfg.out_prefix)));
    mono_report.write_csv(&p)?;
    let p = tracker.register(out_dir.join(format!("{}-monotonicity.json", cfg.out_prefix)));
    mono_report.write_json(&p)?;

    let resid = residual_diagnostic(&data, &mu, cfg.n_bins)?;
    let mut resid_report =
        Report::new(&["regressor", "bin", "center", "mean_residual", "count"]);
    for curve in &resid.curves {
        for b in 0..curve.bin_centers.len() {
            resid_report.push(vec![
                curve.regressor.clone(),
                b.to_string(),
                fmt_sig(curve.bin_centers[b]),
                fmt_sig(curve.mean_residuals[b]),
                curve.bin_counts[b].to_string(),
            ]);
        }
    }
    let p = tracker.register(out_dir.join(format!("{}-residuals.csv", cfg.out_prefix)));
    resid_report.write_csv(&p)?;
    let p = tracker.register(out_dir.join(format!("{}-residuals.json", cfg.out_prefix)));
    resid_report.write_json(&p)
}

pub fn run_bias_demo(
    cfg: &BiasDemoCliConfig,
    out_dir: &Path,
    tracker: &mut OutputTracker,
) -> Result<()> {
    let records = bias_demo(&cfg.demo)?;
    let mut report = Report::new(&["q_a", "p", "true_omar", "naive_omar", "difference"]);
    for r in &records {
        report.push(vec![
            fmt_sig(r.q_a),
            r.p.to_string(),
            fmt_sig(r.true_omar),
            fmt_sig(r.naive_omar),
            fmt_sig(r.difference),
        ]);
    }
    let path = tracker.register(out_dir.join(&cfg.out_csv));
    report.write_csv(&path)?;
    let json = tracker.register(out_dir.join(format!(
        "{}.json",
        cfg.out_csv.trim_end_matches(".csv")
    )));
    report.write_json(&json)
}
