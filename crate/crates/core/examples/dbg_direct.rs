//! Debugging: inspect direct-rule internals for one seed and target.

use omar_core::estimands::{Estimand, Grid, Target};
use omar_core::loss::{LossConfig, LossTable, PsiVariant};
use omar_core::nuisance::*;
use omar_core::pipeline::*;
use omar_core::simulation::{simulate, true_omar_oracle, SimConfig, TrueOutcomeModel, TruePropensityModel};
use omar_core::solver::*;
use omar_core::util::derive_seed;
use omar_core::Dataset;

fn quantiles(label: &str, v: &mut Vec<f64>) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| v[((v.len() - 1) as f64 * p) as usize];
    println!(
        "{label}: min {:.3} q25 {:.3} med {:.3} q75 {:.3} max {:.3}",
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0)
    );
}

fn main() {
    let seed = 0u64;
    let target = Target::new(0.71).unwrap();
    let train = simulate(&SimConfig { n_clusters: 500, ..Default::default() }, 9_000 + seed).unwrap();
    let test = simulate(&SimConfig { n_clusters: 200, ..Default::default() }, 19_000 + seed).unwrap();

    // Reproduce one fold of the pipeline by hand.
    let plan_seed = 31 * seed + 7;
    let repeat_seed = derive_seed(plan_seed, "repeat", 0);
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(repeat_seed, "folds", 0));
    order.shuffle(&mut rng);
    let mut folds = [order[..250].to_vec(), order[250..].to_vec()];
    folds[0].sort_unstable();
    folds[1].sort_unstable();

    let fold_data = train.subset(&folds[0]);
    let comp = train.subset(&folds[1]);
    let mu_hyper = MuHyper { seed: 1, ..Default::default() };
    let mu = fit_outcome_regression(&comp, MuFamily::LogisticInteractions, &mu_hyper).unwrap();
    let e = fit_propensity(&comp, EVariant::Product, &EHyper { seed: 2, ..Default::default() }).unwrap();

    let cfg = LossConfig::new(Estimand::Overall, PsiVariant::DoublyRobust, target, 0.1).unwrap();
    let loss = LossTable::build(&fold_data, cfg, &mu, &e).unwrap();
    let grid = Grid::from_step(1e-3).unwrap();

    // Distribution of per-cluster argmins and stretched starts.
    let mut r: Vec<f64> = (0..fold_data.len()).map(|i| loss.grid_argmin(i, &grid)).collect();
    let r_hat = init_points(&fold_data, &loss, &mu, &e, &grid);
    let interior = r.iter().filter(|&&x| x > 0.0 && x < 1.0).count();
    println!("argmins: {} interior of {}", interior, r.len());
    quantiles("r ", &mut r);
    let mut rh = r_hat.clone();
    quantiles("r^", &mut rh);

    // Oracle on the same fold.
    let mut oracle: Vec<f64> = fold_data
        .clusters()
        .iter()
        .map(|c| true_omar_oracle(c, target, Estimand::Overall, 1e-3).unwrap())
        .collect();
    quantiles("oracle(fold)", &mut oracle);

    // Correlation between argmins and oracle.
    let r2: Vec<f64> = (0..fold_data.len()).map(|i| loss.grid_argmin(i, &grid)).collect();
    let o2: Vec<f64> = fold_data
        .clusters()
        .iter()
        .map(|c| true_omar_oracle(c, target, Estimand::Overall, 1e-3).unwrap())
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mr, mo) = (mean(&r2), mean(&o2));
    let cov: f64 = r2.iter().zip(&o2).map(|(a, b)| (a - mr) * (b - mo)).sum::<f64>();
    let vr: f64 = r2.iter().map(|a| (a - mr) * (a - mr)).sum::<f64>();
    let vo: f64 = o2.iter().map(|b| (b - mo) * (b - mo)).sum::<f64>();
    println!("corr(argmin, oracle) = {:.3}", cov / (vr.sqrt() * vo.sqrt()));

    // What does the true-nuisance argmin look like? (isolates nuisance error)
    let true_loss = LossTable::build(
        &fold_data,
        cfg,
        &TrueOutcomeModel::default(),
        &TruePropensityModel::default(),
    )
    .unwrap();
    let rt: Vec<f64> = (0..fold_data.len()).map(|i| true_loss.grid_argmin(i, &grid)).collect();
    let cov_t: f64 = rt.iter().zip(&o2).map(|(a, b)| (a - mean(&rt)) * (b - mo)).sum::<f64>();
    let vt: f64 = rt.iter().map(|a| (a - mean(&rt))).map(|x| x * x).sum::<f64>();
    println!("corr(true-nuisance argmin, oracle) = {:.3}", cov_t / (vt.sqrt() * vo.sqrt()));

    // CV choice and final fit.
    let gf: Vec<f64> = std::env::args().nth(1).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![0.5, 1.0, 2.0]);
    let lg: Vec<f64> = std::env::args().nth(2).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![1e-3, 1e-2, 1e-1]);
    let gamma_grid = default_gamma_grid(&fold_data, &gf);
    let (g, l, reports) = cross_validate(
        &fold_data,
        &loss,
        &mu,
        &e,
        &gamma_grid,
        &lg,
        3,
        derive_seed(repeat_seed, "cv", 0),
        &grid,
        &DcConfig::default(),
    )
    .unwrap();
    println!("cv chose gamma={g:.3} lambda={l:.4}");
    for r in &reports {
        println!("  cand gamma={:.3} lambda={:.4} risk={:.5}", r.gamma, r.lambda, r.risk);
    }
    let fit = dc_fit(&fold_data, &loss, &mu, &e, g, l, &grid, &DcConfig::default(), None).unwrap();
    println!(
        "dc: iters {} converged {} path {:.4} -> {:.4}",
        fit.outer_iterations,
        fit.converged,
        fit.objective_path[0],
        fit.objective_path.last().unwrap()
    );
    let mut preds: Vec<f64> = test
        .clusters()
        .iter()
        .map(|c| winsorize(fit.rule.predict_cluster(c)))
        .collect();
    quantiles("test preds (one fold rule)", &mut preds);
    let preds_raw: Vec<f64> = test
        .clusters()
        .iter()
        .map(|c| winsorize(fit.rule.predict_cluster(c)))
        .collect();
    let mut test_oracle: Vec<f64> = test
        .clusters()
        .iter()
        .map(|c| true_omar_oracle(c, target, Estimand::Overall, 1e-3).unwrap())
        .collect();
    quantiles("test oracle", &mut test_oracle);
    let oracle_raw: Vec<f64> = test
        .clusters()
        .iter()
        .map(|c| true_omar_oracle(c, target, Estimand::Overall, 1e-3).unwrap())
        .collect();
    let msd = preds_raw
        .iter()
        .zip(&oracle_raw)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / preds_raw.len() as f64;
    println!("single-fold test MSD = {msd:.4}");
}
