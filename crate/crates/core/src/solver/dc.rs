//! Training of the kernel rule by the difference-of-convex (DC) algorithm:
//! linearize the concave part at the incumbent, solve the convex surrogate,
//! repeat. The surrogate is minimized by gradient descent preconditioned
//! with the kernel (steps are taken in function space, so conditioning does
//! not depend on the kernel matrix spectrum), with Armijo backtracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::Grid;
use crate::loss::LossTable;
use crate::models::{OutcomeModel, PropensityModel};
use crate::solver::kernel::{kernel_matrix, KernelRule};
use crate::util::Standardizer;

/// Iteration controls for [`dc_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcConfig {
    /// Outer stop: Euclidean norm of the (eta, b) step.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Inner stop: sup-norm of the preconditioned surrogate gradient.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Initial diagonal jitter when inverting the kernel matrix.
    pub jitter: f64,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self { outer_tol: 1e-5, max_outer: 100, inner_tol: 1e-6, max_inner: 500, jitter: 1e-8 }
    }
}

/// A fitted rule plus solver telemetry.
#[derive(Debug, Clone)]
pub struct DcFit {
    pub rule: KernelRule,
    /// Regularized objective after the initial point and each accepted
    /// outer iteration.
    pub objective_path: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Set when some inner line search could not make progress; the best
    /// iterate found is still returned.
    pub line_search_exhausted: bool,
}

/// Per-cluster starting values: the grid argmin of each cluster's loss,
/// stretched outside the unit interval for boundary clusters via the
/// thirteen auxiliary regressions (twelve response-surface levels plus one
/// weighted-residual summary), inverted and taken to the extreme.
pub fn init_points(
    dataset: &Dataset,
    loss: &LossTable,
    mu: &dyn OutcomeModel,
    e: &dyn PropensityModel,
    grid: &Grid,
) -> Vec<f64> {
    let n_clusters = dataset.len();
    let r: Vec<f64> = (0..n_clusters).map(|i| loss.grid_argmin(i, grid)).collect();
    let interior: Vec<usize> =
        (0..n_clusters).filter(|&i| r[i] > 0.0 && r[i] < 1.0).collect();
    if interior.len() < 2 {
        log::warn!(
            "{} interior starting values; skipping boundary stretch",
            interior.len()
        );
        return r;
    }
    if interior.len() == n_clusters {
        return r;
    }

    // Model responses: phi(a, a') at the 12 grid levels, then the
    // residual-over-propensity summary.
    let ego_levels: [u8; 2] = [0, 1];
    let peer_levels: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let mut responses: Vec<Vec<f64>> = Vec::with_capacity(13);
    for &a in &ego_levels {
        for &ap in &peer_levels {
            responses.push(
                dataset
                    .clusters()
                    .iter()
                    .map(|c| {
                        (0..c.n()).map(|j| mu.mu(a, ap, c, j)).sum::<f64>() / c.n() as f64
                    })
                    .collect(),
            );
        }
    }
    responses.push(
        dataset
            .clusters()
            .iter()
            .map(|c| {
                let n = c.n();
                (0..n)
                    .map(|j| {
                        let h = &c.households[j];
                        let s = c.treated_peers(j);
                        let pf = c.peer_treated_frac(j);
                        let resid = h.y as f64 - mu.mu(h.a, pf, c, j);
                        resid / e.e(h.a, s, c, j)
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect(),
    );

    // Simple linear regressions of each response on r over interior clusters.
    let r_mean: f64 = interior.iter().map(|&i| r[i]).sum::<f64>() / interior.len() as f64;
    let r_var: f64 =
        interior.iter().map(|&i| (r[i] - r_mean) * (r[i] - r_mean)).sum::<f64>();
    let mut fits: Vec<(f64, f64)> = Vec::with_capacity(responses.len());
    for resp in &responses {
        if r_var < 1e-12 {
            continue;
        }
        let y_mean: f64 = interior.iter().map(|&i| resp[i]).sum::<f64>() / interior.len() as f64;
        let cov: f64 =
            interior.iter().map(|&i| (r[i] - r_mean) * (resp[i] - y_mean)).sum::<f64>();
        let slope = cov / r_var;
        let intercept = y_mean - slope * r_mean;
        if slope.abs() > 1e-8 && slope.is_finite() && intercept.is_finite() {
            fits.push((intercept, slope));
        }
    }
    if fits.is_empty() {
        log::warn!("all stretch regressions degenerate; keeping boundary values");
        return r;
    }

    // Inverted small-slope regressions can throw starting values far from
    // the unit interval, which strands the solver on the flat linearized
    // tails; the stretch is kept mild.
    const STRETCH_LO: f64 = -1.0;
    const STRETCH_HI: f64 = 2.0;
    (0..n_clusters)
        .map(|i| {
            if r[i] > 0.0 && r[i] < 1.0 {
                return r[i];
            }
            let inverted = fits
                .iter()
                .enumerate()
                .map(|(k, (b0, b1))| (responses[k][i] - b0) / b1)
                .filter(|v| v.is_finite());
            if r[i] >= 1.0 {
                inverted.fold(1.0f64, f64::max).min(STRETCH_HI)
            } else {
                inverted.fold(0.0f64, f64::min).max(STRETCH_LO)
            }
        })
        .collect()
}

/// Solves (K + jitter I) eta = rhs, escalating the jitter tenfold until the
/// factorization succeeds. The jitter is always applied: it bounds the
/// conditioning of the interpolation and keeps the result insensitive to
/// row order.
fn solve_with_jitter(k: &DMatrix<f64>, rhs: &DVector<f64>, jitter0: f64) -> Result<DVector<f64>> {
    let n = k.nrows();
    let mut jitter = jitter0.max(f64::MIN_POSITIVE);
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = kj.cholesky() {
            return Ok(ch.solve(rhs));
        }
        jitter *= 10.0;
        if jitter > 1.0 {
            return Err(Error::Singular {
                context: "kernel system for initial coefficients".into(),
                condition: jitter,
            });
        }
    }
}

struct Surrogate<'a> {
    k: &'a DMatrix<f64>,
    loss: &'a LossTable,
    grad_minus: &'a [f64],
    lambda: f64,
}

impl Surrogate<'_> {
    fn n(&self) -> usize {
        self.k.nrows()
    }

    /// Data part of the surrogate at predictions t.
    fn data_value(&self, t: &DVector<f64>) -> f64 {
        let n = self.n() as f64;
        let mut acc = 0.0;
        for i in 0..self.n() {
            let (lp, _, _) = self.loss.convex_split(i, t[i]);
            acc += lp - self.grad_minus[i] * t[i];
        }
        acc / n
    }

    /// u_i = (1/N)(L+'(t_i) - g_i): the function-space data gradient.
    fn data_grad(&self, t: &DVector<f64>) -> DVector<f64> {
        let n = self.n() as f64;
        DVector::from_fn(self.n(), |i, _| {
            (self.loss.plus_deriv(i, t[i]) - self.grad_minus[i]) / n
        })
    }
}

/// Minimizes the convex surrogate from the warm start (eta, b). Returns
/// whether any line search was exhausted. The surrogate value never
/// increases, which makes the outer DC objective monotone.
///
/// Steps are damped Newton on the reduced system
///
/// ```text
/// [D K + lambda I   D 1] [d_eta]     [u + lambda eta]
/// [1' D K           1'D1] [d_b ]  = -[sum(u)        ]
/// ```
///
/// (the full Newton system left-multiplied by the kernel inverse), with a
/// function-space gradient step as fallback and Armijo backtracking on the
/// surrogate objective.
fn solve_surrogate(
    s: &Surrogate<'_>,
    eta: &mut DVector<f64>,
    b: &mut f64,
    cfg: &DcConfig,
) -> bool {
    let n = s.n();
    let ones = DVector::from_element(n, 1.0);
    let mut t = s.k * &*eta + &ones * *b;
    // eta' K eta, tracked incrementally along accepted steps.
    let mut quad = eta.dot(&(s.k * &*eta));
    let mut obj = s.data_value(&t) + 0.5 * s.lambda * quad;
    let mut exhausted = false;

    for _ in 0..cfg.max_inner {
        let u = s.data_grad(&t);
        let g_fn = &u + &*eta * s.lambda;
        let g_b = u.sum();
        if g_fn.amax().max(g_b.abs()) < cfg.inner_tol {
            break;
        }

        let curv: Vec<f64> = (0..n)
            .map(|i| s.loss.plus_second_deriv(i, t[i]).max(0.0) / n as f64)
            .collect();
        let curv_total: f64 = curv.iter().sum();

        // Reduced Newton system.
        let mut m: DMatrix<f64> = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = curv[i] * s.k[(i, j)];
            }
            m[(i, i)] += s.lambda;
            m[(i, n)] = curv[i];
        }
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += curv[i] * s.k[(i, j)];
            }
            m[(n, j)] = acc;
        }
        m[(n, n)] = curv_total.max(1e-12);

        let mut rhs = DVector::zeros(n + 1);
        for i in 0..n {
            rhs[i] = -g_fn[i];
        }
        rhs[n] = -g_b;

        let newton = m.lu().solve(&rhs);
        let (d_eta, d_b) = match newton {
            Some(d) => {
                let d_eta = DVector::from_fn(n, |i, _| d[i]);
                let d_b = d[n];
                // Verify descent; fall back to the function-space gradient.
                let k_d = s.k * &d_eta;
                let dir = g_fn.dot(&k_d) + g_b * d_b;
                if dir < 0.0 {
                    (d_eta, d_b)
                } else {
                    (-g_fn.clone(), -g_b)
                }
            }
            None => (-g_fn.clone(), -g_b),
        };

        let k_d = s.k * &d_eta;
        let q_dd = d_eta.dot(&k_d);
        let dir_deriv = g_fn.dot(&k_d) + g_b * d_b;
        if !(dir_deriv < 0.0) {
            break;
        }
        let q_ed = eta.dot(&k_d);
        let dt = &k_d + &ones * d_b;

        let mut step = 1.0f64;
        let mut accepted = false;
        for _ in 0..60 {
            let t_new = &t + &dt * step;
            let quad_new = quad + 2.0 * step * q_ed + step * step * q_dd;
            let obj_new = s.data_value(&t_new) + 0.5 * s.lambda * quad_new;
            let sufficient = obj_new <= obj + 1e-4 * step * dir_deriv;
            if sufficient || (step < 1e-13 && obj_new < obj) {
                *eta += &d_eta * step;
                *b += step * d_b;
                t = t_new;
                quad = quad_new;
                obj = obj_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            exhausted = true;
            break;
        }
    }
    exhausted
}

/// Full regularized objective (1/N) sum L(t_i) + (lambda/2) eta' K eta.
fn full_objective(
    k: &DMatrix<f64>,
    loss: &LossTable,
    lambda: f64,
    eta: &DVector<f64>,
    b: f64,
) -> f64 {
    let n = k.nrows();
    let t = k * eta + DVector::from_element(n, b);
    let mut acc = 0.0;
    for i in 0..n {
        acc += loss.loss(i, t[i]);
    }
    acc / n as f64 + 0.5 * lambda * eta.dot(&(k * eta))
}

/// Trains the kernel rule on `dataset` (whose clusters line up with `loss`
/// rows) at fixed bandwidth and regularization. With `init = None` the
/// starting point interpolates the stretched per-cluster grid minimizers,
/// guarded by the trivial constant rule when that has lower objective.
#[allow(clippy::too_many_arguments)]
pub fn dc_fit(
    dataset: &Dataset,
    loss: &LossTable,
    mu: &dyn OutcomeModel,
    e: &dyn PropensityModel,
    gamma: f64,
    lambda: f64,
    init_grid: &Grid,
    cfg: &DcConfig,
    init: Option<(&[f64], f64)>,
) -> Result<DcFit> {
    if dataset.len() != loss.len() {
        return Err(Error::InvalidData(format!(
            "dataset has {} clusters but loss table has {}",
            dataset.len(),
            loss.len()
        )));
    }
    let raw: Vec<Vec<f64>> = dataset.clusters().iter().map(Dataset::cluster_features).collect();
    let scaler = Standardizer::fit(&raw);
    let z: Vec<Vec<f64>> = raw.iter().map(|p| scaler.apply(p)).collect();
    let k = kernel_matrix(&z, gamma)?;
    let n = dataset.len();

    let (mut eta, mut b) = match init {
        Some((eta0, b0)) => {
            if eta0.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "init has {} coefficients for {n} clusters",
                    eta0.len()
                )));
            }
            (DVector::from_row_slice(eta0), b0)
        }
        None => {
            let r_hat = init_points(dataset, loss, mu, e, init_grid);
            let b0 = r_hat.iter().sum::<f64>() / n as f64;
            let rhs = DVector::from_fn(n, |i, _| r_hat[i] - b0);
            let eta0 = solve_with_jitter(&k, &rhs, cfg.jitter)?;
            // The interpolating start can be dominated by the trivial
            // constant rule when the targets are rough relative to the
            // bandwidth or the penalty is strong; start from whichever is
            // lower.
            let start_obj = full_objective(&k, loss, lambda, &eta0, b0);
            let zero_eta = DVector::zeros(n);
            let zero_obj = full_objective(&k, loss, lambda, &zero_eta, b0);
            if zero_obj < start_obj {
                (zero_eta, b0)
            } else {
                (eta0, b0)
            }
        }
    };

    let mut path = vec![full_objective(&k, loss, lambda, &eta, b)];
    let mut exhausted = false;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_outer {
        iterations += 1;
        let t = &k * &eta + DVector::from_element(n, b);
        let grad_minus: Vec<f64> = (0..n).map(|i| loss.convex_split(i, t[i]).2).collect();
        let surrogate = Surrogate { k: &k, loss, grad_minus: &grad_minus, lambda };

        let mut eta_new = eta.clone();
        let mut b_new = b;
        let bad = solve_surrogate(&surrogate, &mut eta_new, &mut b_new, cfg);
        exhausted |= bad;

        let step_norm = ((&eta_new - &eta).norm_squared() + (b_new - b) * (b_new - b)).sqrt();
        eta = eta_new;
        b = b_new;
        path.push(full_objective(&k, loss, lambda, &eta, b));
        if step_norm < cfg.outer_tol {
            converged = true;
            break;
        }
    }

    let rule = KernelRule {
        support: z,
        eta: eta.iter().copied().collect(),
        b,
        gamma,
        scaler,
    };
    Ok(DcFit { rule, objective_path: path, outer_iterations: iterations, converged, line_search_exhausted: exhausted })
}
