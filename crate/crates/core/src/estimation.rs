//! ML and REML fitting.
//!
//! The regression coefficients are profiled out in closed form,
//! `beta_hat(theta) = Delta(theta)^-1 (sum tau_i z_i ybar_i + w / sigma_e_sq)`,
//! and the remaining two-dimensional problem in the variance components is
//! solved by a damped Newton iteration in `(log sigma_alpha_sq, log sigma_e_sq)`.
//! Gradients and Hessians of the profiled objectives come from the analytic
//! score and score Jacobian through the envelope theorem.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{log_likelihood, score, score_jacobian, ScoreVector};
use crate::model::{tau_unchecked, ClusteredDataset, ParameterVector, SufficientStats, Theta};

/// Relative pivot threshold below which a symmetric matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-13;

pub(crate) fn checked_cholesky(mat: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let scale = mat.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return if mat.nrows() == 0 { Cholesky::new(mat.clone()) } else { None };
    }
    let chol = Cholesky::new(mat.clone())?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
    (min_pivot > PIVOT_TOL * scale).then_some(chol)
}

type Solved = (DVector<f64>, DMatrix<f64>, Cholesky<f64, Dyn>);

/// The GLS system behind the profile estimator.
#[derive(Debug, Clone)]
pub struct ProfileSystem<'a> {
    stats: &'a SufficientStats,
    /// `(0, 0, S_w^xy')'`.
    pub w: DVector<f64>,
    /// `blockdiag(0, 0, S_w^x)`.
    pub w_mat: DMatrix<f64>,
}

impl<'a> ProfileSystem<'a> {
    pub fn new(stats: &'a SufficientStats) -> Self {
        let q = 1 + stats.p_b + stats.p_w;
        let start = 1 + stats.p_b;
        let mut w = DVector::zeros(q);
        let mut w_mat = DMatrix::zeros(q, q);
        for a in 0..stats.p_w {
            w[start + a] = stats.s_w_xy[a];
            for b in 0..stats.p_w {
                w_mat[(start + a, start + b)] = stats.s_w_x[(a, b)];
            }
        }
        Self { stats, w, w_mat }
    }

    pub fn stats(&self) -> &SufficientStats {
        self.stats
    }

    fn weighted_outer(&self, weight: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = self.w.len();
        let mut out = DMatrix::zeros(q, q);
        for c in &self.stats.clusters {
            let m = c.m as f64;
            out.ger(weight(m), &c.z, &c.z, 1.0);
        }
        out
    }

    /// `Delta(theta) = sum tau_i z_i z_i' + W / sigma_e_sq`.
    pub fn delta(&self, theta: Theta) -> DMatrix<f64> {
        let d = self.weighted_outer(|m| tau_unchecked(theta, m));
        d + &self.w_mat / theta.sigma_e_sq
    }

    /// `(d Delta / d sigma_alpha_sq, d Delta / d sigma_e_sq)`.
    pub fn delta_derivatives(&self, theta: Theta) -> [DMatrix<f64>; 2] {
        let se = theta.sigma_e_sq;
        let da = self.weighted_outer(|m| -tau_unchecked(theta, m).powi(2));
        let de = self.weighted_outer(|m| -tau_unchecked(theta, m).powi(2) / m) - &self.w_mat / (se * se);
        [da, de]
    }

    /// Second derivatives `[[aa, ae], [ea, ee]]` of `Delta`.
    fn delta_second_derivatives(&self, theta: Theta) -> [[DMatrix<f64>; 2]; 2] {
        let se = theta.sigma_e_sq;
        let aa = self.weighted_outer(|m| 2.0 * tau_unchecked(theta, m).powi(3));
        let ae = self.weighted_outer(|m| 2.0 * tau_unchecked(theta, m).powi(3) / m);
        let ee = self.weighted_outer(|m| 2.0 * tau_unchecked(theta, m).powi(3) / (m * m))
            + &self.w_mat * (2.0 / (se * se * se));
        [[aa, ae.clone()], [ae, ee]]
    }

    fn rhs(&self, theta: Theta) -> DVector<f64> {
        let mut rhs = &self.w / theta.sigma_e_sq;
        for c in &self.stats.clusters {
            rhs.axpy(tau_unchecked(theta, c.m as f64) * c.ybar, &c.z, 1.0);
        }
        rhs
    }

    fn solve(&self, theta: Theta) -> Result<Solved> {
        theta.check()?;
        let delta = self.delta(theta);
        let chol = checked_cholesky(&delta).ok_or(Error::SingularDelta)?;
        let beta = chol.solve(&self.rhs(theta));
        Ok((beta, delta, chol))
    }
}

/// Profile estimator `beta_hat(theta)` together with `Delta(theta)`.
pub fn profile_beta(stats: &SufficientStats, theta: Theta) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (beta, delta, _) = ProfileSystem::new(stats).solve(theta)?;
    Ok((beta, delta))
}

/// Profile log-likelihood `l(beta_hat(theta), theta)`.
pub fn profile_loglik(stats: &SufficientStats, theta: Theta) -> Result<f64> {
    let (beta, _) = profile_beta(stats, theta)?;
    log_likelihood(stats, &ParameterVector::from_beta_theta(&beta, theta, stats.p_b))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// REML criterion `l(beta_hat(theta), theta) - log|Delta(theta)| / 2`.
pub fn reml_criterion(stats: &SufficientStats, theta: Theta) -> Result<f64> {
    let ps = ProfileSystem::new(stats);
    let (beta, _, chol) = ps.solve(theta)?;
    let l = log_likelihood(stats, &ParameterVector::from_beta_theta(&beta, theta, stats.p_b))?;
    Ok(l - 0.5 * log_det(&chol))
}

/// Adjusted log-likelihood `l(omega) - log|Delta(theta)| / 2`.
pub fn adjusted_loglik(stats: &SufficientStats, omega: &ParameterVector) -> Result<f64> {
    let l = log_likelihood(stats, omega)?;
    let delta = ProfileSystem::new(stats).delta(omega.theta());
    let chol = checked_cholesky(&delta).ok_or(Error::SingularDelta)?;
    Ok(l - 0.5 * log_det(&chol))
}

/// Score of the adjusted log-likelihood: the beta blocks equal the plain
/// score, the variance blocks carry `-trace(Delta^-1 dDelta) / 2`.
pub fn adjusted_score(stats: &SufficientStats, omega: &ParameterVector) -> Result<ScoreVector> {
    let plain = score(stats, omega)?;
    let layout = plain.layout();
    let ps = ProfileSystem::new(stats);
    let theta = omega.theta();
    let chol = checked_cholesky(&ps.delta(theta)).ok_or(Error::SingularDelta)?;
    let [da, de] = ps.delta_derivatives(theta);
    let mut values = plain.into_vector();
    values[layout.sigma_alpha()] -= 0.5 * chol.solve(&da).trace();
    values[layout.sigma_e()] -= 0.5 * chol.solve(&de).trace();
    Ok(ScoreVector::new(values, layout))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ml,
    Reml,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ml => "ml",
            Method::Reml => "reml",
        })
    }
}

/// Tuning knobs for the variance-component optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the Newton step infinity-norm (log scale) drops below this.
    pub step_tol: f64,
    /// Stop when the profiled gradient norm drops below this.
    pub grad_tol: f64,
    /// Variance floor as a fraction of the sample variance of `y`.
    pub boundary_rel: f64,
    /// Side length of the coarse log-grid used to look for a better start; 0 disables it.
    pub grid_points: usize,
    /// Half-width of the coarse grid around the moment start, in log units.
    pub grid_half_width: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tol: 1e-10,
            grad_tol: 1e-8,
            boundary_rel: 1e-8,
            grid_points: 11,
            grid_half_width: 100f64.ln(),
        }
    }
}

/// Outcome of an ML or REML fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub omega_hat: ParameterVector,
    pub method: Method,
    /// Interior stationary point reached: `score_norm < 1e-8 (1 + |objective|)`.
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the score (ML) or adjusted score (REML) at the estimate.
    pub score_norm: f64,
    /// Some variance component was clamped at the floor.
    pub boundary_flag: bool,
    pub sigma_alpha_sq_at_boundary: bool,
    pub sigma_e_sq_at_boundary: bool,
    /// Log-likelihood (constants dropped) at the estimate.
    pub loglik_at_opt: f64,
    /// Maximized criterion: the log-likelihood for ML, the REML criterion for REML.
    pub objective: f64,
    /// The grid restart found a distinct local maximum.
    pub multimodal: bool,
}

impl FitResult {
    /// A result wrapping a given parameter value, with no fit diagnostics.
    pub fn fixed(omega_hat: ParameterVector) -> Self {
        Self {
            omega_hat,
            method: Method::Ml,
            converged: true,
            iterations: 0,
            score_norm: 0.0,
            boundary_flag: false,
            sigma_alpha_sq_at_boundary: false,
            sigma_e_sq_at_boundary: false,
            loglik_at_opt: f64::NAN,
            objective: f64::NAN,
            multimodal: false,
        }
    }
}

pub fn fit_ml(ds: &ClusteredDataset) -> Result<FitResult> {
    fit(&ds.sufficient_stats(), Method::Ml, &FitOptions::default())
}

pub fn fit_reml(ds: &ClusteredDataset) -> Result<FitResult> {
    fit(&ds.sufficient_stats(), Method::Reml, &FitOptions::default())
}

/// Value, gradient and Hessian of a profiled objective in theta coordinates.
#[derive(Debug, Clone)]
struct ThetaEval {
    value: f64,
    grad: Vector2<f64>,
    hess: Matrix2<f64>,
}

fn evaluate(ps: &ProfileSystem<'_>, theta: Theta, method: Method) -> Result<ThetaEval> {
    let stats = ps.stats();
    let layout = stats.layout();
    let (beta, _, chol) = ps.solve(theta)?;
    let omega = ParameterVector::from_beta_theta(&beta, theta, stats.p_b);
    let mut value = log_likelihood(stats, &omega)?;
    let sc = score(stats, &omega)?;
    let jac = score_jacobian(stats, &omega)?.into_matrix();

    let idx = [layout.sigma_alpha(), layout.sigma_e()];
    let q = layout.n_beta();
    // J_{beta,theta}: columns are the two variance components.
    let mut cross = DMatrix::zeros(q, 2);
    for k in 0..q {
        for (c, &t) in idx.iter().enumerate() {
            cross[(k, c)] = jac[(layout.beta_index(k), t)];
        }
    }
    let solved = chol.solve(&cross);
    let correction = cross.transpose() * solved;
    let mut grad = Vector2::new(sc.as_vector()[idx[0]], sc.as_vector()[idx[1]]);
    let mut hess = Matrix2::new(
        jac[(idx[0], idx[0])],
        jac[(idx[0], idx[1])],
        jac[(idx[1], idx[0])],
        jac[(idx[1], idx[1])],
    );
    for a in 0..2 {
        for b in 0..2 {
            hess[(a, b)] += correction[(a, b)];
        }
    }

    if method == Method::Reml {
        value -= 0.5 * log_det(&chol);
        let first = ps.delta_derivatives(theta).map(|d| chol.solve(&d));
        let second = ps.delta_second_derivatives(theta);
        for a in 0..2 {
            grad[a] -= 0.5 * first[a].trace();
            for b in 0..2 {
                let tr2 = chol.solve(&second[a][b]).trace();
                let tr11 = (&first[a] * &first[b]).trace();
                hess[(a, b)] -= 0.5 * (tr2 - tr11);
            }
        }
    }
    Ok(ThetaEval { value, grad, hess })
}

fn theta_of(eta: Vector2<f64>) -> Theta {
    Theta::new(eta[0].exp(), eta[1].exp())
}

fn to_log_scale(eval: &ThetaEval, eta: Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
    let t = Vector2::new(eta[0].exp(), eta[1].exp());
    let g = eval.grad.component_mul(&t);
    let mut h = Matrix2::zeros();
    for a in 0..2 {
        for b in 0..2 {
            h[(a, b)] = t[a] * t[b] * eval.hess[(a, b)];
        }
        h[(a, a)] += g[a];
    }
    (g, h)
}

/// Ascent direction from a Hessian forced to be negative definite.
fn newton_direction(g: Vector2<f64>, h: Matrix2<f64>, free: [bool; 2]) -> Vector2<f64> {
    let free_idx: Vec<usize> = (0..2).filter(|&k| free[k]).collect();
    let mut d = Vector2::zeros();
    match free_idx.len() {
        0 => {}
        1 => {
            let k = free_idx[0];
            let curv = h[(k, k)];
            d[k] = if curv < 0.0 { -g[k] / curv } else { g[k] };
        }
        _ => {
            let eig = SymmetricEigen::new(h);
            let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            if !(scale > 0.0) {
                return g;
            }
            let floor = 1e-10 * scale;
            let mut step = Vector2::zeros();
            for k in 0..2 {
                let v = eig.eigenvectors.column(k);
                let lam = -eig.eigenvalues[k].abs().max(floor);
                step += v * (v.dot(&g) / -lam);
            }
            d = step;
        }
    }
    d
}

fn projected_grad(eval: &ThetaEval, eta: Vector2<f64>, floor: Vector2<f64>) -> Vector2<f64> {
    let mut p = eval.grad;
    for k in 0..2 {
        if eta[k] <= floor[k] + 1e-12 && eval.grad[k] < 0.0 {
            p[k] = 0.0;
        }
    }
    p
}

struct NewtonRun {
    eta: Vector2<f64>,
    eval: ThetaEval,
    iterations: usize,
}

fn newton(
    ps: &ProfileSystem<'_>,
    method: Method,
    start: Vector2<f64>,
    floor: Vector2<f64>,
    opts: &FitOptions,
) -> Result<NewtonRun> {
    let mut eta = start.sup(&floor);
    let mut eval = evaluate(ps, theta_of(eta), method)?;
    for iter in 1..=opts.max_iterations {
        let (g, h) = to_log_scale(&eval, eta);
        let at_floor = [eta[0] <= floor[0] + 1e-12, eta[1] <= floor[1] + 1e-12];
        let free = [!(at_floor[0] && g[0] < 0.0), !(at_floor[1] && g[1] < 0.0)];
        let projected = projected_grad(&eval, eta, floor);
        if projected.norm() < opts.grad_tol {
            return Ok(NewtonRun { eta, eval, iterations: iter - 1 });
        }
        let mut d = newton_direction(g, h, free);
        if g.dot(&d) <= 0.0 {
            d = Vector2::new(if free[0] { g[0] } else { 0.0 }, if free[1] { g[1] } else { 0.0 });
        }
        let big = d.amax();
        if big > 2.0 {
            d *= 2.0 / big;
        }

        let mut t = 1.0;
        let mut accepted = None;
        // Near the optimum the objective stops resolving ascent, so a step that
        // keeps the value within rounding and shrinks the gradient also counts.
        let noise = 1e-13 * (1.0 + eval.value.abs());
        while t > 1e-12 {
            let cand = (eta + d * t).sup(&floor);
            if let Ok(ev) = evaluate(ps, theta_of(cand), method) {
                let predicted = g.dot(&(cand - eta));
                let ascent = ev.value >= eval.value + 1e-4 * predicted;
                let flat = ev.value >= eval.value - noise
                    && projected_grad(&ev, cand, floor).norm() < 0.5 * projected.norm();
                if ev.value.is_finite() && (ascent || flat) {
                    accepted = Some((cand, ev));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, ev)) = accepted else {
            // No further ascent is possible at working precision.
            return Ok(NewtonRun { eta, eval, iterations: iter });
        };
        let step = (cand - eta).amax();
        eta = cand;
        eval = ev;
        if step < opts.step_tol {
            return Ok(NewtonRun { eta, eval, iterations: iter });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iterations,
    })
}

/// `S_w^x` must be nonsingular relative to the total sum of squares of the
/// within covariates; rounding alone leaves it slightly nonzero when a
/// covariate is constant within every cluster.
fn within_design_ok(stats: &SufficientStats) -> bool {
    let p_w = stats.p_w;
    if p_w == 0 {
        return true;
    }
    let mut total = stats.s_w_x.clone();
    for c in &stats.clusters {
        total.ger(c.m as f64, &c.xbar_w, &c.xbar_w, 1.0);
    }
    let scale = DVector::from_fn(p_w, |k, _| total[(k, k)].sqrt());
    if scale.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return false;
    }
    let normalized = DMatrix::from_fn(p_w, p_w, |a, b| stats.s_w_x[(a, b)] / (scale[a] * scale[b]));
    Cholesky::new(normalized)
        .is_some_and(|chol| chol.l_dirty().diagonal().iter().all(|d| d * d > 1e-12))
}

/// Method-of-moments starting values `(sigma_alpha_sq, sigma_e_sq)`.
pub fn moment_start(stats: &SufficientStats) -> Theta {
    let (n, g) = (stats.n as f64, stats.g as f64);
    let fallback = if stats.y_var > 0.0 { 0.5 * stats.y_var } else { 1.0 };
    let mut se = if stats.p_w == 0 {
        stats.s_w_y / (n - g)
    } else {
        match checked_cholesky(&stats.s_w_x) {
            Some(chol) if n - g - stats.p_w as f64 > 0.0 => {
                let b = chol.solve(&stats.s_w_xy);
                (stats.s_w_y - stats.s_w_xy.dot(&b)) / (n - g - stats.p_w as f64)
            }
            _ => fallback,
        }
    };
    if !(se > 0.0) || !se.is_finite() {
        se = fallback;
    }

    // Unweighted least squares of the cluster means on z.
    let q = 1 + stats.p_b + stats.p_w;
    let ybar = DVector::from_iterator(stats.g, stats.clusters.iter().map(|c| c.ybar));
    let mean_var = {
        let mean = ybar.mean();
        ybar.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (g - 1.0)
    };
    let mut between = mean_var;
    if stats.g > q {
        let mut ztz = DMatrix::zeros(q, q);
        let mut zty = DVector::zeros(q);
        for c in &stats.clusters {
            ztz.ger(1.0, &c.z, &c.z, 1.0);
            zty.axpy(c.ybar, &c.z, 1.0);
        }
        if let Some(chol) = checked_cholesky(&ztz) {
            let b = chol.solve(&zty);
            let rss: f64 = stats.mean_residuals(&b).iter().map(|r| r * r).sum();
            between = rss / (g - q as f64);
        }
    }
    let inv_m = stats.clusters.iter().map(|c| 1.0 / c.m as f64).sum::<f64>() / g;
    let sa = (between - se * inv_m).max(1e-4 * se);
    Theta::new(sa, se)
}

/// Fit by maximum likelihood or REML from sufficient statistics.
pub fn fit(stats: &SufficientStats, method: Method, opts: &FitOptions) -> Result<FitResult> {
    if !within_design_ok(stats) {
        return Err(Error::DegenerateWithinDesign);
    }
    let ps = ProfileSystem::new(stats);
    let start_theta = moment_start(stats);
    let scale = if stats.y_var > 0.0 && stats.y_var.is_finite() {
        stats.y_var
    } else {
        1.0
    };
    let floor_val = (opts.boundary_rel * scale).ln();
    let floor = Vector2::new(floor_val, floor_val);
    let start = Vector2::new(start_theta.sigma_alpha_sq.ln(), start_theta.sigma_e_sq.ln());

    // Delta is singular for every theta when the design is rank deficient.
    ps.solve(start_theta)?;

    let primary = newton(&ps, method, start, floor, opts);

    let mut best_grid: Option<(Vector2<f64>, f64)> = None;
    if opts.grid_points > 1 {
        let k = opts.grid_points;
        let offsets: Vec<f64> = (0..k)
            .map(|i| -opts.grid_half_width + 2.0 * opts.grid_half_width * i as f64 / (k - 1) as f64)
            .collect();
        for &da in &offsets {
            for &de in &offsets {
                let eta = (start + Vector2::new(da, de)).sup(&floor);
                if let Ok(ev) = evaluate(&ps, theta_of(eta), method) {
                    if ev.value.is_finite() && best_grid.as_ref().is_none_or(|(_, v)| ev.value > *v) {
                        best_grid = Some((eta, ev.value));
                    }
                }
            }
        }
    }

    let mut multimodal = false;
    let run = match (primary, best_grid) {
        (Ok(p), Some((eta_grid, v_grid))) if v_grid > p.eval.value => {
            match newton(&ps, method, eta_grid, floor, opts) {
                Ok(alt) => {
                    if (alt.eta - p.eta).amax() > 1e-4 && (alt.eval.value - p.eval.value).abs() > 1e-9 {
                        multimodal = true;
                    }
                    if alt.eval.value > p.eval.value {
                        NewtonRun {
                            iterations: p.iterations + alt.iterations,
                            ..alt
                        }
                    } else {
                        p
                    }
                }
                Err(_) => p,
            }
        }
        (Ok(p), _) => p,
        (Err(e), Some((eta_grid, _))) => newton(&ps, method, eta_grid, floor, opts).map_err(|_| e)?,
        (Err(e), None) => return Err(e),
    };

    let theta = theta_of(run.eta);
    let (beta, _, _) = ps.solve(theta)?;
    let omega_hat = ParameterVector::from_beta_theta(&beta, theta, stats.p_b);
    let loglik_at_opt = log_likelihood(stats, &omega_hat)?;
    let score_norm = match method {
        Method::Ml => score(stats, &omega_hat)?.norm(),
        Method::Reml => adjusted_score(stats, &omega_hat)?.norm(),
    };
    let sa_floor = run.eta[0] <= floor[0] + 1e-9;
    let se_floor = run.eta[1] <= floor[1] + 1e-9;
    let objective = run.eval.value;
    Ok(FitResult {
        omega_hat,
        method,
        converged: score_norm < 1e-8 * (1.0 + objective.abs()),
        iterations: run.iterations,
        score_norm,
        boundary_flag: sa_floor || se_floor,
        sigma_alpha_sq_at_boundary: sa_floor,
        sigma_e_sq_at_boundary: se_floor,
        loglik_at_opt,
        objective,
        multimodal,
    })
}
