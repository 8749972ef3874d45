//! Closed-form log-likelihood, score, score Jacobian and expected score
//! Jacobian of the nested error regression model, all written in terms of
//! [`SufficientStats`].

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::model::{Layout, ParameterVector, SufficientStats};

/// Score (estimating function) in `(beta0, beta1, sigma_alpha_sq, beta2, sigma_e_sq)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    values: DVector<f64>,
    layout: Layout,
}

impl ScoreVector {
    pub(crate) fn new(values: DVector<f64>, layout: Layout) -> Self {
        Self { values, layout }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.values
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn l_beta0(&self) -> f64 {
        self.values[0]
    }

    pub fn l_beta1(&self) -> &[f64] {
        &self.values.as_slice()[1..1 + self.layout.p_b]
    }

    pub fn l_sigma_alpha_sq(&self) -> f64 {
        self.values[self.layout.sigma_alpha()]
    }

    pub fn l_beta2(&self) -> &[f64] {
        let start = self.layout.sigma_alpha() + 1;
        &self.values.as_slice()[start..start + self.layout.p_w]
    }

    pub fn l_sigma_e_sq(&self) -> f64 {
        self.values[self.layout.sigma_e()]
    }

    /// Between-cluster part `(l_beta0, l_beta1, l_sigma_alpha_sq)`.
    pub fn between(&self) -> &[f64] {
        &self.values.as_slice()[..self.layout.n_between()]
    }

    /// Within-cluster part `(l_beta2, l_sigma_e_sq)`.
    pub fn within(&self) -> &[f64] {
        &self.values.as_slice()[self.layout.n_between()..]
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
}

/// Derivative of the score, rows and columns in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreJacobian {
    matrix: DMatrix<f64>,
    layout: Layout,
}

impl ScoreJacobian {
    pub(crate) fn new(matrix: DMatrix<f64>, layout: Layout) -> Self {
        Self { matrix, layout }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn bb(&self) -> DMatrixView<'_, f64> {
        let nb = self.layout.n_between();
        self.matrix.view((0, 0), (nb, nb))
    }

    pub fn bw(&self) -> DMatrixView<'_, f64> {
        let nb = self.layout.n_between();
        let nw = self.layout.p_w + 1;
        self.matrix.view((0, nb), (nb, nw))
    }

    pub fn wb(&self) -> DMatrixView<'_, f64> {
        let nb = self.layout.n_between();
        let nw = self.layout.p_w + 1;
        self.matrix.view((nb, 0), (nw, nb))
    }

    pub fn ww(&self) -> DMatrixView<'_, f64> {
        let nb = self.layout.n_between();
        let nw = self.layout.p_w + 1;
        self.matrix.view((nb, nb), (nw, nw))
    }
}

fn prepare(stats: &SufficientStats, omega: &ParameterVector) -> Result<Layout> {
    omega.check_layout(stats.p_b, stats.p_w)?;
    Ok(stats.layout())
}

/// Log-likelihood with constant terms dropped.
pub fn log_likelihood(stats: &SufficientStats, omega: &ParameterVector) -> Result<f64> {
    prepare(stats, omega)?;
    let theta = omega.theta();
    let beta = omega.beta();
    let beta2 = DVector::from_column_slice(&omega.beta2);
    let residuals = stats.mean_residuals(&beta);
    let mut sum_log_tau = 0.0;
    let mut weighted_rss = 0.0;
    for (c, r) in stats.clusters.iter().zip(&residuals) {
        let t = crate::model::tau_unchecked(theta, c.m as f64);
        sum_log_tau += t.ln();
        weighted_rss += t * r * r;
    }
    let df_within = (stats.n - stats.g) as f64;
    Ok(0.5 * sum_log_tau
        - 0.5 * df_within * theta.sigma_e_sq.ln()
        - stats.within_quadratic(&beta2) / (2.0 * theta.sigma_e_sq)
        - 0.5 * weighted_rss)
}

/// Score vector (gradient of [`log_likelihood`]).
pub fn score(stats: &SufficientStats, omega: &ParameterVector) -> Result<ScoreVector> {
    let layout = prepare(stats, omega)?;
    let theta = omega.theta();
    let se = theta.sigma_e_sq;
    let beta = omega.beta();
    let beta2 = DVector::from_column_slice(&omega.beta2);
    let residuals = stats.mean_residuals(&beta);

    let mut l_beta = DVector::zeros(layout.n_beta());
    let mut l_sa = 0.0;
    let mut l_se = -((stats.n - stats.g) as f64) / (2.0 * se) + stats.within_quadratic(&beta2) / (2.0 * se * se);
    for (c, &r) in stats.clusters.iter().zip(&residuals) {
        let m = c.m as f64;
        let t = crate::model::tau_unchecked(theta, m);
        l_beta.axpy(t * r, &c.z, 1.0);
        l_sa += -0.5 * t + 0.5 * t * t * r * r;
        l_se += -0.5 * t / m + 0.5 * t * t * r * r / m;
    }
    if layout.p_w > 0 {
        let within = (&stats.s_w_xy - &stats.s_w_x * &beta2) / se;
        let start = 1 + layout.p_b;
        for k in 0..layout.p_w {
            l_beta[start + k] += within[k];
        }
    }

    let mut values = DVector::zeros(layout.dim());
    for k in 0..layout.n_beta() {
        values[layout.beta_index(k)] = l_beta[k];
    }
    values[layout.sigma_alpha()] = l_sa;
    values[layout.sigma_e()] = l_se;
    Ok(ScoreVector::new(values, layout))
}

/// Residual summaries that determine the score Jacobian: observed values for
/// the Jacobian itself, expectations under a true parameter for its mean.
struct ResidualMoments {
    /// `ybar_i - z_i' beta`, or its expectation.
    first: Vec<f64>,
    /// `(ybar_i - z_i' beta)^2`, or its expectation.
    second: Vec<f64>,
    /// `S_w^xy - S_w^x beta2`, or its expectation.
    within_linear: DVector<f64>,
    /// `S_w^y - 2 S_w^xy' beta2 + beta2' S_w^x beta2`, or its expectation.
    within_quadratic: f64,
}

fn jacobian_from_moments(stats: &SufficientStats, omega: &ParameterVector, mom: &ResidualMoments) -> DMatrix<f64> {
    let layout = stats.layout();
    let theta = omega.theta();
    let se = theta.sigma_e_sq;
    let q = layout.n_beta();
    let (ia, ie) = (layout.sigma_alpha(), layout.sigma_e());
    let mut beta_beta = DMatrix::zeros(q, q);
    let mut beta_sa = DVector::zeros(q);
    let mut beta_se = DVector::zeros(q);
    let (mut sa_sa, mut sa_se, mut se_se) = (0.0, 0.0, 0.0);

    for (i, c) in stats.clusters.iter().enumerate() {
        let m = c.m as f64;
        let t = crate::model::tau_unchecked(theta, m);
        let (t2, t3) = (t * t, t * t * t);
        let (r1, r2) = (mom.first[i], mom.second[i]);
        beta_beta.ger(-t, &c.z, &c.z, 1.0);
        beta_sa.axpy(-t2 * r1, &c.z, 1.0);
        beta_se.axpy(-t2 * r1 / m, &c.z, 1.0);
        sa_sa += 0.5 * t2 - t3 * r2;
        sa_se += 0.5 * t2 / m - t3 * r2 / m;
        se_se += 0.5 * t2 / (m * m) - t3 * r2 / (m * m);
    }
    se_se += (stats.n - stats.g) as f64 / (2.0 * se * se) - mom.within_quadratic / (se * se * se);
    if layout.p_w > 0 {
        let start = 1 + layout.p_b;
        for a in 0..layout.p_w {
            for b in 0..layout.p_w {
                beta_beta[(start + a, start + b)] -= stats.s_w_x[(a, b)] / se;
            }
            beta_se[start + a] -= mom.within_linear[a] / (se * se);
        }
    }

    let mut jac = DMatrix::zeros(layout.dim(), layout.dim());
    for a in 0..q {
        let ra = layout.beta_index(a);
        for b in 0..q {
            jac[(ra, layout.beta_index(b))] = beta_beta[(a, b)];
        }
        jac[(ra, ia)] = beta_sa[a];
        jac[(ia, ra)] = beta_sa[a];
        jac[(ra, ie)] = beta_se[a];
        jac[(ie, ra)] = beta_se[a];
    }
    jac[(ia, ia)] = sa_sa;
    jac[(ia, ie)] = sa_se;
    jac[(ie, ia)] = sa_se;
    jac[(ie, ie)] = se_se;
    jac
}

fn observed_moments(stats: &SufficientStats, omega: &ParameterVector) -> ResidualMoments {
    let beta = omega.beta();
    let beta2 = DVector::from_column_slice(&omega.beta2);
    let first = stats.mean_residuals(&beta);
    let second = first.iter().map(|r| r * r).collect();
    ResidualMoments {
        first,
        second,
        within_linear: &stats.s_w_xy - &stats.s_w_x * &beta2,
        within_quadratic: stats.within_quadratic(&beta2),
    }
}

/// Jacobian of the score at a common parameter value.
pub fn score_jacobian(stats: &SufficientStats, omega: &ParameterVector) -> Result<ScoreJacobian> {
    let layout = prepare(stats, omega)?;
    let mom = observed_moments(stats, omega);
    Ok(ScoreJacobian::new(jacobian_from_moments(stats, omega, &mom), layout))
}

/// Jacobian whose k-th row is evaluated at `rows[k]`.
pub fn score_jacobian_rows(stats: &SufficientStats, rows: &[ParameterVector]) -> Result<ScoreJacobian> {
    let layout = stats.layout();
    if rows.len() != layout.dim() {
        return Err(Error::DimensionMismatch(format!(
            "need {} parameter rows, got {}",
            layout.dim(),
            rows.len()
        )));
    }
    let mut jac = DMatrix::zeros(layout.dim(), layout.dim());
    for (k, omega) in rows.iter().enumerate() {
        let full = score_jacobian(stats, omega)?;
        jac.set_row(k, &full.matrix.row(k));
    }
    Ok(ScoreJacobian::new(jac, layout))
}

/// Expected score Jacobian at `omega` when the data are generated under
/// `omega_dot`, with the covariates held fixed.
pub fn expected_score_jacobian(
    stats: &SufficientStats,
    omega: &ParameterVector,
    omega_dot: &ParameterVector,
) -> Result<ScoreJacobian> {
    let layout = prepare(stats, omega)?;
    prepare(stats, omega_dot)?;
    let theta_dot = omega_dot.theta();
    let diff = omega_dot.beta() - omega.beta();
    let diff2 = DVector::from_column_slice(&omega_dot.beta2) - DVector::from_column_slice(&omega.beta2);
    let first: Vec<f64> = stats.clusters.iter().map(|c| c.z.dot(&diff)).collect();
    let second = stats
        .clusters
        .iter()
        .zip(&first)
        .map(|(c, d)| d * d + 1.0 / crate::model::tau_unchecked(theta_dot, c.m as f64))
        .collect();
    let within_linear = &stats.s_w_x * &diff2;
    let within_quadratic = within_linear.dot(&diff2) + (stats.n - stats.g) as f64 * theta_dot.sigma_e_sq;
    let mom = ResidualMoments {
        first,
        second,
        within_linear,
        within_quadratic,
    };
    Ok(ScoreJacobian::new(jacobian_from_moments(stats, omega, &mom), layout))
}
