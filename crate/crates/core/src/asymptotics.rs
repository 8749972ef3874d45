//! Increasing-cluster-size asymptotics.
//!
//! All matrices are indexed in parameter order `(beta0, beta1, sigma_alpha_sq,
//! beta2, sigma_e_sq)`. Between parameters are normalized by `g`, within
//! parameters by `n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{checked_cholesky, FitResult};
use crate::model::{ClusteredDataset, Layout, ParameterVector, SufficientStats, Theta};
use crate::normal::normal_quantile;

/// Diagonal normalization `K = diag(g, g 1_pb, g, n 1_pw, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationK {
    diag: DVector<f64>,
}

impl NormalizationK {
    pub fn new(layout: Layout, g: usize, n: usize) -> Self {
        let diag = DVector::from_fn(layout.dim(), |i, _| {
            if layout.is_between(i) {
                g as f64
            } else {
                n as f64
            }
        });
        Self { diag }
    }

    pub fn from_stats(stats: &SufficientStats) -> Self {
        Self::new(stats.layout(), stats.g, stats.n)
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    /// `K^{1/2} v`.
    pub fn scale(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.diag.map(f64::sqrt))
    }

    /// `K^{-1/2} M K^{-1/2}`.
    pub fn normalize(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.diag.map(|k| 1.0 / k.sqrt());
        DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| mat[(i, j)] * s[i] * s[j])
    }
}

/// Limits of the covariate moments: `c1 = E x_b`, `C2 = E x_b x_b'`, and
/// `C3` the limit of the pooled within-cluster covariance `S_w^x / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateLimits {
    pub c1: DVector<f64>,
    pub c2: DMatrix<f64>,
    pub c3: DMatrix<f64>,
}

impl CovariateLimits {
    pub fn new(c1: DVector<f64>, c2: DMatrix<f64>, c3: DMatrix<f64>) -> Result<Self> {
        let p_b = c1.len();
        if c2.shape() != (p_b, p_b) || !c3.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "c1 has length {}, C2 is {:?}, C3 is {:?}",
                p_b,
                c2.shape(),
                c3.shape()
            )));
        }
        if c1.iter().chain(c2.iter()).chain(c3.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("covariate limits".into()));
        }
        spd_inverse(&c2, "C2")?;
        spd_inverse(&c3, "C3")?;
        Ok(Self { c1, c2, c3 })
    }

    /// Plug-in values `g^-1 sum x_b`, `g^-1 sum x_b x_b'`, `S_w^x / n`.
    pub fn from_stats(stats: &SufficientStats) -> Result<Self> {
        let g = stats.g as f64;
        let mut c1 = DVector::zeros(stats.p_b);
        let mut c2 = DMatrix::zeros(stats.p_b, stats.p_b);
        for c in &stats.clusters {
            let xb = c.x_b(stats.p_b).into_owned();
            c1 += &xb;
            c2.ger(1.0, &xb, &xb, 1.0);
        }
        c1 /= g;
        c2 /= g;
        let c3 = &stats.s_w_x / stats.n as f64;
        Self::new(c1, c2, c3)
    }

    pub fn p_b(&self) -> usize {
        self.c1.len()
    }

    pub fn p_w(&self) -> usize {
        self.c3.nrows()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.p_b(), self.p_w())
    }

    /// Inverse of `[[1, c1'], [c1, C2]]`, returned as `(d, d1, D2)`.
    pub fn between_inverse(&self) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        if self.p_b() == 0 {
            return Ok((1.0, DVector::zeros(0), DMatrix::zeros(0, 0)));
        }
        let c2_inv = spd_inverse(&self.c2, "C2")?;
        let u = &c2_inv * &self.c1;
        let s = 1.0 - self.c1.dot(&u);
        if !(s > 1e-12) {
            return Err(Error::DegenerateBetweenDesign(s));
        }
        let d = 1.0 / s;
        let d1 = -&u / s;
        let d2 = &c2_inv + &u * u.transpose() / s;
        Ok((d, d1, d2))
    }

    fn between_moment(&self) -> DMatrix<f64> {
        let p = self.p_b() + 1;
        let mut m = DMatrix::zeros(p, p);
        m[(0, 0)] = 1.0;
        for k in 0..self.p_b() {
            m[(0, 1 + k)] = self.c1[k];
            m[(1 + k, 0)] = self.c1[k];
        }
        m.view_mut((1, 1), (self.p_b(), self.p_b())).copy_from(&self.c2);
        m
    }
}

/// Third and fourth moments of the random effect and the error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    pub mu3_alpha: f64,
    pub mu4_alpha: f64,
    pub mu3_e: f64,
    pub mu4_e: f64,
}

impl MomentEstimates {
    /// Gaussian moments at the given variances.
    pub fn normal(theta: Theta) -> Self {
        Self {
            mu3_alpha: 0.0,
            mu4_alpha: 3.0 * (theta.sigma_alpha_sq * theta.sigma_alpha_sq),
            mu3_e: 0.0,
            mu4_e: 3.0 * (theta.sigma_e_sq * theta.sigma_e_sq),
        }
    }
}

/// Limit covariance of `K^{1/2}(omega_hat - omega)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCovariance {
    pub c: DMatrix<f64>,
    pub d: f64,
    pub d1: DVector<f64>,
    pub d2: DMatrix<f64>,
}

fn spd_inverse(mat: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    if mat.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if (mat - mat.transpose()).amax() > 1e-12 * mat.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite(name));
    }
    checked_cholesky(mat)
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite(name))
}

/// Writes the between/within blocks shared by A, B and C.
fn assemble(
    layout: Layout,
    beta_between: &DMatrix<f64>,
    sa: f64,
    beta_within: &DMatrix<f64>,
    se: f64,
) -> DMatrix<f64> {
    let dim = layout.dim();
    let mut out = DMatrix::zeros(dim, dim);
    let nb = layout.p_b + 1;
    out.view_mut((0, 0), (nb, nb)).copy_from(beta_between);
    out[(layout.sigma_alpha(), layout.sigma_alpha())] = sa;
    let w0 = layout.sigma_alpha() + 1;
    out.view_mut((w0, w0), (layout.p_w, layout.p_w)).copy_from(beta_within);
    out[(layout.sigma_e(), layout.sigma_e())] = se;
    out
}

/// Covariance of the normalized score in the limit.
pub fn matrix_a(limits: &CovariateLimits, theta_dot: Theta, moments: &MomentEstimates) -> Result<DMatrix<f64>> {
    theta_dot.check()?;
    let (sa, se) = (theta_dot.sigma_alpha_sq, theta_dot.sigma_e_sq);
    let layout = limits.layout();
    // Normal part plus excess-kurtosis correction, so A == B bitwise under normality.
    let (sa2, se2) = (sa * sa, se * se);
    let mut a = assemble(
        layout,
        &(limits.between_moment() / sa),
        1.0 / (2.0 * sa2) + (moments.mu4_alpha - 3.0 * sa2) / (4.0 * sa2 * sa2),
        &(&limits.c3 / se),
        1.0 / (2.0 * se2) + (moments.mu4_e - 3.0 * se2) / (4.0 * se2 * se2),
    );
    let skew = moments.mu3_alpha / (2.0 * sa.powi(3));
    let ia = layout.sigma_alpha();
    a[(0, ia)] = skew;
    a[(ia, 0)] = skew;
    for k in 0..layout.p_b {
        a[(1 + k, ia)] = limits.c1[k] * skew;
        a[(ia, 1 + k)] = limits.c1[k] * skew;
    }
    Ok(a)
}

/// Limit of the normalized expected information.
pub fn matrix_b(limits: &CovariateLimits, theta_dot: Theta) -> Result<DMatrix<f64>> {
    theta_dot.check()?;
    let (sa, se) = (theta_dot.sigma_alpha_sq, theta_dot.sigma_e_sq);
    Ok(assemble(
        limits.layout(),
        &(limits.between_moment() / sa),
        1.0 / (2.0 * (sa * sa)),
        &(&limits.c3 / se),
        1.0 / (2.0 * (se * se)),
    ))
}

/// Finite-sample normalized information `-K^{-1/2} E grad psi(omega) K^{-1/2}`.
pub fn matrix_bn(stats: &SufficientStats, theta_dot: Theta) -> Result<DMatrix<f64>> {
    theta_dot.check()?;
    let layout = stats.layout();
    let (p_b, p_w) = (stats.p_b, stats.p_w);
    let (g, n) = (stats.g as f64, stats.n as f64);
    let se = theta_dot.sigma_e_sq;
    let taus = stats.taus(theta_dot);
    let gn = (g * n).sqrt();

    let nb = p_b + 1;
    let mut bb = DMatrix::zeros(nb, nb);
    let mut f_h = DMatrix::zeros(nb, p_w);
    let mut p = DMatrix::zeros(p_w, p_w);
    let (mut saa, mut q_sum, mut r_sum) = (0.0, 0.0, 0.0);
    for (c, &t) in stats.clusters.iter().zip(&taus) {
        let zb = c.z.rows(0, nb);
        bb.ger(t / g, &zb, &zb, 1.0);
        f_h.ger(t / gn, &zb, &c.xbar_w, 1.0);
        p.ger(t / n, &c.xbar_w, &c.xbar_w, 1.0);
        let m = c.m as f64;
        saa += t * t / (2.0 * g);
        q_sum += t * t / (m * m);
        r_sum += t * t / m;
    }
    let ww = &stats.s_w_x / (n * se) + p;
    let q = q_sum / (2.0 * n) + (n - g) / (2.0 * n * se * se);
    let r = r_sum / (4.0 * g * n).sqrt();

    let mut out = assemble(layout, &bb, saa, &ww, q);
    let w0 = layout.sigma_alpha() + 1;
    out.view_mut((0, w0), (nb, p_w)).copy_from(&f_h);
    out.view_mut((w0, 0), (p_w, nb)).copy_from(&f_h.transpose());
    let (ia, ie) = (layout.sigma_alpha(), layout.sigma_e());
    out[(ia, ie)] = r;
    out[(ie, ia)] = r;
    Ok(out)
}

/// Limit covariance `C = B^-1 A B^-1` in closed form.
pub fn matrix_c(
    limits: &CovariateLimits,
    theta_dot: Theta,
    moments: &MomentEstimates,
) -> Result<AsymptoticCovariance> {
    theta_dot.check()?;
    let (sa, se) = (theta_dot.sigma_alpha_sq, theta_dot.sigma_e_sq);
    let layout = limits.layout();
    let (d, d1, d2) = limits.between_inverse()?;
    let nb = layout.p_b + 1;
    let mut between = DMatrix::zeros(nb, nb);
    between[(0, 0)] = d;
    for k in 0..layout.p_b {
        between[(0, 1 + k)] = d1[k];
        between[(1 + k, 0)] = d1[k];
    }
    between.view_mut((1, 1), (layout.p_b, layout.p_b)).copy_from(&d2);
    between *= sa;
    let within = spd_inverse(&limits.c3, "C3")? * se;
    let mut c = assemble(layout, &between, moments.mu4_alpha - sa * sa, &within, moments.mu4_e - se * se);
    let ia = layout.sigma_alpha();
    c[(0, ia)] = moments.mu3_alpha;
    c[(ia, 0)] = moments.mu3_alpha;
    Ok(AsymptoticCovariance { c, d, d1, d2 })
}

/// A single observation at which to evaluate the influence function.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluencePoint {
    pub alpha: f64,
    pub e: f64,
    pub x_b: DVector<f64>,
    /// Within covariate minus its cluster mean.
    pub x_w_dev: DVector<f64>,
}

/// Influence function of the estimator, in parameter order.
pub fn influence(point: &InfluencePoint, limits: &CovariateLimits, theta_dot: Theta) -> Result<DVector<f64>> {
    theta_dot.check()?;
    let layout = limits.layout();
    if point.x_b.len() != layout.p_b || point.x_w_dev.len() != layout.p_w {
        return Err(Error::DimensionMismatch(format!(
            "influence point has ({}, {}) covariates, limits have ({}, {})",
            point.x_b.len(),
            point.x_w_dev.len(),
            layout.p_b,
            layout.p_w
        )));
    }
    let mut out = DVector::zeros(layout.dim());
    let alpha = point.alpha;
    if layout.p_b == 0 {
        out[0] = alpha;
    } else {
        let c2_inv = spd_inverse(&limits.c2, "C2")?;
        let u = &c2_inv * &limits.c1;
        let s = 1.0 - limits.c1.dot(&u);
        if !(s > 1e-12) {
            return Err(Error::DegenerateBetweenDesign(s));
        }
        let lead = (1.0 - u.dot(&point.x_b)) / s;
        out[0] = lead * alpha;
        let b1 = (&c2_inv * &point.x_b - &u * lead) * alpha;
        out.rows_mut(1, layout.p_b).copy_from(&b1);
    }
    out[layout.sigma_alpha()] = alpha * alpha - theta_dot.sigma_alpha_sq;
    if layout.p_w > 0 {
        let b2 = spd_inverse(&limits.c3, "C3")? * &point.x_w_dev * point.e;
        out.rows_mut(layout.sigma_alpha() + 1, layout.p_w).copy_from(&b2);
    }
    out[layout.sigma_e()] = point.e * point.e - theta_dot.sigma_e_sq;
    Ok(out)
}

/// Plug-in third and fourth moments from cluster-mean and within-cluster residuals.
pub fn estimate_moments(ds: &ClusteredDataset, stats: &SufficientStats, fit: &FitResult) -> MomentEstimates {
    let omega = &fit.omega_hat;
    let resid = stats.mean_residuals(&omega.beta());
    let g = resid.len() as f64;
    let mu3_alpha = resid.iter().map(|r| r.powi(3)).sum::<f64>() / g;
    let mu4_alpha = resid.iter().map(|r| r.powi(4)).sum::<f64>() / g;

    let (mut s3, mut s4) = (0.0, 0.0);
    for (c, summary) in ds.clusters().iter().zip(&stats.clusters) {
        for (j, &y) in c.y.iter().enumerate() {
            let mut e = y - summary.ybar;
            for (k, b) in omega.beta2.iter().enumerate() {
                e -= (c.x_w[(j, k)] - summary.xbar_w[k]) * b;
            }
            s3 += e.powi(3);
            s4 += e.powi(4);
        }
    }
    let n = stats.n as f64;
    MomentEstimates {
        mu3_alpha,
        mu4_alpha,
        mu3_e: s3 / n,
        mu4_e: s4 / n,
    }
}

/// Whether an interval is the standard construction or one of the
/// `beta0` / `sigma_e_sq` extensions built the same way from `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalSource {
    Standard,
    Extension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub parameter: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub source: IntervalSource,
    /// Fourth-moment plug-in below `sigma^4`; the interval collapses to the estimate.
    pub degenerate: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn symmetric(parameter: String, estimate: f64, half: f64, source: IntervalSource) -> ConfidenceInterval {
    ConfidenceInterval {
        parameter,
        estimate,
        lower: estimate - half,
        upper: estimate + half,
        source,
        degenerate: false,
    }
}

/// Log-scale interval for a standard deviation and its square.
fn log_scale(
    name: &str,
    var_hat: f64,
    mu4: f64,
    count: f64,
    z: f64,
    source: IntervalSource,
) -> [ConfidenceInterval; 2] {
    let sd = var_hat.sqrt();
    let excess = mu4 - var_hat * var_hat;
    let degenerate = !(excess >= 0.0);
    let h = if degenerate {
        0.0
    } else {
        excess.sqrt() / (2.0 * count.sqrt() * var_hat)
    };
    let (lo, hi) = (sd * (-z * h).exp(), sd * (z * h).exp());
    [
        ConfidenceInterval {
            parameter: name.to_string(),
            estimate: sd,
            lower: lo,
            upper: hi,
            source,
            degenerate,
        },
        ConfidenceInterval {
            parameter: format!("{name}_sq"),
            estimate: var_hat,
            lower: if degenerate { var_hat } else { lo * lo },
            upper: if degenerate { var_hat } else { hi * hi },
            source,
            degenerate,
        },
    ]
}

/// Confidence intervals from explicit ingredients.
///
/// Order: `beta0`, `beta1_k`, `sigma_alpha`, `sigma_alpha_sq`, `beta2_r`,
/// `sigma_e`, `sigma_e_sq`.
pub fn intervals_from_parts(
    omega_hat: &ParameterVector,
    limits: &CovariateLimits,
    moments: &MomentEstimates,
    gamma: f64,
    g: usize,
    n: usize,
) -> Result<Vec<ConfidenceInterval>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    omega_hat.check_layout(limits.p_b(), limits.p_w())?;
    let theta = omega_hat.theta();
    theta.check()?;
    let z = normal_quantile(1.0 - gamma / 2.0);
    let (g, n) = (g as f64, n as f64);
    let (d, _, d2) = limits.between_inverse()?;
    let sa = theta.sigma_alpha_sq.sqrt();
    let se = theta.sigma_e_sq.sqrt();

    let mut out = Vec::with_capacity(omega_hat.len() + 2);
    out.push(symmetric(
        "beta0".into(),
        omega_hat.beta0,
        z * sa * d.sqrt() / g.sqrt(),
        IntervalSource::Extension,
    ));
    for (k, &b) in omega_hat.beta1.iter().enumerate() {
        out.push(symmetric(
            format!("beta1_{}", k + 1),
            b,
            z * sa * d2[(k, k)].sqrt() / g.sqrt(),
            IntervalSource::Standard,
        ));
    }
    out.extend(log_scale(
        "sigma_alpha",
        theta.sigma_alpha_sq,
        moments.mu4_alpha,
        g,
        z,
        IntervalSource::Standard,
    ));
    let c3_inv = spd_inverse(&limits.c3, "C3")?;
    for (r, &b) in omega_hat.beta2.iter().enumerate() {
        out.push(symmetric(
            format!("beta2_{}", r + 1),
            b,
            z * se * c3_inv[(r, r)].sqrt() / n.sqrt(),
            IntervalSource::Standard,
        ));
    }
    out.extend(log_scale(
        "sigma_e",
        theta.sigma_e_sq,
        moments.mu4_e,
        n,
        z,
        IntervalSource::Extension,
    ));
    Ok(out)
}

/// Confidence intervals at level `1 - gamma` for a fitted model.
pub fn confidence_intervals(
    stats: &SufficientStats,
    fit: &FitResult,
    moments: &MomentEstimates,
    gamma: f64,
) -> Result<Vec<ConfidenceInterval>> {
    let limits = CovariateLimits::from_stats(stats)?;
    intervals_from_parts(&fit.omega_hat, &limits, moments, gamma, stats.g, stats.n)
}
