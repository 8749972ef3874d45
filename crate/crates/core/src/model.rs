//! Clustered data, the parameter vector and the sufficient statistics.
//!
//! Everything downstream (likelihood, fitting, asymptotics) works from a
//! [`SufficientStats`] value; the raw [`ClusteredDataset`] is only needed for
//! unit-level quantities such as within-cluster residual moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cluster: a response vector, its cluster-level (between) covariates and
/// the unit-level (within) covariate matrix with one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub y: Vec<f64>,
    pub x_b: Vec<f64>,
    pub x_w: DMatrix<f64>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x_b: Vec<f64>, x_w: DMatrix<f64>) -> Self {
        Self {
            id: id.into(),
            y,
            x_b,
            x_w,
        }
    }

    /// Cluster with no covariates at all.
    pub fn response_only(id: impl Into<String>, y: Vec<f64>) -> Self {
        let m = y.len();
        Self::new(id, y, Vec::new(), DMatrix::zeros(m, 0))
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }
}

/// A validated collection of clusters sharing the same covariate layout.
///
/// Construction goes through [`ClusteredDataset::new`], which enforces
/// `g >= 2`, `m_i >= 1`, `n > g`, consistent covariate shapes and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    p_b: usize,
    p_w: usize,
    n: usize,
    m_min: usize,
}

impl ClusteredDataset {
    pub fn new(clusters: Vec<Cluster>, p_b: usize, p_w: usize) -> Result<Self> {
        validate_dataset(clusters, p_b, p_w)
    }

    /// Convenience constructor for data without covariates.
    pub fn from_responses(groups: Vec<Vec<f64>>) -> Result<Self> {
        let clusters = groups
            .into_iter()
            .enumerate()
            .map(|(i, y)| Cluster::response_only(format!("c{}", i + 1), y))
            .collect();
        Self::new(clusters, 0, 0)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn into_clusters(self) -> Vec<Cluster> {
        self.clusters
    }

    pub fn p_b(&self) -> usize {
        self.p_b
    }

    pub fn p_w(&self) -> usize {
        self.p_w
    }

    /// Number of clusters.
    pub fn g(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of units.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Smallest cluster size.
    pub fn m_min(&self) -> usize {
        self.m_min
    }

    /// Length of the parameter vector `(beta0, beta1, sigma_alpha_sq, beta2, sigma_e_sq)`.
    pub fn n_params(&self) -> usize {
        self.p_b + self.p_w + 3
    }

    /// Replace every response by `a * y + b`.
    pub fn affine_response(&self, a: f64, b: f64) -> Result<Self> {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.y.iter_mut().for_each(|v| *v = a * *v + b);
                c
            })
            .collect();
        Self::new(clusters, self.p_b, self.p_w)
    }

    /// Subtract cluster means from every within covariate. With
    /// `add_contextual`, the pre-centering cluster means are appended to the
    /// between covariates, so `p_b` grows by `p_w`.
    pub fn center_within_covariates(&self, add_contextual: bool) -> Result<Self> {
        if self.p_w == 0 {
            return Err(Error::NoWithinCovariates);
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let means = column_means(&c.x_w);
                let mut x_w = c.x_w.clone();
                for mut row in x_w.row_iter_mut() {
                    for (k, v) in row.iter_mut().enumerate() {
                        *v -= means[k];
                    }
                }
                let mut x_b = c.x_b.clone();
                if add_contextual {
                    x_b.extend(means.iter().copied());
                }
                Cluster::new(c.id.clone(), c.y.clone(), x_b, x_w)
            })
            .collect();
        let p_b = if add_contextual {
            self.p_b + self.p_w
        } else {
            self.p_b
        };
        Self::new(clusters, p_b, self.p_w)
    }

    pub fn sufficient_stats(&self) -> SufficientStats {
        SufficientStats::from_dataset(self)
    }
}

/// Checks every dataset invariant and caches `n` and the minimum cluster size.
pub fn validate_dataset(clusters: Vec<Cluster>, p_b: usize, p_w: usize) -> Result<ClusteredDataset> {
    let g = clusters.len();
    let n: usize = clusters.iter().map(Cluster::size).sum();
    if g < 2 || n <= g {
        return Err(Error::EmptyDataset { g, n });
    }
    let mut m_min = usize::MAX;
    for c in &clusters {
        let m = c.size();
        if m == 0 {
            return Err(Error::EmptyDataset { g, n });
        }
        m_min = m_min.min(m);
        if c.x_b.len() != p_b {
            return Err(Error::RaggedCovariates(format!(
                "cluster {:?} has {} between covariates, expected {}",
                c.id,
                c.x_b.len(),
                p_b
            )));
        }
        if c.x_w.nrows() != m || c.x_w.ncols() != p_w {
            return Err(Error::RaggedCovariates(format!(
                "cluster {:?} within covariates are {}x{}, expected {}x{}",
                c.id,
                c.x_w.nrows(),
                c.x_w.ncols(),
                m,
                p_w
            )));
        }
        if c.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("response in cluster {:?}", c.id)));
        }
        if c.x_b.iter().chain(c.x_w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("covariate in cluster {:?}", c.id)));
        }
    }
    Ok(ClusteredDataset {
        clusters,
        p_b,
        p_w,
        n,
        m_min,
    })
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let m = x.nrows() as f64;
    x.column_iter().map(|col| col.sum() / m).collect()
}

/// Variance components `(sigma_alpha_sq, sigma_e_sq)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub sigma_alpha_sq: f64,
    pub sigma_e_sq: f64,
}

impl Theta {
    pub fn new(sigma_alpha_sq: f64, sigma_e_sq: f64) -> Self {
        Self {
            sigma_alpha_sq,
            sigma_e_sq,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.sigma_alpha_sq > 0.0 && self.sigma_e_sq > 0.0 {
            Ok(())
        } else {
            Err(Error::NonPositiveVariance {
                sigma_alpha_sq: self.sigma_alpha_sq,
                sigma_e_sq: self.sigma_e_sq,
            })
        }
    }
}

/// Cluster precision weight `m / (sigma_e_sq + m * sigma_alpha_sq)`.
pub fn tau(theta: Theta, m: usize) -> Result<f64> {
    theta.check()?;
    Ok(tau_unchecked(theta, m as f64))
}

#[inline]
pub(crate) fn tau_unchecked(theta: Theta, m: f64) -> f64 {
    m / (theta.sigma_e_sq + m * theta.sigma_alpha_sq)
}

/// Model parameters in the between/within grouping
/// `(beta0, beta1, sigma_alpha_sq, beta2, sigma_e_sq)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub sigma_alpha_sq: f64,
    pub beta2: Vec<f64>,
    pub sigma_e_sq: f64,
}

impl ParameterVector {
    pub fn new(beta0: f64, beta1: Vec<f64>, sigma_alpha_sq: f64, beta2: Vec<f64>, sigma_e_sq: f64) -> Self {
        Self {
            beta0,
            beta1,
            sigma_alpha_sq,
            beta2,
            sigma_e_sq,
        }
    }

    pub fn p_b(&self) -> usize {
        self.beta1.len()
    }

    pub fn p_w(&self) -> usize {
        self.beta2.len()
    }

    pub fn len(&self) -> usize {
        self.p_b() + self.p_w() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn theta(&self) -> Theta {
        Theta::new(self.sigma_alpha_sq, self.sigma_e_sq)
    }

    /// Regression coefficients stacked as `(beta0, beta1, beta2)`.
    pub fn beta(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(1 + self.p_b() + self.p_w());
        v.push(self.beta0);
        v.extend_from_slice(&self.beta1);
        v.extend_from_slice(&self.beta2);
        DVector::from_vec(v)
    }

    pub fn from_beta_theta(beta: &DVector<f64>, theta: Theta, p_b: usize) -> Self {
        let p_w = beta.len() - 1 - p_b;
        Self {
            beta0: beta[0],
            beta1: beta.rows(1, p_b).iter().copied().collect(),
            sigma_alpha_sq: theta.sigma_alpha_sq,
            beta2: beta.rows(1 + p_b, p_w).iter().copied().collect(),
            sigma_e_sq: theta.sigma_e_sq,
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.beta0);
        v.extend_from_slice(&self.beta1);
        v.push(self.sigma_alpha_sq);
        v.extend_from_slice(&self.beta2);
        v.push(self.sigma_e_sq);
        DVector::from_vec(v)
    }

    pub fn from_flat(flat: &[f64], p_b: usize, p_w: usize) -> Result<Self> {
        if flat.len() != p_b + p_w + 3 {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                p_b + p_w + 3
            )));
        }
        Ok(Self {
            beta0: flat[0],
            beta1: flat[1..1 + p_b].to_vec(),
            sigma_alpha_sq: flat[1 + p_b],
            beta2: flat[2 + p_b..2 + p_b + p_w].to_vec(),
            sigma_e_sq: flat[2 + p_b + p_w],
        })
    }

    pub(crate) fn check_layout(&self, p_b: usize, p_w: usize) -> Result<()> {
        if self.p_b() != p_b || self.p_w() != p_w {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has p_b = {}, p_w = {}; data has p_b = {}, p_w = {}",
                self.p_b(),
                self.p_w(),
                p_b,
                p_w
            )));
        }
        self.theta().check()
    }
}

/// Position bookkeeping for the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p_b: usize,
    pub p_w: usize,
}

impl Layout {
    pub fn new(p_b: usize, p_w: usize) -> Self {
        Self { p_b, p_w }
    }

    /// Full parameter count `p_b + p_w + 3`.
    pub fn dim(&self) -> usize {
        self.p_b + self.p_w + 3
    }

    /// Regression coefficient count `1 + p_b + p_w`.
    pub fn n_beta(&self) -> usize {
        1 + self.p_b + self.p_w
    }

    /// Size of the between block `(beta0, beta1, sigma_alpha_sq)`.
    pub fn n_between(&self) -> usize {
        self.p_b + 2
    }

    pub fn sigma_alpha(&self) -> usize {
        self.p_b + 1
    }

    pub fn sigma_e(&self) -> usize {
        self.p_b + self.p_w + 2
    }

    /// Flat index of the k-th regression coefficient in `(beta0, beta1, beta2)` order.
    pub fn beta_index(&self, k: usize) -> usize {
        if k <= self.p_b {
            k
        } else {
            k + 1
        }
    }

    pub fn is_between(&self, idx: usize) -> bool {
        idx < self.n_between()
    }

    /// Names in parameter order: `beta0`, `beta1_k`, `sigma_alpha_sq`, `beta2_r`, `sigma_e_sq`.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["beta0".to_string()];
        names.extend((1..=self.p_b).map(|k| format!("beta1_{k}")));
        names.push("sigma_alpha_sq".into());
        names.extend((1..=self.p_w).map(|r| format!("beta2_{r}")));
        names.push("sigma_e_sq".into());
        names
    }
}

/// Per-cluster summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub m: usize,
    pub ybar: f64,
    pub xbar_w: DVector<f64>,
    /// `z_i = (1, x_b', xbar_w')'`.
    pub z: DVector<f64>,
}

impl ClusterSummary {
    pub fn x_b(&self, p_b: usize) -> nalgebra::DVectorView<'_, f64> {
        self.z.rows(1, p_b)
    }
}

/// Cluster means and pooled within-cluster cross-products.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub clusters: Vec<ClusterSummary>,
    pub s_w_y: f64,
    pub s_w_xy: DVector<f64>,
    pub s_w_x: DMatrix<f64>,
    pub n: usize,
    pub g: usize,
    pub p_b: usize,
    pub p_w: usize,
    /// Sample variance of all responses (divisor `n - 1`).
    pub y_var: f64,
}

impl SufficientStats {
    /// Two-pass computation: cluster means first, then deviations.
    pub fn from_dataset(ds: &ClusteredDataset) -> Self {
        let (p_b, p_w) = (ds.p_b(), ds.p_w());
        let mut s_w_y = 0.0;
        let mut s_w_xy = DVector::zeros(p_w);
        let mut s_w_x = DMatrix::zeros(p_w, p_w);
        let mut clusters = Vec::with_capacity(ds.g());
        let mut dev = DVector::zeros(p_w);
        for c in ds.clusters() {
            let m = c.size();
            let ybar = c.y.iter().sum::<f64>() / m as f64;
            let xbar_w = DVector::from_vec(column_means(&c.x_w));
            for (j, &y) in c.y.iter().enumerate() {
                let ry = y - ybar;
                s_w_y += ry * ry;
                if p_w > 0 {
                    for k in 0..p_w {
                        dev[k] = c.x_w[(j, k)] - xbar_w[k];
                    }
                    s_w_xy.axpy(ry, &dev, 1.0);
                    s_w_x.ger(1.0, &dev, &dev, 1.0);
                }
            }
            let mut z = DVector::zeros(1 + p_b + p_w);
            z[0] = 1.0;
            for k in 0..p_b {
                z[1 + k] = c.x_b[k];
            }
            for k in 0..p_w {
                z[1 + p_b + k] = xbar_w[k];
            }
            clusters.push(ClusterSummary { m, ybar, xbar_w, z });
        }
        let n = ds.n();
        let grand = clusters.iter().map(|c| c.m as f64 * c.ybar).sum::<f64>() / n as f64;
        let between: f64 = clusters
            .iter()
            .map(|c| c.m as f64 * (c.ybar - grand).powi(2))
            .sum();
        Self {
            clusters,
            s_w_y,
            s_w_xy,
            s_w_x,
            n,
            g: ds.g(),
            p_b,
            p_w,
            y_var: (s_w_y + between) / (n as f64 - 1.0),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.p_b, self.p_w)
    }

    /// Within-cluster quadratic `S_w^y - 2 S_w^xy' b2 + b2' S_w^x b2`.
    pub fn within_quadratic(&self, beta2: &DVector<f64>) -> f64 {
        if self.p_w == 0 {
            return self.s_w_y;
        }
        self.s_w_y - 2.0 * self.s_w_xy.dot(beta2) + (&self.s_w_x * beta2).dot(beta2)
    }

    /// Cluster-mean residuals `ybar_i - z_i' beta`.
    pub fn mean_residuals(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.clusters.iter().map(|c| c.ybar - c.z.dot(beta)).collect()
    }

    pub fn taus(&self, theta: Theta) -> Vec<f64> {
        self.clusters
            .iter()
            .map(|c| tau_unchecked(theta, c.m as f64))
            .collect()
    }
}
