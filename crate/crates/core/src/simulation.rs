//! Seeded Monte Carlo engine for checking the asymptotic theory.
//!
//! Every replicate draws from its own ChaCha8 stream (`seed`, stream =
//! replicate index), so results do not depend on how replicates are
//! scheduled. With the `parallel` feature replicates run on the rayon pool;
//! results are always merged in replicate-index order.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, LogNormal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    confidence_intervals, estimate_moments, matrix_c, CovariateLimits, MomentEstimates, NormalizationK,
};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, Method};
use crate::model::{Cluster, ClusteredDataset, Layout, ParameterVector, SufficientStats};

/// Stream offset for the error-mean diagnostics, disjoint from replicate streams.
const DIAGNOSTIC_STREAM: u64 = 1 << 63;
const DIAGNOSTIC_CHUNK: usize = 4096;

/// Mean-zero law of the random effect or the error, rescaled to a target variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distribution {
    Normal,
    ScaledT { df: f64 },
    CenteredGamma { shape: f64 },
    CenteredLognormal { sigma: f64 },
}

/// Central moments of a standardized distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralMoments {
    pub variance: f64,
    pub third: f64,
    pub fourth: f64,
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Normal => Ok(()),
            Distribution::ScaledT { df } if df > 4.0 && df.is_finite() => Ok(()),
            Distribution::ScaledT { df } => Err(Error::InvalidDistribution(format!(
                "scaled-t needs df > 4 for a finite fourth moment, got {df}"
            ))),
            Distribution::CenteredGamma { shape } if shape > 0.0 && shape.is_finite() => Ok(()),
            Distribution::CenteredGamma { shape } => Err(Error::InvalidDistribution(format!(
                "centered-gamma needs shape > 0, got {shape}"
            ))),
            Distribution::CenteredLognormal { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            Distribution::CenteredLognormal { sigma } => Err(Error::InvalidDistribution(format!(
                "centered-lognormal needs sigma > 0, got {sigma}"
            ))),
        }
    }

    /// Exact central moments after rescaling to `variance`.
    pub fn moments(&self, variance: f64) -> CentralMoments {
        let s2 = variance;
        let (skew, kurt) = match *self {
            Distribution::Normal => (0.0, 3.0),
            Distribution::ScaledT { df } => (0.0, 3.0 * (df - 2.0) / (df - 4.0)),
            Distribution::CenteredGamma { shape } => (2.0 / shape.sqrt(), 3.0 + 6.0 / shape),
            Distribution::CenteredLognormal { sigma } => {
                let w = (sigma * sigma).exp();
                ((w + 2.0) * (w - 1.0).sqrt(), w.powi(4) + 2.0 * w.powi(3) + 3.0 * w * w - 3.0)
            }
        };
        CentralMoments {
            variance: s2,
            third: skew * s2.powf(1.5),
            fourth: kurt * s2 * s2,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Normal => write!(f, "normal"),
            Distribution::ScaledT { df } => write!(f, "t:{df}"),
            Distribution::CenteredGamma { shape } => write!(f, "gamma:{shape}"),
            Distribution::CenteredLognormal { sigma } => write!(f, "lognormal:{sigma}"),
        }
    }
}

/// Parses `normal`, `t:<df>`, `gamma:<shape>` or `lognormal:<sigma>`.
impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = || -> Result<f64> {
            arg.ok_or_else(|| Error::InvalidDistribution(format!("'{s}' needs a parameter")))?
                .parse::<f64>()
                .map_err(|_| Error::InvalidDistribution(format!("bad parameter in '{s}'")))
        };
        let dist = match name.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Distribution::Normal,
            "t" | "scaled-t" => Distribution::ScaledT { df: num()? },
            "gamma" | "centered-gamma" => Distribution::CenteredGamma { shape: num()? },
            "lognormal" | "centered-lognormal" => Distribution::CenteredLognormal { sigma: num()? },
            _ => return Err(Error::InvalidDistribution(format!("unknown distribution '{s}'"))),
        };
        dist.validate()?;
        Ok(dist)
    }
}

#[derive(Debug, Clone)]
enum Base {
    Normal,
    T(StudentT<f64>),
    Gamma(Gamma<f64>),
    LogNormal(LogNormal<f64>),
}

/// Draws `(X - shift) * scale` from a prepared base law.
#[derive(Debug, Clone)]
pub struct Sampler {
    base: Base,
    shift: f64,
    scale: f64,
}

impl Sampler {
    pub fn new(dist: Distribution, variance: f64) -> Result<Self> {
        dist.validate()?;
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::InvalidConfig(format!("variance must be finite and >= 0, got {variance}")));
        }
        let sd = variance.sqrt();
        let bad = |e: &dyn fmt::Display| Error::InvalidDistribution(e.to_string());
        let (base, shift, scale) = match dist {
            Distribution::Normal => (Base::Normal, 0.0, sd),
            Distribution::ScaledT { df } => (
                Base::T(StudentT::new(df).map_err(|e| bad(&e))?),
                0.0,
                sd * ((df - 2.0) / df).sqrt(),
            ),
            Distribution::CenteredGamma { shape } => (
                Base::Gamma(Gamma::new(shape, 1.0).map_err(|e| bad(&e))?),
                shape,
                sd / shape.sqrt(),
            ),
            Distribution::CenteredLognormal { sigma } => {
                let w = (sigma * sigma).exp();
                (
                    Base::LogNormal(LogNormal::new(0.0, sigma).map_err(|e| bad(&e))?),
                    w.sqrt(),
                    sd / ((w - 1.0) * w).sqrt(),
                )
            }
        };
        Ok(Self { base, shift, scale })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x: f64 = match &self.base {
            Base::Normal => rng.sample(StandardNormal),
            Base::T(d) => d.sample(rng),
            Base::Gamma(d) => d.sample(rng),
            Base::LogNormal(d) => d.sample(rng),
        };
        (x - self.shift) * self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSizes {
    Balanced(usize),
    PerCluster(Vec<usize>),
}

/// How covariates are produced for each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateModel {
    None,
    /// The same covariates in every replicate. `x_b[i]` is cluster i's
    /// between vector, `x_w[i][j]` the within vector of unit j.
    Fixed {
        x_b: Vec<Vec<f64>>,
        x_w: Vec<Vec<Vec<f64>>>,
    },
    /// Fresh draws per replicate: `x_b ~ N(mu_b, sigma_b)` and
    /// `x_w_ij = mu_w + u_i + v_ij` with `u_i ~ N(0, upsilon_w)`, `v_ij ~ N(0, sigma_w)`.
    Random {
        mu_b: Vec<f64>,
        sigma_b: Vec<Vec<f64>>,
        mu_w: Vec<f64>,
        upsilon_w: Vec<Vec<f64>>,
        sigma_w: Vec<Vec<f64>>,
    },
}

impl CovariateModel {
    fn dims(&self) -> (usize, usize) {
        match self {
            CovariateModel::None => (0, 0),
            CovariateModel::Fixed { x_b, x_w } => (
                x_b.first().map_or(0, Vec::len),
                x_w.first().and_then(|c| c.first()).map_or(0, Vec::len),
            ),
            CovariateModel::Random { mu_b, mu_w, .. } => (mu_b.len(), mu_w.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub g: usize,
    pub cluster_sizes: ClusterSizes,
    pub true_omega: ParameterVector,
    pub alpha_dist: Distribution,
    pub e_dist: Distribution,
    pub covariates: CovariateModel,
    pub seed: u64,
    pub replications: usize,
    pub gamma: f64,
    /// Zero every random effect and error draw.
    #[serde(default)]
    pub suppress_noise: bool,
}

impl SimConfig {
    /// Balanced normal design without covariates.
    pub fn balanced(g: usize, m: usize, true_omega: ParameterVector) -> Self {
        Self {
            g,
            cluster_sizes: ClusterSizes::Balanced(m),
            true_omega,
            alpha_dist: Distribution::Normal,
            e_dist: Distribution::Normal,
            covariates: CovariateModel::None,
            seed: 0,
            replications: 1,
            gamma: 0.05,
            suppress_noise: false,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.true_omega.p_b(), self.true_omega.p_w())
    }

    pub fn sizes(&self) -> Vec<usize> {
        match &self.cluster_sizes {
            ClusterSizes::Balanced(m) => vec![*m; self.g],
            ClusterSizes::PerCluster(v) => v.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.g < 2 {
            return Err(Error::InvalidConfig(format!("need g >= 2 clusters, got {}", self.g)));
        }
        let sizes = self.sizes();
        if sizes.len() != self.g {
            return Err(Error::InvalidConfig(format!(
                "{} cluster sizes given for g = {}",
                sizes.len(),
                self.g
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("cluster sizes must be >= 1".into()));
        }
        if sizes.iter().sum::<usize>() <= self.g {
            return Err(Error::InvalidConfig("need n > g (some cluster with m_i >= 2)".into()));
        }
        let omega = &self.true_omega;
        if omega.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("true parameter has non-finite entries".into()));
        }
        omega.theta().check()?;
        self.alpha_dist.validate()?;
        self.e_dist.validate()?;
        let (p_b, p_w) = self.covariates.dims();
        if (p_b, p_w) != (omega.p_b(), omega.p_w()) {
            return Err(Error::InvalidConfig(format!(
                "covariate model has (p_b, p_w) = ({p_b}, {p_w}) but the true parameter has ({}, {})",
                omega.p_b(),
                omega.p_w()
            )));
        }
        if let CovariateModel::Fixed { x_b, x_w } = &self.covariates {
            if x_b.len() != self.g || x_w.len() != self.g {
                return Err(Error::InvalidConfig("fixed covariates need one entry per cluster".into()));
            }
            for (i, (b, w)) in x_b.iter().zip(x_w).enumerate() {
                if b.len() != p_b || w.len() != sizes[i] || w.iter().any(|row| row.len() != p_w) {
                    return Err(Error::InvalidConfig(format!("fixed covariates of cluster {i} have the wrong shape")));
                }
            }
        }
        Ok(())
    }

    /// Covariate limits implied by the generating law.
    pub fn covariate_limits(&self) -> Result<CovariateLimits> {
        match &self.covariates {
            CovariateModel::None => CovariateLimits::new(DVector::zeros(0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)),
            CovariateModel::Random { mu_b, sigma_b, sigma_w, .. } => {
                let mu = DVector::from_column_slice(mu_b);
                let c2 = square(sigma_b, mu.len(), "sigma_b")? + &mu * mu.transpose();
                let c3 = square(sigma_w, sigma_w.len(), "sigma_w")?;
                CovariateLimits::new(mu, c2, c3)
            }
            CovariateModel::Fixed { .. } => {
                let mut quiet = self.clone();
                quiet.suppress_noise = true;
                let ds = Generator::new(&quiet)?.draw(0).dataset;
                CovariateLimits::from_stats(&ds.sufficient_stats())
            }
        }
    }

    /// Exact third and fourth moments of the generating laws.
    pub fn true_moments(&self) -> MomentEstimates {
        let theta = self.true_omega.theta();
        let a = self.alpha_dist.moments(theta.sigma_alpha_sq);
        let e = self.e_dist.moments(theta.sigma_e_sq);
        MomentEstimates {
            mu3_alpha: a.third,
            mu4_alpha: a.fourth,
            mu3_e: e.third,
            mu4_e: e.fourth,
        }
    }
}

fn square(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidConfig(format!("{name} must be {dim} x {dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

/// Factor `L` with `L L' = mat` for a symmetric positive semidefinite matrix.
fn psd_factor(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<DMatrix<f64>> {
    let mat = square(rows, dim, name)?;
    if dim == 0 {
        return Ok(mat);
    }
    let scale = mat.amax().max(f64::MIN_POSITIVE);
    if (&mat - mat.transpose()).amax() > 1e-12 * scale || mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} must be symmetric and finite")));
    }
    let eig = SymmetricEigen::new(mat);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::InvalidConfig(format!("{name} must be positive semidefinite")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

enum PreparedCovariates {
    None,
    Fixed { x_b: Vec<Vec<f64>>, x_w: Vec<Vec<Vec<f64>>> },
    Random {
        mu_b: DVector<f64>,
        l_b: DMatrix<f64>,
        mu_w: DVector<f64>,
        l_u: DMatrix<f64>,
        l_v: DMatrix<f64>,
    },
}

/// One simulated dataset with its latent draws.
#[derive(Debug, Clone)]
pub struct Draw {
    pub dataset: ClusteredDataset,
    pub alpha: Vec<f64>,
    /// Cluster means of the errors.
    pub e_bar: Vec<f64>,
}

/// A validated config with samplers and covariance factors prepared once.
pub struct Generator<'a> {
    cfg: &'a SimConfig,
    sizes: Vec<usize>,
    alpha: Sampler,
    e: Sampler,
    covariates: PreparedCovariates,
}

fn normal_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a SimConfig) -> Result<Self> {
        cfg.validate()?;
        let theta = cfg.true_omega.theta();
        let covariates = match &cfg.covariates {
            CovariateModel::None => PreparedCovariates::None,
            CovariateModel::Fixed { x_b, x_w } => PreparedCovariates::Fixed {
                x_b: x_b.clone(),
                x_w: x_w.clone(),
            },
            CovariateModel::Random {
                mu_b,
                sigma_b,
                mu_w,
                upsilon_w,
                sigma_w,
            } => PreparedCovariates::Random {
                mu_b: DVector::from_column_slice(mu_b),
                l_b: psd_factor(sigma_b, mu_b.len(), "sigma_b")?,
                mu_w: DVector::from_column_slice(mu_w),
                l_u: psd_factor(upsilon_w, mu_w.len(), "upsilon_w")?,
                l_v: psd_factor(sigma_w, mu_w.len(), "sigma_w")?,
            },
        };
        Ok(Self {
            cfg,
            sizes: cfg.sizes(),
            alpha: Sampler::new(cfg.alpha_dist, theta.sigma_alpha_sq)?,
            e: Sampler::new(cfg.e_dist, theta.sigma_e_sq)?,
            covariates,
        })
    }

    pub fn draw(&self, replicate_index: usize) -> Draw {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(replicate_index as u64);
        let omega = &self.cfg.true_omega;
        let (p_b, p_w) = (omega.p_b(), omega.p_w());
        let beta1 = DVector::from_column_slice(&omega.beta1);
        let beta2 = DVector::from_column_slice(&omega.beta2);
        let noise = !self.cfg.suppress_noise;

        let mut clusters = Vec::with_capacity(self.sizes.len());
        let mut alphas = Vec::with_capacity(self.sizes.len());
        let mut e_bar = Vec::with_capacity(self.sizes.len());
        for (i, &m) in self.sizes.iter().enumerate() {
            let x_b: DVector<f64> = match &self.covariates {
                PreparedCovariates::None => DVector::zeros(0),
                PreparedCovariates::Fixed { x_b, .. } => DVector::from_column_slice(&x_b[i]),
                PreparedCovariates::Random { mu_b, l_b, .. } => mu_b + l_b * normal_vector(&mut rng, p_b),
            };
            let alpha = if noise { self.alpha.sample(&mut rng) } else { 0.0 };
            let common = match &self.covariates {
                PreparedCovariates::Random { mu_w, l_u, .. } => mu_w + l_u * normal_vector(&mut rng, p_w),
                _ => DVector::zeros(p_w),
            };
            let level = omega.beta0 + x_b.dot(&beta1) + alpha;
            let mut x_w = DMatrix::zeros(m, p_w);
            let mut y = Vec::with_capacity(m);
            let mut e_sum = 0.0;
            for j in 0..m {
                let row: DVector<f64> = match &self.covariates {
                    PreparedCovariates::None => DVector::zeros(0),
                    PreparedCovariates::Fixed { x_w, .. } => DVector::from_column_slice(&x_w[i][j]),
                    PreparedCovariates::Random { l_v, .. } => &common + l_v * normal_vector(&mut rng, p_w),
                };
                let e = if noise { self.e.sample(&mut rng) } else { 0.0 };
                e_sum += e;
                y.push(level + row.dot(&beta2) + e);
                x_w.row_mut(j).copy_from(&row.transpose());
            }
            clusters.push(Cluster::new(i.to_string(), y, x_b.as_slice().to_vec(), x_w));
            alphas.push(alpha);
            e_bar.push(e_sum / m as f64);
        }
        let dataset = ClusteredDataset::new(clusters, p_b, p_w)
            .expect("generator produces finite, consistently shaped data");
        Draw {
            dataset,
            alpha: alphas,
            e_bar,
        }
    }
}

/// Draws the dataset of one replicate; deterministic in `(cfg.seed, replicate_index)`.
pub fn generate_dataset(cfg: &SimConfig, replicate_index: usize) -> Result<ClusteredDataset> {
    Ok(Generator::new(cfg)?.draw(replicate_index).dataset)
}

/// How replicates are scheduled. Results are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is on, else runs sequentially.
    #[default]
    Parallel,
}

fn map_indices<T, F>(count: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = exec;
    (0..count).map(f).collect()
}

/// Per-replicate estimates and interval hits, all in parameter order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateResult {
    pub omega_hat_ml: ParameterVector,
    pub omega_hat_reml: ParameterVector,
    /// `K^{1/2}(omega_hat - omega)` for the ML fit.
    pub normalized_error: Vec<f64>,
    pub normalized_error_reml: Vec<f64>,
    /// Whether each ML interval covers the truth (`sigma_*_sq` intervals for variances).
    pub ci_hits: Vec<bool>,
    /// `|K^{1/2}(omega_hat_reml - omega_hat_ml)|`.
    pub ml_reml_gap: f64,
    /// A fit hit the variance boundary.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub index: usize,
    pub outcome: Result<ReplicateResult>,
}

fn analyse(cfg: &SimConfig, ds: &ClusteredDataset) -> Result<ReplicateResult> {
    let stats = ds.sufficient_stats();
    let opts = FitOptions::default();
    let ml = fit(&stats, Method::Ml, &opts)?;
    let reml = fit(&stats, Method::Reml, &opts)?;
    let moments = estimate_moments(ds, &stats, &ml);
    let cis = confidence_intervals(&stats, &ml, &moments, cfg.gamma)?;
    let layout = stats.layout();
    let names = layout.parameter_names();
    let truth = cfg.true_omega.to_flat();
    let ci_hits = names
        .iter()
        .zip(truth.iter())
        .map(|(name, &v)| cis.iter().find(|c| &c.parameter == name).is_some_and(|c| c.contains(v)))
        .collect();
    let k = NormalizationK::from_stats(&stats);
    let ml_flat = ml.omega_hat.to_flat();
    let reml_flat = reml.omega_hat.to_flat();
    Ok(ReplicateResult {
        normalized_error: k.scale(&(&ml_flat - &truth)).as_slice().to_vec(),
        normalized_error_reml: k.scale(&(&reml_flat - &truth)).as_slice().to_vec(),
        ml_reml_gap: k.scale(&(&reml_flat - &ml_flat)).norm(),
        ci_hits,
        flagged: ml.boundary_flag || reml.boundary_flag,
        omega_hat_ml: ml.omega_hat,
        omega_hat_reml: reml.omega_hat,
    })
}

/// Fits ML and REML on one replicate.
pub fn run_replicate(cfg: &SimConfig, replicate_index: usize) -> Result<ReplicateResult> {
    analyse(cfg, &generate_dataset(cfg, replicate_index)?)
}

/// One moment identity for the error cluster mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub name: String,
    pub expected: f64,
    pub empirical: f64,
    pub std_error: f64,
}

impl MomentCheck {
    /// `|empirical - expected|` in standard errors.
    pub fn z(&self) -> f64 {
        (self.empirical - self.expected).abs() / self.std_error
    }

    pub fn within(&self, k: f64) -> bool {
        self.z() <= k
    }
}

/// Error cluster-mean moments at one cluster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbarDiagnostic {
    pub m: usize,
    pub draws: usize,
    pub checks: Vec<MomentCheck>,
}

fn raw_moment_check(name: &str, expected: f64, values: impl Iterator<Item = f64> + Clone, count: f64) -> MomentCheck {
    let mean = values.clone().sum::<f64>() / count;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
    MomentCheck {
        name: name.into(),
        expected,
        empirical: mean,
        std_error: (var / count).sqrt(),
    }
}

/// Simulates error cluster means and compares their first four moments
/// with `0`, `sigma_e^2/m`, `E e^3/m^2`, `3 sigma_e^4/m^2 + (E e^4 - 3 sigma_e^4)/m^3`.
pub fn moment_diagnostics(cfg: &SimConfig, draws: usize) -> Result<Vec<EbarDiagnostic>> {
    moment_diagnostics_with(cfg, draws, Execution::default())
}

pub fn moment_diagnostics_with(cfg: &SimConfig, draws: usize, exec: Execution) -> Result<Vec<EbarDiagnostic>> {
    cfg.validate()?;
    if draws < 2 {
        return Err(Error::InvalidConfig("need at least 2 draws".into()));
    }
    let se2 = cfg.true_omega.sigma_e_sq;
    let sampler = Sampler::new(cfg.e_dist, se2)?;
    let mom = cfg.e_dist.moments(se2);
    let mut sizes = cfg.sizes();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = Vec::with_capacity(sizes.len());
    for m in sizes {
        let chunks = draws.div_ceil(DIAGNOSTIC_CHUNK);
        let values: Vec<f64> = map_indices(chunks, exec, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(DIAGNOSTIC_STREAM | ((m as u64) << 32) | c as u64);
            let len = DIAGNOSTIC_CHUNK.min(draws - c * DIAGNOSTIC_CHUNK);
            (0..len)
                .map(|_| (0..m).map(|_| sampler.sample(&mut rng)).sum::<f64>() / m as f64)
                .collect::<Vec<_>>()
        })
        .concat();
        let mf = m as f64;
        let count = values.len() as f64;
        let it = values.iter().copied();
        let checks = vec![
            raw_moment_check("mean", 0.0, it.clone(), count),
            raw_moment_check("variance", se2 / mf, it.clone().map(|v| v * v), count),
            raw_moment_check("third", mom.third / (mf * mf), it.clone().map(|v| v.powi(3)), count),
            raw_moment_check(
                "fourth",
                3.0 * se2 * se2 / (mf * mf) + (mom.fourth - 3.0 * se2 * se2) / mf.powi(3),
                it.map(|v| v.powi(4)),
                count,
            ),
        ];
        out.push(EbarDiagnostic { m, draws, checks });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub index: usize,
    pub error: String,
}

/// Aggregate of a Monte Carlo run. Flagged replicates are excluded from
/// coverage, covariance and gap statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub replications: usize,
    pub succeeded: usize,
    pub flagged: usize,
    pub failed: usize,
    pub failures: Vec<FailureNote>,
    pub parameters: Vec<String>,
    pub gamma: f64,
    pub coverage: Vec<f64>,
    pub mean_normalized_error: Vec<f64>,
    pub empirical_covariance: Vec<Vec<f64>>,
    /// Limit covariance `C` at the true parameter and covariate law.
    pub asymptotic_covariance: Option<Vec<Vec<f64>>>,
    pub cross_block_max_abs_corr: f64,
    pub ml_reml_gap_mean: f64,
    pub ml_reml_gap_median: f64,
    pub ebar_diagnostics: Vec<EbarDiagnostic>,
}

/// Summary plus the per-replicate records it was built from.
#[derive(Debug, Clone)]
pub struct MonteCarloRun {
    pub summary: MonteCarloSummary,
    pub replicates: Vec<ReplicateRecord>,
}

pub fn run_replications(cfg: &SimConfig) -> Result<MonteCarloSummary> {
    Ok(simulate(cfg, Execution::default())?.summary)
}

pub fn simulate(cfg: &SimConfig, exec: Execution) -> Result<MonteCarloRun> {
    let generator = Generator::new(cfg)?;
    let replicates: Vec<ReplicateRecord> = map_indices(cfg.replications, exec, |index| ReplicateRecord {
        index,
        outcome: analyse(cfg, &generator.draw(index).dataset),
    });
    if replicates.iter().all(|r| r.outcome.is_err()) {
        return Err(Error::AllReplicatesFailed(cfg.replications));
    }
    let draws = (cfg.replications * cfg.g).clamp(1000, 200_000);
    let ebar = moment_diagnostics_with(cfg, draws, exec)?;
    let summary = summarize(cfg, &replicates, ebar);
    Ok(MonteCarloRun { summary, replicates })
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

fn to_rows(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    mat.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn summarize(cfg: &SimConfig, records: &[ReplicateRecord], ebar: Vec<EbarDiagnostic>) -> MonteCarloSummary {
    let layout = cfg.layout();
    let dim = layout.dim();
    let mut failures = Vec::new();
    let mut flagged = 0;
    let mut usable = Vec::new();
    for r in records {
        match &r.outcome {
            Err(e) => failures.push(FailureNote {
                index: r.index,
                error: e.to_string(),
            }),
            Ok(res) if res.flagged => flagged += 1,
            Ok(res) => usable.push(res),
        }
    }
    let count = usable.len() as f64;
    let coverage = (0..dim)
        .map(|k| usable.iter().filter(|r| r.ci_hits[k]).count() as f64 / count)
        .collect();

    let errors = DMatrix::from_fn(usable.len(), dim, |i, k| usable[i].normalized_error[k]);
    let mean = DVector::from_fn(dim, |k, _| errors.column(k).mean());
    let mut cov = DMatrix::zeros(dim, dim);
    for row in errors.row_iter() {
        let d = row.transpose() - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= count - 1.0;
    let mut cross = 0.0f64;
    for a in 0..layout.n_between() {
        for b in layout.n_between()..dim {
            let corr = cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
            if corr.is_finite() {
                cross = cross.max(corr.abs());
            }
        }
    }
    let mut gaps: Vec<f64> = usable.iter().map(|r| r.ml_reml_gap).collect();
    let gap_mean = gaps.iter().sum::<f64>() / count;

    let asymptotic = cfg
        .covariate_limits()
        .and_then(|l| matrix_c(&l, cfg.true_omega.theta(), &cfg.true_moments()))
        .ok()
        .map(|c| to_rows(&c.c));

    MonteCarloSummary {
        replications: records.len(),
        succeeded: usable.len(),
        flagged,
        failed: failures.len(),
        failures,
        parameters: layout.parameter_names(),
        gamma: cfg.gamma,
        coverage,
        mean_normalized_error: mean.as_slice().to_vec(),
        empirical_covariance: to_rows(&cov),
        asymptotic_covariance: asymptotic,
        cross_block_max_abs_corr: cross,
        ml_reml_gap_mean: gap_mean,
        ml_reml_gap_median: median(&mut gaps),
        ebar_diagnostics: ebar,
    }
}

/// Writes one CSV row per replicate.
pub fn write_replicates_csv<W: Write>(records: &[ReplicateRecord], layout: Layout, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let names = layout.parameter_names();
    let mut header = vec!["index".to_string(), "status".into(), "error".into()];
    for prefix in ["ml", "reml", "nerr", "hit"] {
        header.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    header.push("ml_reml_gap".into());
    w.write_record(&header).map_err(io)?;
    let dim = names.len();
    for r in records {
        let mut row = vec![r.index.to_string()];
        match &r.outcome {
            Ok(res) => {
                row.push(if res.flagged { "flagged" } else { "ok" }.into());
                row.push(String::new());
                row.extend(res.omega_hat_ml.to_flat().iter().map(f64::to_string));
                row.extend(res.omega_hat_reml.to_flat().iter().map(f64::to_string));
                row.extend(res.normalized_error.iter().map(f64::to_string));
                row.extend(res.ci_hits.iter().map(|&h| u8::from(h).to_string()));
                row.push(res.ml_reml_gap.to_string());
            }
            Err(e) => {
                row.push("failed".into());
                row.push(e.to_string());
                row.extend(std::iter::repeat_n(String::new(), 4 * dim + 1));
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Empirical standard deviations at one design size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub g: usize,
    pub n: usize,
    pub sd_beta1: f64,
    pub sd_beta2: f64,
    pub replicates_used: usize,
}

/// Log-log slopes of estimator spread against the number of clusters and units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    /// Slope of `log sd(beta1_hat)` on `log g`.
    pub slope_beta1: f64,
    /// Slope of `log sd(beta2_hat)` on `log n`.
    pub slope_beta2: f64,
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn sample_sd(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
}

/// ML-only replicate runs over a sequence of growing designs.
pub fn rate_probe(cfgs: &[SimConfig]) -> Result<RateReport> {
    rate_probe_with(cfgs, Execution::default())
}

pub fn rate_probe_with(cfgs: &[SimConfig], exec: Execution) -> Result<RateReport> {
    let mut sizes: Vec<(usize, usize)> = cfgs.iter().map(|c| (c.g, c.n())).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(Error::InsufficientSequence(sizes.len()));
    }
    let mut points = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        if cfg.true_omega.p_b() == 0 || cfg.true_omega.p_w() == 0 {
            return Err(Error::InvalidConfig(
                "rate probe needs at least one between and one within covariate".into(),
            ));
        }
        let generator = Generator::new(cfg)?;
        let fits: Vec<Option<(f64, f64)>> = map_indices(cfg.replications, exec, |i| {
            let stats = SufficientStats::from_dataset(&generator.draw(i).dataset);
            let f = fit(&stats, Method::Ml, &FitOptions::default()).ok()?;
            (!f.boundary_flag).then(|| (f.omega_hat.beta1[0], f.omega_hat.beta2[0]))
        });
        let (b1, b2): (Vec<f64>, Vec<f64>) = fits.into_iter().flatten().unzip();
        if b1.len() < 2 {
            return Err(Error::AllReplicatesFailed(cfg.replications));
        }
        points.push(RatePoint {
            g: cfg.g,
            n: cfg.n(),
            sd_beta1: sample_sd(&b1),
            sd_beta2: sample_sd(&b2),
            replicates_used: b1.len(),
        });
    }
    let log = |v: f64| v.ln();
    let lg: Vec<f64> = points.iter().map(|p| log(p.g as f64)).collect();
    let ln: Vec<f64> = points.iter().map(|p| log(p.n as f64)).collect();
    let s1: Vec<f64> = points.iter().map(|p| log(p.sd_beta1)).collect();
    let s2: Vec<f64> = points.iter().map(|p| log(p.sd_beta2)).collect();
    Ok(RateReport {
        slope_beta1: ols_slope(&lg, &s1),
        slope_beta2: ols_slope(&ln, &s2),
        points,
    })
}
