//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls the crate's likelihood, estimation or asymptotics code:
//! the oracles work from raw data with dense linear algebra.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nestfit::model::{Cluster, ClusteredDataset, ParameterVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Random unbalanced dataset; the first cluster has at least two units.
pub fn random_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    g_max: usize,
    m_max: usize,
    p_b: usize,
    p_w: usize,
) -> ClusteredDataset {
    let g = rng.random_range(2..=g_max);
    let clusters = (0..g)
        .map(|i| {
            let m = if i == 0 { rng.random_range(2..=m_max) } else { rng.random_range(1..=m_max) };
            let x_b = (0..p_b).map(|_| normal(rng)).collect();
            let x_w = DMatrix::from_fn(m, p_w, |_, _| normal(rng));
            let y = (0..m).map(|_| 1.5 * normal(rng) + 0.5).collect();
            Cluster::new(format!("c{i}"), y, x_b, x_w)
        })
        .collect();
    ClusteredDataset::new(clusters, p_b, p_w).unwrap()
}

pub fn random_omega<R: Rng + ?Sized>(rng: &mut R, p_b: usize, p_w: usize) -> ParameterVector {
    ParameterVector::new(
        normal(rng),
        (0..p_b).map(|_| normal(rng)).collect(),
        rng.random_range(0.2..3.0),
        (0..p_w).map(|_| normal(rng)).collect(),
        rng.random_range(0.2..3.0),
    )
}

/// Full fixed-effect design row `(1, x_b, x_w_ij)` for unit j of a cluster.
pub fn design_row(c: &Cluster, j: usize) -> DVector<f64> {
    let p_w = c.x_w.ncols();
    let mut row = vec![1.0];
    row.extend_from_slice(&c.x_b);
    row.extend((0..p_w).map(|k| c.x_w[(j, k)]));
    DVector::from_vec(row)
}

pub fn beta_of(omega: &ParameterVector) -> DVector<f64> {
    let mut b = vec![omega.beta0];
    b.extend_from_slice(&omega.beta1);
    b.extend_from_slice(&omega.beta2);
    DVector::from_vec(b)
}

fn cluster_cov(m: usize, sa: f64, se: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| sa + if i == j { se } else { 0.0 })
}

/// Multivariate normal log-density of the whole dataset (with `2 pi` constants).
pub fn dense_loglik(ds: &ClusteredDataset, omega: &ParameterVector) -> f64 {
    let beta = beta_of(omega);
    let mut total = 0.0;
    for c in ds.clusters() {
        let m = c.size();
        let v = cluster_cov(m, omega.sigma_alpha_sq, omega.sigma_e_sq);
        let chol = v.cholesky().unwrap();
        let r = DVector::from_fn(m, |j, _| c.y[j] - design_row(c, j).dot(&beta));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += -0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * r.dot(&chol.solve(&r));
    }
    total
}

/// Dense GLS: `(X' V^-1 X, X' V^-1 y)`.
pub fn dense_gls(ds: &ClusteredDataset, sa: f64, se: f64) -> (DMatrix<f64>, DVector<f64>) {
    let q = 1 + ds.p_b() + ds.p_w();
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    for c in ds.clusters() {
        let m = c.size();
        let v_inv = cluster_cov(m, sa, se).try_inverse().unwrap();
        let x = DMatrix::from_fn(m, q, |j, k| design_row(c, j)[k]);
        let y = DVector::from_column_slice(&c.y);
        xtx += x.transpose() * &v_inv * &x;
        xty += x.transpose() * &v_inv * y;
    }
    (xtx, xty)
}

/// Dense profile log-likelihood with `beta` at its GLS value.
pub fn dense_profile_loglik(ds: &ClusteredDataset, sa: f64, se: f64) -> f64 {
    let (xtx, xty) = dense_gls(ds, sa, se);
    let beta = xtx.lu().solve(&xty).unwrap();
    let mut flat = beta.as_slice().to_vec();
    let p_b = ds.p_b();
    let beta2 = flat.split_off(1 + p_b);
    let beta1 = flat.split_off(1);
    dense_loglik(ds, &ParameterVector::new(flat[0], beta1, sa, beta2, se))
}

/// Dense restricted log-likelihood (up to a constant).
pub fn dense_reml(ds: &ClusteredDataset, sa: f64, se: f64) -> f64 {
    let (xtx, _) = dense_gls(ds, sa, se);
    dense_profile_loglik(ds, sa, se) - 0.5 * xtx.determinant().ln()
}

/// Maximizes `f(sigma_alpha_sq, sigma_e_sq)` on a `k x k` log-spaced grid.
pub fn log_grid_argmax(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64, k: usize) -> (f64, f64, f64, f64) {
    let step = (hi.ln() - lo.ln()) / (k - 1) as f64;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let (a, e) = ((lo.ln() + step * i as f64).exp(), (lo.ln() + step * j as f64).exp());
            let v = f(a, e);
            if v > best.0 {
                best = (v, a, e);
            }
        }
    }
    (best.1, best.2, best.0, step)
}

/// Cluster-mean and pooled within cross-products by direct loops.
pub struct NaiveStats {
    pub ybar: Vec<f64>,
    pub s_w_y: f64,
    pub s_w_xy: Vec<f64>,
    pub s_w_x: Vec<Vec<f64>>,
}

pub fn naive_stats(ds: &ClusteredDataset) -> NaiveStats {
    let p_w = ds.p_w();
    let mut out = NaiveStats {
        ybar: Vec::new(),
        s_w_y: 0.0,
        s_w_xy: vec![0.0; p_w],
        s_w_x: vec![vec![0.0; p_w]; p_w],
    };
    for c in ds.clusters() {
        let m = c.size() as f64;
        let yb: f64 = c.y.iter().sum::<f64>() / m;
        let xb: Vec<f64> = (0..p_w).map(|k| (0..c.size()).map(|j| c.x_w[(j, k)]).sum::<f64>() / m).collect();
        for j in 0..c.size() {
            let dy = c.y[j] - yb;
            out.s_w_y += dy * dy;
            for a in 0..p_w {
                let da = c.x_w[(j, a)] - xb[a];
                out.s_w_xy[a] += da * dy;
                for (b, mean_b) in xb.iter().enumerate() {
                    out.s_w_x[a][b] += da * (c.x_w[(j, b)] - mean_b);
                }
            }
        }
        out.ybar.push(yb);
    }
    out
}

/// Mean and standard error of a sample.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Draws responses for the covariates of `ds` under normal effects and errors.
pub fn redraw_responses<R: Rng + ?Sized>(rng: &mut R, ds: &ClusteredDataset, omega: &ParameterVector) -> ClusteredDataset {
    let beta = beta_of(omega);
    let (sa, se) = (omega.sigma_alpha_sq.sqrt(), omega.sigma_e_sq.sqrt());
    let clusters = ds
        .clusters()
        .iter()
        .map(|c| {
            let alpha = sa * normal(rng);
            let y = (0..c.size())
                .map(|j| design_row(c, j).dot(&beta) + alpha + se * normal(rng))
                .collect();
            Cluster::new(c.id.clone(), y, c.x_b.clone(), c.x_w.clone())
        })
        .collect();
    ClusteredDataset::new(clusters, ds.p_b(), ds.p_w()).unwrap()
}
