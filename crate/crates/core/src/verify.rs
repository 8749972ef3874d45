//! Self-checks run by `nestfit verify`.
//!
//! Each check compares an analytic quantity with an independent numerical
//! computation on seeded random instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::asymptotics::{matrix_a, matrix_b, matrix_c, CovariateLimits, MomentEstimates};
use crate::error::Result;
use crate::estimation::{fit_ml, fit_reml};
use crate::likelihood::{log_likelihood, score, score_jacobian};
use crate::model::{Cluster, ClusteredDataset, ParameterVector, Theta};
use crate::simulation::{simulate, CovariateModel, Execution, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Random dataset with `g <= 6`, `m_i <= 8`, `p_b, p_w <= 2`.
fn random_instance<R: Rng>(rng: &mut R) -> (ClusteredDataset, ParameterVector, ParameterVector) {
    let g = rng.random_range(2..=6);
    let p_b = rng.random_range(0..=2);
    let p_w = rng.random_range(0..=2);
    let clusters = (0..g)
        .map(|i| {
            let m = if i == 0 { rng.random_range(2..=8) } else { rng.random_range(1..=8) };
            let x_b = (0..p_b).map(|_| normal(rng)).collect();
            let x_w = DMatrix::from_fn(m, p_w, |_, _| normal(rng));
            let y = (0..m).map(|_| 2.0 * normal(rng)).collect();
            Cluster::new(i.to_string(), y, x_b, x_w)
        })
        .collect();
    let ds = ClusteredDataset::new(clusters, p_b, p_w).expect("valid random instance");
    let mut draw = || {
        ParameterVector::new(
            normal(rng),
            (0..p_b).map(|_| normal(rng)).collect(),
            rng.random_range(0.2..3.0),
            (0..p_w).map(|_| normal(rng)).collect(),
            rng.random_range(0.2..3.0),
        )
    };
    let (a, b) = (draw(), draw());
    (ds, a, b)
}

/// Gaussian log-density with the full per-cluster covariance, constants dropped.
fn dense_loglik(ds: &ClusteredDataset, omega: &ParameterVector) -> f64 {
    let mut total = 0.0;
    for c in ds.clusters() {
        let m = c.size();
        let v = DMatrix::from_fn(m, m, |i, j| omega.sigma_alpha_sq + if i == j { omega.sigma_e_sq } else { 0.0 });
        let chol = v.cholesky().expect("covariance is positive definite");
        let mean_b = omega.beta0 + c.x_b.iter().zip(&omega.beta1).map(|(x, b)| x * b).sum::<f64>();
        let r = DVector::from_fn(m, |j, _| {
            c.y[j] - mean_b - (0..omega.beta2.len()).map(|k| c.x_w[(j, k)] * omega.beta2[k]).sum::<f64>()
        });
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += -0.5 * log_det - 0.5 * r.dot(&chol.solve(&r));
    }
    total
}

fn check_dense_oracle(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (ds, a, b) = random_instance(rng);
        let stats = ds.sufficient_stats();
        let ours = log_likelihood(&stats, &a)? - log_likelihood(&stats, &b)?;
        let dense = dense_loglik(&ds, &a) - dense_loglik(&ds, &b);
        worst = worst.max(rel_err(ours, dense));
    }
    Ok(outcome(
        "likelihood matches dense normal density",
        worst < 1e-8,
        format!("max relative error {worst:.3e} over 200 instances (tolerance 1e-8)"),
    ))
}

fn check_derivatives(rng: &mut ChaCha8Rng) -> Result<[CheckOutcome; 2]> {
    let (mut worst_grad, mut worst_jac) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (ds, omega, _) = random_instance(rng);
        let stats = ds.sufficient_stats();
        let flat = omega.to_flat();
        let (p_b, p_w) = (omega.p_b(), omega.p_w());
        let sc = score(&stats, &omega)?.into_vector();
        let jac = score_jacobian(&stats, &omega)?.into_matrix();
        for k in 0..flat.len() {
            let h = 1e-6 * (1.0 + flat[k].abs());
            let shifted = |s: f64| -> Result<ParameterVector> {
                let mut v = flat.clone();
                v[k] += s;
                ParameterVector::from_flat(v.as_slice(), p_b, p_w)
            };
            let (up, down) = (shifted(h)?, shifted(-h)?);
            let fd = (log_likelihood(&stats, &up)? - log_likelihood(&stats, &down)?) / (2.0 * h);
            worst_grad = worst_grad.max(rel_err(sc[k], fd));
            let fd_col = (score(&stats, &up)?.into_vector() - score(&stats, &down)?.into_vector()) / (2.0 * h);
            for r in 0..flat.len() {
                worst_jac = worst_jac.max(rel_err(jac[(r, k)], fd_col[r]));
            }
        }
    }
    Ok([
        outcome(
            "score matches finite differences",
            worst_grad < 1e-5,
            format!("max relative error {worst_grad:.3e} (tolerance 1e-5)"),
        ),
        outcome(
            "score Jacobian matches finite differences",
            worst_jac < 1e-4,
            format!("max relative error {worst_jac:.3e} (tolerance 1e-4)"),
        ),
    ])
}

fn random_spd<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5
}

fn check_sandwich(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut normal_equal = true;
    for _ in 0..100 {
        let p_b = rng.random_range(0..=3);
        let p_w = rng.random_range(0..=3);
        let c1 = DVector::from_fn(p_b, |_, _| normal(rng));
        let c2 = random_spd(rng, p_b) + &c1 * c1.transpose();
        let limits = CovariateLimits::new(c1, c2, random_spd(rng, p_w))?;
        let theta = Theta::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let (sa, se) = (theta.sigma_alpha_sq, theta.sigma_e_sq);
        let moments = MomentEstimates {
            mu3_alpha: normal(rng) * sa.powf(1.5),
            mu4_alpha: sa * sa * rng.random_range(1.5..9.0),
            mu3_e: normal(rng) * se.powf(1.5),
            mu4_e: se * se * rng.random_range(1.5..9.0),
        };
        let a = matrix_a(&limits, theta, &moments)?;
        let b = matrix_b(&limits, theta)?;
        let b_inv = b.clone().try_inverse().expect("B is invertible");
        let c = matrix_c(&limits, theta, &moments)?.c;
        let sandwich = &b_inv * a * &b_inv;
        worst = worst.max((sandwich - &c).amax() / c.amax().max(1.0));
        normal_equal &= matrix_a(&limits, theta, &MomentEstimates::normal(theta))? == b;
    }
    Ok(outcome(
        "sandwich identity C = B^-1 A B^-1",
        worst < 1e-10 && normal_equal,
        format!("max scaled deviation {worst:.3e} (tolerance 1e-10); A = B under normal moments: {normal_equal}"),
    ))
}

fn check_fixture() -> Result<CheckOutcome> {
    let ds = ClusteredDataset::from_responses(vec![vec![1.0, 2.0], vec![3.0, 4.0]])?;
    let ml = fit_ml(&ds)?.omega_hat;
    let reml = fit_reml(&ds)?.omega_hat;
    let dev = [
        ml.beta0 - 2.5,
        ml.sigma_alpha_sq - 0.75,
        ml.sigma_e_sq - 0.5,
        reml.beta0 - 2.5,
        reml.sigma_alpha_sq - 1.75,
        reml.sigma_e_sq - 0.5,
    ]
    .iter()
    .fold(0.0f64, |a, d| a.max(d.abs()));
    Ok(outcome(
        "closed-form two-cluster fixture",
        dev < 1e-6,
        format!("max deviation {dev:.3e} from ML (2.5, 0.75, 0.5) and REML (2.5, 1.75, 0.5)"),
    ))
}

fn check_coverage(seed: u64) -> Result<CheckOutcome> {
    let cfg = SimConfig {
        covariates: CovariateModel::Random {
            mu_b: vec![1.0],
            sigma_b: vec![vec![1.0]],
            mu_w: vec![0.0],
            upsilon_w: vec![vec![0.5]],
            sigma_w: vec![vec![1.0]],
        },
        seed,
        replications: 200,
        ..SimConfig::balanced(50, 20, ParameterVector::new(1.0, vec![0.5], 0.25, vec![2.0], 0.25))
    };
    let summary = simulate(&cfg, Execution::default())?.summary;
    let idx = [1usize, 2, 3];
    let cov: Vec<f64> = idx.iter().map(|&k| summary.coverage[k]).collect();
    let ok = cov.iter().all(|&c| (0.88..=0.995).contains(&c));
    Ok(outcome(
        "coverage smoke test",
        ok,
        format!(
            "g=50, m=20, 200 replicates: coverage beta1 {:.3}, sigma_alpha_sq {:.3}, beta2 {:.3} (band [0.88, 0.995])",
            cov[0], cov[1], cov[2]
        ),
    ))
}

/// Runs every check; an error inside a check is reported as a failure.
pub fn run_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<Vec<CheckOutcome>>| match r {
        Ok(v) => out.extend(v),
        Err(e) => out.push(outcome(name, false, e.to_string())),
    };
    push("likelihood matches dense normal density", check_dense_oracle(&mut rng).map(|c| vec![c]));
    push("derivative checks", check_derivatives(&mut rng).map(Vec::from));
    push("sandwich identity C = B^-1 A B^-1", check_sandwich(&mut rng).map(|c| vec![c]));
    push("closed-form two-cluster fixture", check_fixture().map(|c| vec![c]));
    push("coverage smoke test", check_coverage(seed).map(|c| vec![c]));
    out
}
