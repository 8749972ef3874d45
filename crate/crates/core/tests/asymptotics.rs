mod common;

use nalgebra::{DMatrix, DVector};
use nestfit::asymptotics::{
    confidence_intervals, estimate_moments, influence, matrix_a, matrix_b, matrix_bn, matrix_c, CovariateLimits,
    InfluencePoint, MomentEstimates, NormalizationK,
};
use nestfit::estimation::fit_ml;
use nestfit::likelihood::expected_score_jacobian;
use nestfit::model::{ParameterVector, Theta};
use nestfit::normal::normal_quantile;
use nestfit::simulation::{Distribution, Generator, Sampler, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5
}

fn random_limits(rng: &mut ChaCha8Rng, p_b: usize, p_w: usize) -> (CovariateLimits, DMatrix<f64>) {
    let c1 = DVector::from_fn(p_b, |_, _| normal(rng));
    let sigma = spd(rng, p_b);
    let c2 = &sigma + &c1 * c1.transpose();
    (CovariateLimits::new(c1, c2, spd(rng, p_w)).unwrap(), sigma)
}

#[test]
fn bn_is_normalized_expected_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let (p_b, p_w) = (rng.random_range(0..=2), rng.random_range(0..=2));
        let ds = random_dataset(&mut rng, 8, 6, p_b, p_w);
        let stats = ds.sufficient_stats();
        let omega = random_omega(&mut rng, p_b, p_w);
        let bn = matrix_bn(&stats, omega.theta()).unwrap();
        let info = -expected_score_jacobian(&stats, &omega, &omega).unwrap().into_matrix();
        let k = NormalizationK::from_stats(&stats).diagonal().clone();
        let expect = DMatrix::from_fn(info.nrows(), info.ncols(), |i, j| info[(i, j)] / (k[i] * k[j]).sqrt());
        for (a, b) in bn.iter().zip(expect.iter()) {
            assert!(rel_err(*a, *b) < 1e-10, "{bn} vs {expect}");
        }
    }
}

#[test]
fn a_equals_b_only_under_normality() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (limits, _) = random_limits(&mut rng, 2, 1);
    let theta = Theta::new(0.7, 1.3);
    assert_eq!(matrix_a(&limits, theta, &MomentEstimates::normal(theta)).unwrap(), matrix_b(&limits, theta).unwrap());
    let heavy = MomentEstimates {
        mu4_alpha: 5.0 * 0.49,
        ..MomentEstimates::normal(theta)
    };
    assert_ne!(matrix_a(&limits, theta, &heavy).unwrap(), matrix_b(&limits, theta).unwrap());
}

#[test]
fn influence_has_mean_zero_and_covariance_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (limits, sigma_b) = random_limits(&mut rng, 2, 2);
    let theta = Theta::new(0.8, 0.5);
    let alpha_dist = Distribution::CenteredGamma { shape: 3.0 };
    let e_dist = Distribution::ScaledT { df: 10.0 };
    let alpha_s = Sampler::new(alpha_dist, theta.sigma_alpha_sq).unwrap();
    let e_s = Sampler::new(e_dist, theta.sigma_e_sq).unwrap();
    let (ma, me) = (alpha_dist.moments(theta.sigma_alpha_sq), e_dist.moments(theta.sigma_e_sq));
    let moments = MomentEstimates {
        mu3_alpha: ma.third,
        mu4_alpha: ma.fourth,
        mu3_e: me.third,
        mu4_e: me.fourth,
    };
    let c = matrix_c(&limits, theta, &moments).unwrap().c;
    let lb = sigma_b.cholesky().unwrap().l();
    let lw = limits.c3.clone().cholesky().unwrap().l();
    let reps = 200_000;
    let dim = c.nrows();
    let mut draws = DMatrix::zeros(reps, dim);
    for r in 0..reps {
        let point = InfluencePoint {
            alpha: alpha_s.sample(&mut rng),
            e: e_s.sample(&mut rng),
            x_b: &limits.c1 + &lb * DVector::from_fn(2, |_, _| normal(&mut rng)),
            x_w_dev: &lw * DVector::from_fn(2, |_, _| normal(&mut rng)),
        };
        let psi = influence(&point, &limits, theta).unwrap();
        draws.row_mut(r).copy_from(&psi.transpose());
    }
    for k in 0..dim {
        let col: Vec<f64> = draws.column(k).iter().copied().collect();
        let (mean, se) = mean_se(&col);
        assert!(mean.abs() < 4.0 * se, "component {k}: {mean} ({se})");
    }
    let cov = draws.transpose() * &draws / reps as f64;
    for i in 0..dim {
        for j in 0..dim {
            let scale = (c[(i, i)] * c[(j, j)]).sqrt();
            assert!((cov[(i, j)] - c[(i, j)]).abs() < 0.05 * scale, "({i},{j}): {} vs {}", cov[(i, j)], c[(i, j)]);
        }
    }
}

#[test]
fn uncorrelated_between_covariate_can_be_dropped() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let c3 = spd(&mut rng, 2);
    let theta = Theta::new(0.6, 1.1);
    let moments = MomentEstimates {
        mu3_alpha: 0.2,
        mu4_alpha: 1.5,
        mu3_e: -0.1,
        mu4_e: 4.0,
    };
    let with = CovariateLimits::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 2.0), c3.clone()).unwrap();
    let without = CovariateLimits::new(DVector::zeros(0), DMatrix::zeros(0, 0), c3).unwrap();
    let full = matrix_c(&with, theta, &moments).unwrap().c;
    let reduced = matrix_c(&without, theta, &moments).unwrap().c;
    let keep = [0usize, 2, 3, 4, 5];
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            assert!(rel_err(full[(i, j)], reduced[(a, b)]) < 1e-14);
        }
    }
    assert!(rel_err(full[(1, 1)], theta.sigma_alpha_sq / 2.0) < 1e-14);
}

#[test]
fn between_block_ignores_within_covariates() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let c1 = DVector::from_vec(vec![0.4]);
    let c2 = DMatrix::from_element(1, 1, 1.5);
    let theta = Theta::new(1.0, 2.0);
    let m = MomentEstimates::normal(theta);
    let a = matrix_c(&CovariateLimits::new(c1.clone(), c2.clone(), spd(&mut rng, 1)).unwrap(), theta, &m).unwrap();
    let b = matrix_c(&CovariateLimits::new(c1, c2, spd(&mut rng, 3)).unwrap(), theta, &m).unwrap();
    assert_eq!(a.c.view((0, 0), (3, 3)), b.c.view((0, 0), (3, 3)));
}

#[test]
fn normal_plug_in_moments() {
    let truth = ParameterVector::new(0.0, vec![], 0.5, vec![], 1.0);
    let cfg = SimConfig {
        seed: 36,
        ..SimConfig::balanced(5000, 200, truth)
    };
    let ds = Generator::new(&cfg).unwrap().draw(0).dataset;
    let stats = ds.sufficient_stats();
    let fit = fit_ml(&ds).unwrap();
    let m = estimate_moments(&ds, &stats, &fit);
    let a4 = 3.0 * (0.5f64 + 1.0 / 200.0).powi(2);
    assert!(rel_err(m.mu4_alpha, a4) < 0.06, "{} vs {a4}", m.mu4_alpha);
    assert!(m.mu3_alpha.abs() < 4.0 * (15.0 * 0.125f64).sqrt() / 5000f64.sqrt());
    let e4 = 3.0 * (1.0f64 - 1.0 / 200.0).powi(2);
    assert!(rel_err(m.mu4_e, e4) < 0.02, "{} vs {e4}", m.mu4_e);
}

#[test]
fn intervals_follow_the_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let base = random_dataset(&mut rng, 40, 10, 2, 1);
    let ds = redraw_responses(&mut rng, &base, &ParameterVector::new(1.0, vec![0.5, -0.5], 1.0, vec![2.0], 0.5));
    let stats = ds.sufficient_stats();
    let fit = fit_ml(&ds).unwrap();
    let om = &fit.omega_hat;
    let moments = estimate_moments(&ds, &stats, &fit);
    let (g, n) = (stats.g as f64, stats.n as f64);
    let gamma = 0.1;
    let z = normal_quantile(1.0 - gamma / 2.0);
    let cis = confidence_intervals(&stats, &fit, &moments, gamma).unwrap();
    let get = |name: &str| cis.iter().find(|c| c.parameter == name).unwrap();

    // Inverse of the between moment matrix, computed densely.
    let mut mb = DMatrix::zeros(3, 3);
    for c in &stats.clusters {
        let v = DVector::from_vec(vec![1.0, c.z[1], c.z[2]]);
        mb += &v * v.transpose() / g;
    }
    let mb_inv = mb.try_inverse().unwrap();
    let sa = om.sigma_alpha_sq.sqrt();
    for k in 0..2 {
        let ci = get(&format!("beta1_{}", k + 1));
        let half = z * sa * mb_inv[(k + 1, k + 1)].sqrt() / g.sqrt();
        assert!(rel_err(ci.upper - ci.estimate, half) < 1e-9);
        assert!(rel_err(ci.estimate - ci.lower, half) < 1e-9);
    }
    let b2 = get("beta2_1");
    let half = z * om.sigma_e_sq.sqrt() * (n / stats.s_w_x[(0, 0)]).sqrt() / n.sqrt();
    assert!(rel_err(b2.upper - b2.estimate, half) < 1e-9);

    let s = get("sigma_alpha");
    let w = z * (moments.mu4_alpha - om.sigma_alpha_sq.powi(2)).sqrt() / (2.0 * g.sqrt() * om.sigma_alpha_sq);
    assert!(rel_err(s.lower, sa * (-w).exp()) < 1e-9);
    assert!(rel_err(s.upper, sa * w.exp()) < 1e-9);
    let s2 = get("sigma_alpha_sq");
    assert!(rel_err(s2.lower, s.lower * s.lower) < 1e-12);
    assert!(rel_err(s2.upper, s.upper * s.upper) < 1e-12);

    let wide = confidence_intervals(&stats, &fit, &moments, 0.01).unwrap();
    for (a, b) in cis.iter().zip(&wide) {
        assert!(b.width() > a.width() && b.contains(a.estimate));
    }
}
