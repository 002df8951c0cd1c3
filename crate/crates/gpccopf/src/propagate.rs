//! Pushes a Gaussian input distribution through a trained surrogate
//! posterior. Three approximations of increasing fidelity: a first-order
//! Taylor expansion of the mean function (TA1), the same plus a trace
//! correction from the curvature of the variance surface (TA2), and exact
//! moment matching (EM), which is closed form for the squared-exponential
//! kernel. Outputs stay independent across columns; only the diagonal of the
//! output covariance is reported.
//!
//! All means and covariances live in the standardized coordinates of the
//! model's scaler, like the rest of the surrogate layer.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::gp::{
    chol_solve, chol_solve_mat, clamp_variance, kernel_jacobian, kvec, mean_hessian_from, GpModel,
    SurrogatePosterior,
};

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error("input mean has {mean} entries but covariance is {rows}x{cols}")]
    DimensionMismatch {
        mean: usize,
        rows: usize,
        cols: usize,
    },
    #[error("input covariance is asymmetric at ({i},{j}) by {delta:e}")]
    AsymmetricCovariance { i: usize, j: usize, delta: f64 },
    #[error("input covariance has eigenvalue {value:e}")]
    IndefiniteCovariance { value: f64 },
}

/// Gaussian distribution over the surrogate's input vector.
#[derive(Debug, Clone)]
pub struct GaussianInput {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianInput {
    /// Symmetry is enforced to 1e-12 entrywise and eigenvalues down to
    /// -1e-10 are tolerated as roundoff.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, PropagateError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(PropagateError::DimensionMismatch {
                mean: mean.len(),
                rows: cov.nrows(),
                cols: cov.ncols(),
            });
        }
        for i in 0..cov.nrows() {
            for j in 0..i {
                let delta = (cov[(i, j)] - cov[(j, i)]).abs();
                if delta > 1e-12 {
                    return Err(PropagateError::AsymmetricCovariance { i, j, delta });
                }
            }
        }
        let eigs = cov.clone().symmetric_eigenvalues();
        if let Some(lo) = eigs.iter().copied().reduce(f64::min) {
            if lo < -1e-10 {
                return Err(PropagateError::IndefiniteCovariance { value: lo });
            }
        }
        Ok(Self { mean, cov })
    }

    /// Degenerate distribution concentrated at one point.
    pub fn point(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }
}

/// Per-output mean and variance of the propagated distribution.
#[derive(Debug, Clone)]
pub struct GaussianOutput {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// First-order Taylor propagation. The mean is the deterministic prediction
/// at the input mean; each output variance adds the quadratic form of the
/// posterior-mean gradient in the input covariance, so it never drops below
/// the deterministic predictive variance.
pub fn ta1(model: &dyn SurrogatePosterior, gin: &GaussianInput) -> GaussianOutput {
    let n_y = model.n_outputs();
    let mut mean = DVector::zeros(n_y);
    let mut var = DVector::zeros(n_y);
    for j in 0..n_y {
        let (mu, s2) = model.predict_one(j, &gin.mean);
        let g = model.mean_grad(j, &gin.mean);
        mean[j] = mu;
        var[j] = clamp_variance(s2 + g.dot(&(&gin.cov * &g)));
    }
    GaussianOutput { mean, var }
}

/// Hessian of the posterior variance of one output with respect to the
/// input, from the closed-form kernel derivatives.
pub(crate) fn var_hessian(model: &GpModel, output: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let out = &model.outputs[output];
    let k = kvec(&model.x_train, &out.h, x);
    let jac = kernel_jacobian(&model.x_train, &out.h, x, &k);
    let w = chol_solve(&out.l, &k);
    let ainv_jac = chol_solve_mat(&out.l, &jac);
    -2.0 * jac.transpose() * ainv_jac - 2.0 * mean_hessian_from(&model.x_train, &out.h, &w, x)
}

/// Second-order Taylor propagation. Same mean as [`ta1`]; each variance adds
/// half the trace of the variance Hessian against the input covariance.
pub fn ta2(model: &GpModel, gin: &GaussianInput) -> GaussianOutput {
    let mut out = ta1(model, gin);
    for j in 0..model.outputs.len() {
        let h = var_hessian(model, j, &gin.mean);
        out.var[j] = clamp_variance(out.var[j] + 0.5 * (&h * &gin.cov).trace());
    }
    out
}

/// Exact moment matching. The expectation of the squared-exponential kernel
/// under a Gaussian input is again squared-exponential with an inflated
/// length scale, so the exact output mean and variance reduce to dense
/// linear algebra over the training set. Exact for the mean; the variance is
/// exact up to the diagonal-output convention.
pub fn em(model: &GpModel, gin: &GaussianInput) -> GaussianOutput {
    let d = model.n_x();
    let m_s = model.x_train.nrows();
    let n_y = model.outputs.len();
    // Rows are x_i - mu, shared by every output.
    let diffs = DMatrix::from_fn(m_s, d, |i, a| model.x_train[(i, a)] - gin.mean[a]);

    let mut mean = DVector::zeros(n_y);
    let mut var = DVector::zeros(n_y);
    for j in 0..n_y {
        let out = &model.outputs[j];
        let lam = &out.h.lambda_diag;

        // Mean: q_i = sigma_f^2 |Sigma Lam^-1 + I|^-1/2 exp(-1/2 d_i' (Sigma+Lam)^-1 d_i).
        let mut sig_lam = gin.cov.clone();
        for a in 0..d {
            sig_lam[(a, a)] += lam[a];
        }
        let chol1 = Cholesky::new(sig_lam).expect("covariance plus positive diagonal is PD");
        let logdet1 = 2.0 * chol1.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
            - lam.iter().map(|v| v.ln()).sum::<f64>();
        let solved1 = chol1.solve(&diffs.transpose());
        let q = DVector::from_fn(m_s, |i, _| {
            let quad = diffs.row(i).transpose().dot(&solved1.column(i).into_owned());
            out.h.sigma_f2 * (-0.5 * logdet1 - 0.5 * quad).exp()
        });
        mean[j] = q.dot(&out.beta);

        // Variance: Q_ij = k_i k_j |2 Sigma Lam^-1 + I|^-1/2 exp(e_ij' T e_ij)
        // with e_ij = (d_i + d_j)/2 and T = (Sigma + Lam/2)^-1 Sigma Lam^-1.
        let mut two_sig_lam = 2.0 * gin.cov.clone();
        for a in 0..d {
            two_sig_lam[(a, a)] += lam[a];
        }
        let chol2 = Cholesky::new(two_sig_lam).expect("covariance plus positive diagonal is PD");
        let logdet2 = 2.0 * chol2.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
            - lam.iter().map(|v| v.ln()).sum::<f64>();
        let mut sig_lam_inv = gin.cov.clone();
        for a in 0..d {
            let col = 1.0 / lam[a];
            for r in 0..d {
                sig_lam_inv[(r, a)] *= col;
            }
        }
        // (Sigma + Lam/2)^-1 = 2 (2 Sigma + Lam)^-1; symmetrized against roundoff.
        let t = 2.0 * chol2.solve(&sig_lam_inv);
        let t = 0.5 * (&t + &t.transpose());

        let k = kvec(&model.x_train, &out.h, &gin.mean);
        // e_ij' T e_ij expands through the Gram table G = D T D'.
        let g = &diffs * &t * diffs.transpose();
        let scale = (-0.5 * logdet2).exp();
        let q_mat = DMatrix::from_fn(m_s, m_s, |i, jj| {
            let e = 0.25 * (g[(i, i)] + 2.0 * g[(i, jj)] + g[(jj, jj)]);
            k[i] * k[jj] * scale * e.exp()
        });

        let tr = chol_solve_mat(&out.l, &q_mat).trace();
        let quad = out.beta.dot(&(&q_mat * &out.beta));
        var[j] = clamp_variance(out.h.sigma_f2 - tr + quad - mean[j] * mean[j]);
    }
    GaussianOutput { mean, var }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleSet;
    use crate::gp::{fit_with_hyperparams, train_sparse, Hyperparams, TrainCfg};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_h(d: usize) -> Hyperparams {
        Hyperparams {
            lambda_diag: vec![0.8; d],
            sigma_f2: 1.2,
            sigma_z2: 0.01,
        }
    }

    /// Two-input, two-output regression table, standardized.
    fn toy_set(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                (x[(i, 0)]).sin() + 0.3 * x[(i, 1)] * x[(i, 1)]
            } else {
                (0.7 * x[(i, 0)] - 0.2 * x[(i, 1)]).cos()
            }
        });
        let raw = SampleSet {
            input_schema: vec!["pl_1".into(), "pl_2".into()],
            output_schema: vec!["v_0".into(), "v_1".into()],
            x,
            y,
            scaler: None,
        };
        crate::dataset::standardize(&raw).unwrap()
    }

    fn toy_model(n: usize, seed: u64) -> GpModel {
        let set = toy_set(n, seed);
        fit_with_hyperparams(&set, &[toy_h(2), toy_h(2)]).unwrap()
    }

    /// Symmetric PSD covariance with the given scale.
    fn random_cov(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        scale * &a * a.transpose()
    }

    fn random_point(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn covariance_validation_rejects_bad_inputs() {
        let mean = DVector::from_column_slice(&[0.0, 0.0]);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(matches!(
            GaussianInput::new(mean.clone(), asym),
            Err(PropagateError::AsymmetricCovariance { .. })
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianInput::new(mean.clone(), indef),
            Err(PropagateError::IndefiniteCovariance { .. })
        ));
        let wrong = DMatrix::identity(3, 3);
        assert!(matches!(
            GaussianInput::new(mean.clone(), wrong),
            Err(PropagateError::DimensionMismatch { .. })
        ));
        assert!(GaussianInput::new(mean, DMatrix::identity(2, 2)).is_ok());
    }

    #[test]
    fn zero_covariance_reproduces_deterministic_prediction() {
        let model = toy_model(25, 11);
        let x = DVector::from_column_slice(&[0.4, -0.9]);
        let gin = GaussianInput::point(x.clone());
        let o1 = ta1(&model, &gin);
        let o2 = ta2(&model, &gin);
        for j in 0..2 {
            let (mu, s2) = model.predict_one(j, &x);
            assert_eq!(o1.mean[j], mu);
            assert_eq!(o1.var[j], s2);
            assert_eq!(o2.mean[j], mu);
            assert_eq!(o2.var[j], s2);
        }
    }

    #[test]
    fn tiny_covariance_limit_agrees_across_methods() {
        let model = toy_model(25, 13);
        let x = DVector::from_column_slice(&[-0.3, 0.6]);
        let gin = GaussianInput::new(x.clone(), 1e-12 * DMatrix::identity(2, 2)).unwrap();
        for out in [ta1(&model, &gin), ta2(&model, &gin), em(&model, &gin)] {
            for j in 0..2 {
                let (mu, s2) = model.predict_one(j, &x);
                assert_relative_eq!(out.mean[j], mu, epsilon = 1e-8);
                assert_relative_eq!(out.var[j], s2, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ta1_variance_never_below_deterministic() {
        let model = toy_model(30, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let x = random_point(2, &mut rng);
            let cov = random_cov(2, rng.random_range(0.01..0.5), &mut rng);
            let gin = GaussianInput::new(x.clone(), cov).unwrap();
            let out = ta1(&model, &gin);
            for j in 0..2 {
                let (_, s2) = model.predict_one(j, &x);
                assert!(out.var[j] >= s2 - 1e-12);
            }
        }
    }

    #[test]
    fn sparse_posterior_propagates_through_ta1() {
        let set = toy_set(30, 23);
        let cfg = TrainCfg {
            restarts: 1,
            max_iters: 60,
            ..TrainCfg::default()
        };
        let model = train_sparse(&set, 10, &cfg, false).unwrap();
        let x = DVector::from_column_slice(&[0.2, 0.1]);
        let out = ta1(&model, &GaussianInput::point(x.clone()));
        for j in 0..2 {
            let (mu, s2) = model.predict_one(j, &x);
            assert_eq!(out.mean[j], mu);
            assert_eq!(out.var[j], s2);
        }
        let cov = DMatrix::identity(2, 2) * 0.05;
        let spread = ta1(&model, &GaussianInput::new(x, cov).unwrap());
        for j in 0..2 {
            assert!(spread.var[j] >= out.var[j]);
        }
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let model = toy_model(30, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let eps = 1e-6;
        for _ in 0..10 {
            let x = random_point(2, &mut rng);
            for j in 0..2 {
                let g = model.mean_grad(j, &x);
                for a in 0..2 {
                    let mut hi = x.clone();
                    let mut lo = x.clone();
                    hi[a] += eps;
                    lo[a] -= eps;
                    let fd =
                        (model.predict_one(j, &hi).0 - model.predict_one(j, &lo).0) / (2.0 * eps);
                    assert_relative_eq!(g[a], fd, max_relative = 1e-5, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn variance_hessian_matches_finite_differences() {
        let model = toy_model(30, 37);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let eps = 1e-4;
        for _ in 0..5 {
            let x = random_point(2, &mut rng);
            for j in 0..2 {
                let h = var_hessian(&model, j, &x);
                for a in 0..2 {
                    for b in 0..2 {
                        let mut pp = x.clone();
                        let mut pm = x.clone();
                        let mut mp = x.clone();
                        let mut mm = x.clone();
                        pp[a] += eps;
                        pp[b] += eps;
                        pm[a] += eps;
                        pm[b] -= eps;
                        mp[a] -= eps;
                        mp[b] += eps;
                        mm[a] -= eps;
                        mm[b] -= eps;
                        let fd = (model.predict_one(j, &pp).1 - model.predict_one(j, &pm).1
                            - model.predict_one(j, &mp).1
                            + model.predict_one(j, &mm).1)
                            / (4.0 * eps * eps);
                        assert_relative_eq!(h[(a, b)], fd, max_relative = 1e-4, epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_variance_region_gives_no_second_order_correction() {
        // A dense 1-D design with a length scale much larger than the point
        // spacing flattens the variance surface in the interior, so the
        // curvature correction must vanish there.
        let n = 120;
        let x = DMatrix::from_fn(n, 1, |i, _| -2.0 + 4.0 * i as f64 / (n - 1) as f64);
        let y = DMatrix::from_fn(n, 1, |i, _| (1.3 * x[(i, 0)]).sin());
        let raw = SampleSet {
            input_schema: vec!["pl_1".into()],
            output_schema: vec!["v_0".into()],
            x,
            y,
            scaler: None,
        };
        let set = crate::dataset::standardize(&raw).unwrap();
        let h = Hyperparams {
            lambda_diag: vec![1.0],
            sigma_f2: 1.0,
            sigma_z2: 1e-4,
        };
        let model = fit_with_hyperparams(&set, &[h]).unwrap();
        let x0 = DVector::from_column_slice(&[0.1]);
        assert!(var_hessian(&model, 0, &x0)[(0, 0)].abs() < 1e-6);
        let gin = GaussianInput::new(x0, DMatrix::from_element(1, 1, 0.01)).unwrap();
        let v1 = ta1(&model, &gin);
        let v2 = ta2(&model, &gin);
        assert_relative_eq!(v2.var[0], v1.var[0], epsilon = 1e-8);
        assert_eq!(v2.mean[0], v1.mean[0]);
    }

    /// Draws from N(mean, cov) via the covariance Cholesky factor.
    fn gaussian_draws(
        gin: &GaussianInput,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<DVector<f64>> {
        let l = Cholesky::new(gin.cov.clone() + 1e-14 * DMatrix::identity(gin.mean.len(), gin.mean.len()))
            .unwrap()
            .unpack();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(gin.mean.len(), |_, _| rng.sample(StandardNormal));
                &gin.mean + &l * z
            })
            .collect()
    }

    #[test]
    fn moment_matching_agrees_with_monte_carlo() {
        let model = toy_model(30, 43);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = DVector::from_column_slice(&[0.3, -0.4]);
        let cov = {
            let a = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.2, 0.3]);
            0.2 * &a * a.transpose()
        };
        let gin = GaussianInput::new(x, cov).unwrap();
        let exact = em(&model, &gin);

        let n = 200_000;
        let draws = gaussian_draws(&gin, n, &mut rng);
        for j in 0..2 {
            let preds: Vec<(f64, f64)> = draws.iter().map(|xs| model.predict_one(j, xs)).collect();
            let mean_mc = preds.iter().map(|p| p.0).sum::<f64>() / n as f64;
            // Total variance per draw: predictive variance plus squared
            // deviation of the predictive mean.
            let t: Vec<f64> = preds
                .iter()
                .map(|p| p.1 + (p.0 - mean_mc) * (p.0 - mean_mc))
                .collect();
            let var_mc = t.iter().sum::<f64>() / n as f64;

            let se_mean = {
                let v = preds.iter().map(|p| (p.0 - mean_mc).powi(2)).sum::<f64>() / n as f64;
                (v / n as f64).sqrt()
            };
            let se_var = {
                let v = t.iter().map(|ti| (ti - var_mc).powi(2)).sum::<f64>() / n as f64;
                (v / n as f64).sqrt()
            };
            assert!(
                (exact.mean[j] - mean_mc).abs() <= 3.0 * se_mean,
                "output {j}: mean {} vs MC {mean_mc} (3 se = {})",
                exact.mean[j],
                3.0 * se_mean
            );
            assert!(
                (exact.var[j] - var_mc).abs() <= 3.0 * se_var,
                "output {j}: var {} vs MC {var_mc} (3 se = {})",
                exact.var[j],
                3.0 * se_var
            );
        }
    }

    #[test]
    fn ta1_cost_grows_gently_with_training_size() {
        let small = toy_model(60, 53);
        let big = toy_model(120, 53);
        let x = DVector::from_column_slice(&[0.0, 0.0]);
        let gin = GaussianInput::new(x, 0.05 * DMatrix::identity(2, 2)).unwrap();
        let time = |model: &GpModel| {
            let mut best = f64::INFINITY;
            for _ in 0..5 {
                let t0 = std::time::Instant::now();
                for _ in 0..200 {
                    std::hint::black_box(ta1(model, &gin));
                }
                best = best.min(t0.elapsed().as_secs_f64());
            }
            best
        };
        // Warm both paths before timing.
        time(&small);
        let ratio = time(&big) / time(&small);
        assert!(ratio <= 5.0, "doubling the training set cost {ratio:.2}x");
    }
}
