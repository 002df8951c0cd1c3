//! Gaussian-process regression with the squared-exponential ARD kernel.
//!
//! One independent zero-mean GP per output column of a standardized
//! [`SampleSet`]. Exact models carry the full training set; sparse models
//! compress it into a small optimized inducing set and predict in O(m_m²).
//! Both expose the posterior derivatives needed by the uncertainty
//! propagation and dispatch layers through [`SurrogatePosterior`].

use crate::dataset::{SampleSet, Scaler};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("non-PD kernel matrix")]
    NonPdKernel,
    #[error("training failed for output {0}: no restart produced a usable kernel")]
    TrainingFailed(String),
    #[error("dataset must be standardized before training")]
    NotStandardized,
    #[error("inducing count {m_m} outside 1..={m_s}")]
    InducingCount { m_m: usize, m_s: usize },
    #[error("model file is not a recognized surrogate model: {0}")]
    BadFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Kernel and noise hyperparameters for one output. `lambda_diag` holds the
/// squared length scale per input dimension; all entries are strictly
/// positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_diag: Vec<f64>,
    pub sigma_f2: f64,
    pub sigma_z2: f64,
}

impl Hyperparams {
    /// Unconstrained optimization vector: logs of every parameter, length
    /// scales first, then signal variance, then noise variance.
    pub fn to_log(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.lambda_diag.iter().map(|l| l.ln()).collect();
        v.push(self.sigma_f2.ln());
        v.push(self.sigma_z2.ln());
        DVector::from(v)
    }

    pub fn from_log(theta: &DVector<f64>) -> Hyperparams {
        let d = theta.len() - 2;
        Hyperparams {
            lambda_diag: (0..d).map(|i| theta[i].exp()).collect(),
            sigma_f2: theta[d].exp(),
            sigma_z2: theta[d + 1].exp(),
        }
    }

    fn is_valid(&self) -> bool {
        self.sigma_f2 > 0.0
            && self.sigma_f2.is_finite()
            && self.sigma_z2 > 0.0
            && self.sigma_z2.is_finite()
            && self.lambda_diag.iter().all(|&l| l > 0.0 && l.is_finite())
    }
}

/// Squared-exponential kernel with one length scale per dimension:
/// `sigma_f2 * exp(-1/2 * sum_d (x_p,d - x_q,d)^2 / lambda_d)`.
pub fn kernel_seard(x_p: &[f64], x_q: &[f64], h: &Hyperparams) -> f64 {
    assert_eq!(x_p.len(), x_q.len());
    assert_eq!(x_p.len(), h.lambda_diag.len());
    let mut e = 0.0;
    for ((a, b), l) in x_p.iter().zip(x_q).zip(&h.lambda_diag) {
        e += (a - b) * (a - b) / l;
    }
    h.sigma_f2 * (-0.5 * e).exp()
}

/// Cross-covariance matrix between the rows of two point sets.
fn gram(xa: &DMatrix<f64>, xb: &DMatrix<f64>, h: &Hyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| {
        kernel_seard(
            xa.row(i).transpose().as_slice(),
            xb.row(j).transpose().as_slice(),
            h,
        )
    })
}

/// Lower Cholesky factor of `a`, adding diagonal jitter relative to the
/// kernel scale when the plain factorization fails: start at 1e-10 of the
/// mean kernel diagonal, escalate tenfold, give up past 1e-4 of it.
fn chol_jittered(a: &DMatrix<f64>, diag_scale: f64) -> Result<(DMatrix<f64>, f64), GpError> {
    if let Some(ch) = nalgebra::Cholesky::new(a.clone()) {
        return Ok((ch.unpack(), 0.0));
    }
    let mut jitter = 1e-10 * diag_scale;
    while jitter <= 1e-4 * diag_scale {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(ch) = nalgebra::Cholesky::new(aj) {
            return Ok((ch.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(GpError::NonPdKernel)
}

/// Solve `(L Lᵀ) z = b` with a stored lower factor.
pub(crate) fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let fwd = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has positive diagonal");
    l.transpose()
        .solve_upper_triangular(&fwd)
        .expect("Cholesky factor has positive diagonal")
}

/// Same solve with a matrix right-hand side.
pub(crate) fn chol_solve_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let fwd = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has positive diagonal");
    l.transpose()
        .solve_upper_triangular(&fwd)
        .expect("Cholesky factor has positive diagonal")
}

pub(crate) fn inv_from_chol(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = l
        .clone()
        .try_inverse()
        .expect("triangular factor is invertible");
    let mut inv = DMatrix::zeros(n, n);
    inv.gemm_tr(1.0, &linv, &linv, 0.0);
    inv
}

fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Exact log marginal likelihood of one output and its gradient with
/// respect to the log-hyperparameters (same ordering as
/// [`Hyperparams::to_log`]).
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &Hyperparams,
) -> Result<(f64, DVector<f64>), GpError> {
    let (n, d) = (x.nrows(), x.ncols());
    assert_eq!(y.len(), n);
    assert_eq!(h.lambda_diag.len(), d);
    if !h.is_valid() {
        return Err(GpError::NonPdKernel);
    }
    let k = gram(x, x, h);
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += h.sigma_z2;
    }
    let (l, _) = chol_jittered(&a, h.sigma_f2)?;
    let beta = chol_solve(&l, y);
    let value = -0.5 * y.dot(&beta) - 0.5 * log_det_from_chol(&l)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // d/dtheta of the likelihood is 1/2 tr((beta betaᵀ - A⁻¹) dA/dtheta).
    let m = &beta * beta.transpose() - inv_from_chol(&l);
    let mut grad = DVector::zeros(d + 2);
    for dd in 0..d {
        let mut g = 0.0;
        for p in 0..n {
            for q in 0..n {
                let diff = x[(p, dd)] - x[(q, dd)];
                g += m[(p, q)] * k[(p, q)] * diff * diff;
            }
        }
        grad[dd] = 0.25 * g / h.lambda_diag[dd];
    }
    grad[d] = 0.5 * m.component_mul(&k).sum();
    grad[d + 1] = 0.5 * h.sigma_z2 * m.trace();
    Ok((value, grad))
}

/// Quasi-Newton minimizer over an unconstrained vector. The callback may
/// return `None` for evaluation failures (for GP objectives: kernels so
/// degenerate that no tolerable jitter makes them factorizable); the line
/// search treats those points as uphill.
fn bfgs_minimize<F>(
    mut f: F,
    x0: DVector<f64>,
    max_iters: usize,
    gtol: f64,
) -> Option<(DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut gx) = f(&x0)?;
    let mut x = x0;
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iters {
        if gx.amax() < gtol {
            break;
        }
        let mut p = -(&h * &gx);
        let mut slope = gx.dot(&p);
        if slope >= 0.0 {
            // Curvature information went stale; fall back to steepest descent.
            h = DMatrix::identity(n, n);
            p = -gx.clone();
            slope = gx.dot(&p);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + alpha * &p;
            if let Some((fxn, gxn)) = f(&xn) {
                if fxn.is_finite() && fxn <= fx + 1e-4 * alpha * slope {
                    accepted = Some((xn, fxn, gxn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fxn, gxn)) = accepted else { break };
        let s = &xn - &x;
        let yv = &gxn - &gx;
        let sy = s.dot(&yv);
        // Skip updates that would destroy positive definiteness.
        if sy > 1e-10 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
            h -= rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        x = xn;
        fx = fxn;
        gx = gxn;
    }
    Some((x, fx))
}

/// Multi-start settings: `restarts` independent initial guesses drawn
/// log-uniformly from `[init_lo, init_hi]` per log-parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCfg {
    pub restarts: usize,
    pub init_lo: f64,
    pub init_hi: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            restarts: 5,
            init_lo: -2.0,
            init_hi: 2.0,
            max_iters: 200,
            seed: 0,
        }
    }
}

/// Trained posterior for one output: hyperparameters, the lower Cholesky
/// factor of the noisy kernel matrix over the training inputs, and the
/// weight vector `beta = (K + sigma_z2 I)⁻¹ y`.
#[derive(Debug, Clone)]
pub struct GpOutput {
    pub name: String,
    pub h: Hyperparams,
    pub nll: f64,
    pub(crate) beta: DVector<f64>,
    pub(crate) l: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub input_schema: Vec<String>,
    pub output_schema: Vec<String>,
    pub scaler: Scaler,
    pub(crate) x_train: DMatrix<f64>,
    pub outputs: Vec<GpOutput>,
}

/// Assemble a full model from fixed hyperparameters, one set per output.
pub fn fit_with_hyperparams(set: &SampleSet, hs: &[Hyperparams]) -> Result<GpModel, GpError> {
    let scaler = set.scaler.clone().ok_or(GpError::NotStandardized)?;
    assert_eq!(hs.len(), set.n_y());
    assert!(set.n_rows() >= 2, "need at least two training rows");
    let outputs = set
        .output_schema
        .iter()
        .zip(hs)
        .enumerate()
        .map(|(j, (name, h))| {
            let y = set.y.column(j).into_owned();
            let (value, _) = log_marginal_likelihood(&set.x, &y, h)?;
            let mut a = gram(&set.x, &set.x, h);
            for i in 0..a.nrows() {
                a[(i, i)] += h.sigma_z2;
            }
            let (l, _) = chol_jittered(&a, h.sigma_f2)?;
            let beta = chol_solve(&l, &y);
            Ok(GpOutput {
                name: name.clone(),
                h: h.clone(),
                nll: -value,
                beta,
                l,
            })
        })
        .collect::<Result<Vec<_>, GpError>>()?;
    Ok(GpModel {
        input_schema: set.input_schema.clone(),
        output_schema: set.output_schema.clone(),
        scaler,
        x_train: set.x.clone(),
        outputs,
    })
}

/// Box for the trained signal variance and noise on standardized targets:
/// unit-variance outputs need no more than tenfold signal headroom, and
/// noise below the floor only encodes round-off. Without the box,
/// maximum likelihood on near-affine outputs walks into the
/// zero-noise/huge-signal interpolation limit whose kernel matrix is too
/// ill-conditioned for the downstream derivative and moment algebra.
const SIGNAL_CAP: f64 = 10.0;
const NOISE_FLOOR: f64 = 1e-6;

/// Smooth bounded reparameterization; reduces to plain `exp` away from the
/// bounds, so interior likelihood optima are the unconstrained ones.
pub(crate) fn bounded_from_log(theta: &DVector<f64>) -> Hyperparams {
    let d = theta.len() - 2;
    Hyperparams {
        lambda_diag: (0..d).map(|i| theta[i].exp()).collect(),
        sigma_f2: SIGNAL_CAP * (1.0 - (-theta[d].exp() / SIGNAL_CAP).exp()),
        sigma_z2: NOISE_FLOOR + theta[d + 1].exp(),
    }
}

/// Negative bounded-parameter likelihood and its gradient, the per-restart
/// objective of [`train`].
pub(crate) fn bounded_objective(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    t: &DVector<f64>,
) -> Option<(f64, DVector<f64>)> {
    let d = t.len() - 2;
    let h = bounded_from_log(t);
    log_marginal_likelihood(x, y, &h).ok().map(|(v, mut g)| {
        // The likelihood gradient assumes the plain log parameterization;
        // rescale the two bounded coordinates by their own chain factors.
        g[d] *= t[d].exp() * (1.0 - h.sigma_f2 / SIGNAL_CAP) / h.sigma_f2;
        g[d + 1] *= (h.sigma_z2 - NOISE_FLOOR) / h.sigma_z2;
        (-v, -g)
    })
}

/// Maximize the marginal likelihood per output over the multi-start grid.
/// Outputs train independently and in parallel; the result depends only on
/// `cfg.seed`, never on scheduling.
pub fn train(set: &SampleSet, cfg: &TrainCfg) -> Result<GpModel, GpError> {
    if set.scaler.is_none() {
        return Err(GpError::NotStandardized);
    }
    assert!(set.n_rows() >= 2, "need at least two training rows");
    assert!(cfg.restarts >= 1, "need at least one restart");
    let d = set.n_x();
    let hs = (0..set.n_y())
        .into_par_iter()
        .map(|j| {
            let y = set.y.column(j).into_owned();
            let mut best: Option<(f64, DVector<f64>)> = None;
            for r in 0..cfg.restarts {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((j * cfg.restarts + r) as u64);
                let theta0 = DVector::from_fn(d + 2, |_, _| {
                    rng.random_range(cfg.init_lo..cfg.init_hi)
                });
                let obj = |t: &DVector<f64>| bounded_objective(&set.x, &y, t);
                if let Some((t, f)) = bfgs_minimize(obj, theta0, cfg.max_iters, 1e-6) {
                    if f.is_finite() && best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                        best = Some((f, t));
                    }
                }
            }
            best.map(|(_, t)| bounded_from_log(&t))
                .ok_or_else(|| GpError::TrainingFailed(set.output_schema[j].clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    fit_with_hyperparams(set, &hs)
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    if v < 0.0 {
        assert!(
            v > -1e-10,
            "predicted variance {v} is negative beyond numerical slack"
        );
        0.0
    } else {
        v
    }
}

pub(crate) fn kvec(points: &DMatrix<f64>, h: &Hyperparams, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(points.nrows(), |i, _| {
        kernel_seard(points.row(i).transpose().as_slice(), x.as_slice(), h)
    })
}

/// Posterior mean and variance for every output at one standardized input.
pub fn predict(model: &GpModel, x_star: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let mut mu = DVector::zeros(model.outputs.len());
    let mut var = DVector::zeros(model.outputs.len());
    for (j, _) in model.outputs.iter().enumerate() {
        let (m, v) = model.predict_one(j, x_star);
        mu[j] = m;
        var[j] = v;
    }
    (mu, var)
}

/// Rows are the gradients of each training-point kernel value with respect
/// to the prediction input.
pub(crate) fn kernel_jacobian(
    points: &DMatrix<f64>,
    h: &Hyperparams,
    x: &DVector<f64>,
    k: &DVector<f64>,
) -> DMatrix<f64> {
    DMatrix::from_fn(points.nrows(), x.len(), |i, dd| {
        k[i] * (points[(i, dd)] - x[dd]) / h.lambda_diag[dd]
    })
}

fn mean_grad_from(
    points: &DMatrix<f64>,
    h: &Hyperparams,
    beta: &DVector<f64>,
    x: &DVector<f64>,
) -> DVector<f64> {
    let k = kvec(points, h, x);
    kernel_jacobian(points, h, x, &k).transpose() * beta
}

pub(crate) fn mean_hessian_from(
    points: &DMatrix<f64>,
    h: &Hyperparams,
    beta: &DVector<f64>,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let d = x.len();
    let k = kvec(points, h, x);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..points.nrows() {
        let w = beta[i] * k[i];
        for a in 0..d {
            let va = (points[(i, a)] - x[a]) / h.lambda_diag[a];
            for b in 0..d {
                let vb = (points[(i, b)] - x[b]) / h.lambda_diag[b];
                hess[(a, b)] += w * va * vb;
            }
            hess[(a, a)] -= w / h.lambda_diag[a];
        }
    }
    hess
}

/// Shared read access to a trained surrogate: schema, scaling, and the
/// posterior value/derivative queries the propagation and dispatch layers
/// build on. All inputs and outputs are in standardized units.
pub trait SurrogatePosterior: Sync {
    fn input_schema(&self) -> &[String];
    fn output_schema(&self) -> &[String];
    fn scaler(&self) -> &Scaler;
    /// Posterior mean and (noise-free) variance of one output.
    fn predict_one(&self, output: usize, x: &DVector<f64>) -> (f64, f64);
    /// Gradient of the posterior mean with respect to the input.
    fn mean_grad(&self, output: usize, x: &DVector<f64>) -> DVector<f64>;
    /// Hessian of the posterior mean with respect to the input.
    fn mean_hessian(&self, output: usize, x: &DVector<f64>) -> DMatrix<f64>;
    /// Gradient of the posterior variance with respect to the input.
    fn var_grad(&self, output: usize, x: &DVector<f64>) -> DVector<f64>;

    fn n_x(&self) -> usize {
        self.input_schema().len()
    }
    fn n_outputs(&self) -> usize {
        self.output_schema().len()
    }
}

impl SurrogatePosterior for GpModel {
    fn input_schema(&self) -> &[String] {
        &self.input_schema
    }

    fn output_schema(&self) -> &[String] {
        &self.output_schema
    }

    fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    fn predict_one(&self, output: usize, x: &DVector<f64>) -> (f64, f64) {
        let out = &self.outputs[output];
        let k = kvec(&self.x_train, &out.h, x);
        let tau = out
            .l
            .solve_lower_triangular(&k)
            .expect("stored factor is triangular");
        (out.beta.dot(&k), clamp_variance(out.h.sigma_f2 - tau.dot(&tau)))
    }

    fn mean_grad(&self, output: usize, x: &DVector<f64>) -> DVector<f64> {
        let out = &self.outputs[output];
        mean_grad_from(&self.x_train, &out.h, &out.beta, x)
    }

    fn mean_hessian(&self, output: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let out = &self.outputs[output];
        mean_hessian_from(&self.x_train, &out.h, &out.beta, x)
    }

    fn var_grad(&self, output: usize, x: &DVector<f64>) -> DVector<f64> {
        let out = &self.outputs[output];
        let k = kvec(&self.x_train, &out.h, x);
        let w = chol_solve(&out.l, &k);
        -2.0 * kernel_jacobian(&self.x_train, &out.h, x, &k).transpose() * w
    }
}

/// Sparse posterior for one output. `beta` are the inducing weights of the
/// predictive mean. All variance corrections go through the well-conditioned
/// inner matrix `B = I + A Aᵀ` with `A = L_mm⁻¹ K_mn / sigma_z`, whose
/// eigenvalues never drop below one even as the noise shrinks; `B⁻¹` stands
/// in for `K_mm P⁻¹` with `P = K_mm + K_mn K_nm / sigma_z2`.
#[derive(Debug, Clone)]
pub struct SparseOutput {
    pub name: String,
    pub h: Hyperparams,
    pub elbo: f64,
    pub(crate) beta: DVector<f64>,
    pub(crate) b: DMatrix<f64>,
    pub(crate) l_mm: DMatrix<f64>,
    pub(crate) l_b: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SparseGpModel {
    pub input_schema: Vec<String>,
    pub output_schema: Vec<String>,
    pub scaler: Scaler,
    pub x_m: DMatrix<f64>,
    pub outputs: Vec<SparseOutput>,
}

/// Variational lower bound on the log marginal likelihood for one output,
/// with gradients with respect to the log-hyperparameters and the inducing
/// inputs. Everything is evaluated through `B = I + A Aᵀ`,
/// `A = L_mm⁻¹ K_mn / sigma_z`, which stays well conditioned in the
/// small-noise regime where the direct inducing-space system does not.
fn elbo_with_grads(
    x_m: &DMatrix<f64>,
    h: &Hyperparams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    if !h.is_valid() {
        return None;
    }
    let (n, d) = (x.nrows(), x.ncols());
    let m = x_m.nrows();
    let s = h.sigma_z2;

    let mut k_mm = gram(x_m, x_m, h);
    let (l_mm, jit) = chol_jittered(&k_mm, h.sigma_f2).ok()?;
    for i in 0..m {
        k_mm[(i, i)] += jit;
    }
    let k_mn = gram(x_m, x, h);
    let a_tilde = l_mm.solve_lower_triangular(&k_mn)?;
    let a = &a_tilde / s.sqrt();
    let b = DMatrix::identity(m, m) + &a * a.transpose();
    let l_b = nalgebra::Cholesky::new(b.clone())?.unpack();

    let c_hat = l_b.solve_lower_triangular(&(&a * y))?;
    let h_hat = l_b
        .transpose()
        .solve_upper_triangular(&c_hat)
        .expect("triangular factor is invertible");
    // Fitted values and residuals of the implied ridge regression; the fit
    // term y'(K+sI)⁻¹y collapses to y·r / s without large cancellations.
    let fitted = a.transpose() * &h_hat;
    let r = y - &fitted;
    let e_tr = n as f64 * h.sigma_f2 - a_tilde.norm_squared();
    let value = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * s).ln()
        - 0.5 * log_det_from_chol(&l_b)
        - 0.5 * y.dot(&r) / s
        - 0.5 * e_tr / s;

    // Chain rule through the three kernel blocks: dF = sum(w_mm o dK_mm)
    // + sum(w_mn o dK_mn) + w_nn * sum_i dk_ii + (noise term).
    let b_inv = inv_from_chol(&l_b);
    let inner = DMatrix::identity(m, m) - &b_inv - &a * a.transpose()
        - (&h_hat * h_hat.transpose()) / s;
    let lt = l_mm.transpose();
    let half = lt.solve_upper_triangular(&inner)?;
    let w_mm = 0.5
        * lt.solve_upper_triangular(&half.transpose())?
            .transpose();
    let ib_a = (DMatrix::identity(m, m) - &b_inv) * &a;
    let w_mn = lt.solve_upper_triangular(
        &(ib_a / s.sqrt() + (&h_hat * r.transpose()) / (s * s.sqrt())),
    )?;
    let w_nn = -0.5 / s;

    let mut grad_theta = DVector::zeros(d + 2);
    for dd in 0..d {
        let mut acc = 0.0;
        for p_i in 0..m {
            for q in 0..m {
                let diff = x_m[(p_i, dd)] - x_m[(q, dd)];
                acc += w_mm[(p_i, q)] * k_mm[(p_i, q)] * diff * diff;
            }
            for i in 0..n {
                let diff = x_m[(p_i, dd)] - x[(i, dd)];
                acc += w_mn[(p_i, i)] * k_mn[(p_i, i)] * diff * diff;
            }
        }
        grad_theta[dd] = 0.5 * acc / h.lambda_diag[dd];
    }
    grad_theta[d] = w_mm.component_mul(&k_mm).sum()
        + w_mn.component_mul(&k_mn).sum()
        + w_nn * n as f64 * h.sigma_f2;
    grad_theta[d + 1] =
        0.5 * (m as f64 - n as f64 - b_inv.trace()) + 0.5 * (r.norm_squared() + e_tr) / s;

    let mut grad_xm = DMatrix::zeros(m, d);
    for p_i in 0..m {
        for dd in 0..d {
            let mut acc = 0.0;
            for q in 0..m {
                acc += 2.0 * w_mm[(p_i, q)] * k_mm[(p_i, q)] * (x_m[(q, dd)] - x_m[(p_i, dd)]);
            }
            for i in 0..n {
                acc += w_mn[(p_i, i)] * k_mn[(p_i, i)] * (x[(i, dd)] - x_m[(p_i, dd)]);
            }
            grad_xm[(p_i, dd)] = acc / h.lambda_diag[dd];
        }
    }
    Some((value, grad_theta, grad_xm))
}

/// k-means++ seeding followed by a short Lloyd refinement; gives inducing
/// inputs that cover the training cloud before joint optimization.
fn kmeans_inducing(x: &DMatrix<f64>, m_m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| (x.row(i) - x.row(centers[0])).norm_squared())
        .collect();
    while centers.len() < m_m {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        };
        centers.push(next);
        for i in 0..n {
            d2[i] = d2[i].min((x.row(i) - x.row(next)).norm_squared());
        }
    }
    let mut cent = DMatrix::from_fn(m_m, x.ncols(), |c, dd| x[(centers[c], dd)]);
    for _ in 0..20 {
        let mut sums = DMatrix::<f64>::zeros(m_m, x.ncols());
        let mut counts = vec![0usize; m_m];
        for i in 0..n {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for c in 0..m_m {
                let dist = (x.row(i) - cent.row(c)).norm_squared();
                if dist < bd {
                    bd = dist;
                    best = c;
                }
            }
            counts[best] += 1;
            for dd in 0..x.ncols() {
                sums[(best, dd)] += x[(i, dd)];
            }
        }
        for c in 0..m_m {
            if counts[c] > 0 {
                for dd in 0..x.ncols() {
                    cent[(c, dd)] = sums[(c, dd)] / counts[c] as f64;
                }
            }
        }
    }
    cent
}

/// Assemble a sparse model from fixed inducing inputs and per-output
/// hyperparameters.
pub fn sparse_from(
    set: &SampleSet,
    x_m: DMatrix<f64>,
    hs: &[Hyperparams],
) -> Result<SparseGpModel, GpError> {
    let scaler = set.scaler.clone().ok_or(GpError::NotStandardized)?;
    assert_eq!(hs.len(), set.n_y());
    let m_m = x_m.nrows();
    if m_m < 1 || m_m > set.n_rows() {
        return Err(GpError::InducingCount {
            m_m,
            m_s: set.n_rows(),
        });
    }
    let outputs = set
        .output_schema
        .iter()
        .zip(hs)
        .enumerate()
        .map(|(j, (name, h))| {
            let y = set.y.column(j).into_owned();
            let elbo = elbo_with_grads(&x_m, h, &set.x, &y)
                .map(|(v, _, _)| v)
                .ok_or(GpError::NonPdKernel)?;
            let k_mm = gram(&x_m, &x_m, h);
            let (l_mm, _) = chol_jittered(&k_mm, h.sigma_f2)?;
            let k_mn = gram(&x_m, &set.x, h);
            let s = h.sigma_z2;
            let a = l_mm
                .solve_lower_triangular(&k_mn)
                .ok_or(GpError::NonPdKernel)?
                / s.sqrt();
            let b = DMatrix::identity(m_m, m_m) + &a * a.transpose();
            let l_b = nalgebra::Cholesky::new(b.clone())
                .ok_or(GpError::NonPdKernel)?
                .unpack();
            let c_hat = l_b
                .solve_lower_triangular(&(&a * &y))
                .ok_or(GpError::NonPdKernel)?;
            let h_hat = l_b
                .transpose()
                .solve_upper_triangular(&c_hat)
                .ok_or(GpError::NonPdKernel)?;
            let beta = l_mm
                .transpose()
                .solve_upper_triangular(&h_hat)
                .ok_or(GpError::NonPdKernel)?
                / s.sqrt();
            Ok(SparseOutput {
                name: name.clone(),
                h: h.clone(),
                elbo,
                beta,
                b,
                l_mm,
                l_b,
            })
        })
        .collect::<Result<Vec<_>, GpError>>()?;
    Ok(SparseGpModel {
        input_schema: set.input_schema.clone(),
        output_schema: set.output_schema.clone(),
        scaler,
        x_m,
        outputs,
    })
}

/// Maximize the summed per-output variational bound over hyperparameters
/// and, unless `pin_inducing` is set, a shared inducing set initialized by
/// k-means over the training inputs.
pub fn train_sparse(
    set: &SampleSet,
    m_m: usize,
    cfg: &TrainCfg,
    pin_inducing: bool,
) -> Result<SparseGpModel, GpError> {
    if set.scaler.is_none() {
        return Err(GpError::NotStandardized);
    }
    if m_m < 1 || m_m > set.n_rows() {
        return Err(GpError::InducingCount {
            m_m,
            m_s: set.n_rows(),
        });
    }
    let (d, n_y) = (set.n_x(), set.n_y());
    let ys: Vec<DVector<f64>> = (0..n_y).map(|j| set.y.column(j).into_owned()).collect();
    let n_xm = if pin_inducing { 0 } else { m_m * d };

    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>)> = None;
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let thetas0: Vec<f64> = (0..n_y * (d + 2))
            .map(|_| rng.random_range(cfg.init_lo..cfg.init_hi))
            .collect();
        let xm0 = kmeans_inducing(&set.x, m_m, &mut rng);

        // One flat optimization vector: inducing coordinates first (row
        // major), then each output's log-hyperparameters.
        let mut z0 = DVector::zeros(n_xm + n_y * (d + 2));
        if !pin_inducing {
            for p in 0..m_m {
                for dd in 0..d {
                    z0[p * d + dd] = xm0[(p, dd)];
                }
            }
        }
        for (i, t) in thetas0.iter().enumerate() {
            z0[n_xm + i] = *t;
        }

        let xm_pinned = xm0.clone();
        let obj = |z: &DVector<f64>| {
            let x_m = if pin_inducing {
                xm_pinned.clone()
            } else {
                DMatrix::from_fn(m_m, d, |p, dd| z[p * d + dd])
            };
            let mut value = 0.0;
            let mut grad = DVector::zeros(z.len());
            for j in 0..n_y {
                let theta =
                    DVector::from_fn(d + 2, |i, _| z[n_xm + j * (d + 2) + i]);
                let h = Hyperparams::from_log(&theta);
                // A noise floor keeps the inducing-space systems well
                // conditioned; letting sigma_z2 collapse makes the bound
                // numerically meaningless.
                if h.sigma_z2 < 1e-6 {
                    return None;
                }
                let (v, gt, gx) = elbo_with_grads(&x_m, &h, &set.x, &ys[j])?;
                value += v;
                for i in 0..d + 2 {
                    grad[n_xm + j * (d + 2) + i] = -gt[i];
                }
                if !pin_inducing {
                    for p in 0..m_m {
                        for dd in 0..d {
                            grad[p * d + dd] -= gx[(p, dd)];
                        }
                    }
                }
            }
            Some((-value, grad))
        };

        if let Some((z, f)) = bfgs_minimize(obj, z0, cfg.max_iters, 1e-6) {
            if f.is_finite() && best.as_ref().is_none_or(|(bf, _, _)| f < *bf) {
                let x_m = if pin_inducing {
                    xm_pinned
                } else {
                    DMatrix::from_fn(m_m, d, |p, dd| z[p * d + dd])
                };
                best = Some((f, z, x_m));
            }
        }
    }
    let (_, z, x_m) =
        best.ok_or_else(|| GpError::TrainingFailed("sparse joint objective".into()))?;
    let hs: Vec<Hyperparams> = (0..n_y)
        .map(|j| {
            let theta = DVector::from_fn(d + 2, |i, _| z[n_xm + j * (d + 2) + i]);
            Hyperparams::from_log(&theta)
        })
        .collect();
    sparse_from(set, x_m, &hs)
}

/// Posterior mean and variance of every output at one standardized input,
/// through the inducing set only.
pub fn predict_sparse(model: &SparseGpModel, x_star: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let mut mu = DVector::zeros(model.outputs.len());
    let mut var = DVector::zeros(model.outputs.len());
    for (j, _) in model.outputs.iter().enumerate() {
        let (m, v) = model.predict_one(j, x_star);
        mu[j] = m;
        var[j] = v;
    }
    (mu, var)
}

impl SparseGpModel {
    /// `(K_mm⁻¹ - P⁻¹) k`, the weight vector of the variance correction.
    fn var_weights(&self, output: usize, k: &DVector<f64>) -> DVector<f64> {
        let out = &self.outputs[output];
        let a = out
            .l_mm
            .solve_lower_triangular(k)
            .expect("stored factor is triangular");
        let diff = &a - chol_solve(&out.l_b, &a);
        out.l_mm
            .transpose()
            .solve_upper_triangular(&diff)
            .expect("stored factor is triangular")
    }
}

impl SurrogatePosterior for SparseGpModel {
    fn input_schema(&self) -> &[String] {
        &self.input_schema
    }

    fn output_schema(&self) -> &[String] {
        &self.output_schema
    }

    fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    fn predict_one(&self, output: usize, x: &DVector<f64>) -> (f64, f64) {
        let out = &self.outputs[output];
        let k = kvec(&self.x_m, &out.h, x);
        let a = out
            .l_mm
            .solve_lower_triangular(&k)
            .expect("stored factor is triangular");
        let t = out
            .l_b
            .solve_lower_triangular(&a)
            .expect("stored factor is triangular");
        let var = out.h.sigma_f2 - a.dot(&a) + t.dot(&t);
        (out.beta.dot(&k), clamp_variance(var))
    }

    fn mean_grad(&self, output: usize, x: &DVector<f64>) -> DVector<f64> {
        let out = &self.outputs[output];
        mean_grad_from(&self.x_m, &out.h, &out.beta, x)
    }

    fn mean_hessian(&self, output: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let out = &self.outputs[output];
        mean_hessian_from(&self.x_m, &out.h, &out.beta, x)
    }

    fn var_grad(&self, output: usize, x: &DVector<f64>) -> DVector<f64> {
        let out = &self.outputs[output];
        let k = kvec(&self.x_m, &out.h, x);
        let w = self.var_weights(output, &k);
        -2.0 * kernel_jacobian(&self.x_m, &out.h, x, &k).transpose() * w
    }
}

/// Either model kind, as loaded from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Full(GpModel),
    Sparse(SparseGpModel),
}

impl LoadedModel {
    pub fn as_posterior(&self) -> &dyn SurrogatePosterior {
        match self {
            LoadedModel::Full(m) => m,
            LoadedModel::Sparse(m) => m,
        }
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

#[derive(Serialize, Deserialize)]
struct FullOutputJson {
    name: String,
    hyperparams: Hyperparams,
    nll: f64,
    beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SparseOutputJson {
    name: String,
    hyperparams: Hyperparams,
    elbo: f64,
    beta: Vec<f64>,
    b: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    format: String,
    kind: String,
    input_schema: Vec<String>,
    output_schema: Vec<String>,
    scaler: Scaler,
    #[serde(default)]
    x_train: Vec<Vec<f64>>,
    #[serde(default)]
    x_m: Vec<Vec<f64>>,
    #[serde(default)]
    outputs: Vec<FullOutputJson>,
    #[serde(default)]
    sparse_outputs: Vec<SparseOutputJson>,
}

pub const MODEL_FORMAT: &str = "gpccopf-model-v1";

pub fn save_model<W: Write>(model: &GpModel, w: &mut W) -> Result<(), GpError> {
    let json = ModelJson {
        format: MODEL_FORMAT.into(),
        kind: "full".into(),
        input_schema: model.input_schema.clone(),
        output_schema: model.output_schema.clone(),
        scaler: model.scaler.clone(),
        x_train: matrix_to_rows(&model.x_train),
        x_m: Vec::new(),
        outputs: model
            .outputs
            .iter()
            .map(|o| FullOutputJson {
                name: o.name.clone(),
                hyperparams: o.h.clone(),
                nll: o.nll,
                beta: o.beta.iter().copied().collect(),
            })
            .collect(),
        sparse_outputs: Vec::new(),
    };
    serde_json::to_writer_pretty(w, &json)?;
    Ok(())
}

pub fn save_sparse_model<W: Write>(model: &SparseGpModel, w: &mut W) -> Result<(), GpError> {
    let json = ModelJson {
        format: MODEL_FORMAT.into(),
        kind: "sparse".into(),
        input_schema: model.input_schema.clone(),
        output_schema: model.output_schema.clone(),
        scaler: model.scaler.clone(),
        x_train: Vec::new(),
        x_m: matrix_to_rows(&model.x_m),
        outputs: Vec::new(),
        sparse_outputs: model
            .outputs
            .iter()
            .map(|o| SparseOutputJson {
                name: o.name.clone(),
                hyperparams: o.h.clone(),
                elbo: o.elbo,
                beta: o.beta.iter().copied().collect(),
                b: matrix_to_rows(&o.b),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(w, &json)?;
    Ok(())
}

/// Rebuild a model from its JSON form; Cholesky factors are recomputed, the
/// serialized weights are taken as stored.
pub fn load_model<R: Read>(r: R) -> Result<LoadedModel, GpError> {
    let json: ModelJson = serde_json::from_reader(r)?;
    if json.format != MODEL_FORMAT {
        return Err(GpError::BadFormat(format!(
            "format tag {:?}, expected {MODEL_FORMAT:?}",
            json.format
        )));
    }
    match json.kind.as_str() {
        "full" => {
            let x_train = rows_to_matrix(&json.x_train);
            let outputs = json
                .outputs
                .into_iter()
                .map(|o| {
                    let mut a = gram(&x_train, &x_train, &o.hyperparams);
                    for i in 0..a.nrows() {
                        a[(i, i)] += o.hyperparams.sigma_z2;
                    }
                    let (l, _) = chol_jittered(&a, o.hyperparams.sigma_f2)?;
                    Ok(GpOutput {
                        name: o.name,
                        h: o.hyperparams,
                        nll: o.nll,
                        beta: DVector::from(o.beta),
                        l,
                    })
                })
                .collect::<Result<Vec<_>, GpError>>()?;
            Ok(LoadedModel::Full(GpModel {
                input_schema: json.input_schema,
                output_schema: json.output_schema,
                scaler: json.scaler,
                x_train,
                outputs,
            }))
        }
        "sparse" => {
            let x_m = rows_to_matrix(&json.x_m);
            let outputs = json
                .sparse_outputs
                .into_iter()
                .map(|o| {
                    let (l_mm, _) =
                        chol_jittered(&gram(&x_m, &x_m, &o.hyperparams), o.hyperparams.sigma_f2)?;
                    let b = rows_to_matrix(&o.b);
                    let l_b = nalgebra::Cholesky::new(b.clone())
                        .ok_or(GpError::NonPdKernel)?
                        .unpack();
                    Ok(SparseOutput {
                        name: o.name,
                        h: o.hyperparams,
                        elbo: o.elbo,
                        beta: DVector::from(o.beta),
                        b,
                        l_mm,
                        l_b,
                    })
                })
                .collect::<Result<Vec<_>, GpError>>()?;
            Ok(LoadedModel::Sparse(SparseGpModel {
                input_schema: json.input_schema,
                output_schema: json.output_schema,
                scaler: json.scaler,
                x_m,
                outputs,
            }))
        }
        other => Err(GpError::BadFormat(format!("unknown model kind {other:?}"))),
    }
}
