//! Primal-dual interior-point solver for smooth constrained minimization.
//! Inequalities are relaxed through positive slacks and a log barrier whose
//! parameter shrinks geometrically once each barrier subproblem is solved
//! loosely; steps come from an inertia-corrected Newton system on the
//! condensed primal-dual equations with a fraction-to-boundary rule and an
//! Armijo backtracking line search on an exact-penalty merit function.
//!
//! Conventions: inequality constraints are written `c_in(x) >= 0`, equality
//! constraints `c_eq(x) = 0`, and the Lagrangian is
//! `f - r'c_eq - q'(c_in - s)`, so inequality multipliers are nonnegative.

use std::fmt;
use std::io::Write as IoWrite;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

type ValueGrad = Box<dyn Fn(&DVector<f64>) -> (f64, DVector<f64>) + Send + Sync>;
type VecJac = Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Send + Sync>;
type HessFn =
    Box<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Smooth problem in callback form. Declared counts are enforced against
/// every callback evaluation. The optional Hessian callback receives
/// `(x, r, q)` and must return the Lagrangian Hessian
/// `hess f - sum r_i hess c_eq_i - sum q_i hess c_in_i`; without it a damped
/// quasi-Newton approximation is maintained.
pub struct NlpProblem {
    pub n: usize,
    pub m_eq: usize,
    pub m_in: usize,
    pub objective: ValueGrad,
    pub eq_constraints: VecJac,
    pub ineq_constraints: VecJac,
    pub lagrangian_hessian: Option<HessFn>,
}

impl fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlpProblem")
            .field("n", &self.n)
            .field("m_eq", &self.m_eq)
            .field("m_in", &self.m_in)
            .field("exact_hessian", &self.lagrangian_hessian.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Optimal,
    MaxIter,
    Infeasible,
    NumericFailure,
}

/// Best iterate found, returned for every status.
#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x_star: DVector<f64>,
    pub r: DVector<f64>,
    pub q: DVector<f64>,
    pub s_sl: DVector<f64>,
    pub status: NlpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOpts {
    pub tol: f64,
    pub max_iter: usize,
    pub psi0: f64,
    pub psi_shrink: f64,
    /// When set, one CSV row per iteration: iter, f, psi and the four
    /// KKT block norms.
    pub iter_log: Option<PathBuf>,
}

impl Default for SolveOpts {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iter: 300,
            psi0: 0.1,
            psi_shrink: 0.2,
            iter_log: None,
        }
    }
}

/// Primal-dual point at which residuals are evaluated.
#[derive(Debug, Clone)]
pub struct KktPoint {
    pub x: DVector<f64>,
    pub s_sl: DVector<f64>,
    pub r: DVector<f64>,
    pub q: DVector<f64>,
}

/// The four first-order residual blocks: gradient stationarity, perturbed
/// complementarity `S q - psi e`, equality residual, inequality-minus-slack
/// residual.
#[derive(Debug, Clone)]
pub struct KktBlocks {
    pub stationarity: DVector<f64>,
    pub complementarity: DVector<f64>,
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
}

impl KktBlocks {
    pub fn norms(&self) -> [f64; 4] {
        [
            inf_norm(&self.stationarity),
            inf_norm(&self.complementarity),
            inf_norm(&self.eq),
            inf_norm(&self.ineq),
        ]
    }

    pub fn max(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Residual blocks at an arbitrary point, for the given barrier parameter.
pub fn kkt_residual(problem: &NlpProblem, point: &KktPoint, psi: f64) -> KktBlocks {
    let (_, gf) = (problem.objective)(&point.x);
    let (ce, je) = (problem.eq_constraints)(&point.x);
    let (ci, ji) = (problem.ineq_constraints)(&point.x);
    check_dims(problem, &gf, &ce, &je, &ci, &ji);
    blocks_from(problem, point, psi, &gf, &ce, &je, &ci, &ji)
}

fn check_dims(
    problem: &NlpProblem,
    gf: &DVector<f64>,
    ce: &DVector<f64>,
    je: &DMatrix<f64>,
    ci: &DVector<f64>,
    ji: &DMatrix<f64>,
) {
    assert_eq!(gf.len(), problem.n, "objective gradient length");
    assert_eq!(ce.len(), problem.m_eq, "equality constraint count");
    assert_eq!(je.shape(), (problem.m_eq, problem.n), "equality Jacobian");
    assert_eq!(ci.len(), problem.m_in, "inequality constraint count");
    assert_eq!(ji.shape(), (problem.m_in, problem.n), "inequality Jacobian");
}

#[allow(clippy::too_many_arguments)]
fn blocks_from(
    problem: &NlpProblem,
    point: &KktPoint,
    psi: f64,
    gf: &DVector<f64>,
    ce: &DVector<f64>,
    je: &DMatrix<f64>,
    ci: &DVector<f64>,
    ji: &DMatrix<f64>,
) -> KktBlocks {
    let stationarity = gf - je.transpose() * &point.r - ji.transpose() * &point.q;
    let complementarity =
        DVector::from_fn(problem.m_in, |i, _| point.s_sl[i] * point.q[i] - psi);
    KktBlocks {
        stationarity,
        complementarity,
        eq: ce.clone(),
        ineq: ci - &point.s_sl,
    }
}

/// Largest step in (0, 1] keeping `v + alpha dv >= (1 - tau) v` elementwise.
fn fraction_to_boundary(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-tau * v[i] / dv[i]);
        }
    }
    alpha
}

/// Exact-penalty merit: objective, barrier on slacks, l1 penalty on both
/// constraint residuals.
fn merit(
    f: f64,
    s: &DVector<f64>,
    ce: &DVector<f64>,
    ci: &DVector<f64>,
    psi: f64,
    nu: f64,
) -> f64 {
    let barrier: f64 = s.iter().map(|v| v.ln()).sum();
    let infeas = ce.iter().map(|v| v.abs()).sum::<f64>()
        + ci.iter().zip(s.iter()).map(|(c, sv)| (c - sv).abs()).sum::<f64>();
    f - psi * barrier + nu * infeas
}

/// Solve the condensed symmetric KKT system with an inertia check: the
/// corrected matrix must have exactly `n` positive and `m_eq` negative
/// eigenvalues before the direction is trusted. `delta0` seeds the diagonal
/// correction; the successful value is returned for reuse.
fn condensed_step(
    h: &DMatrix<f64>,
    je: &DMatrix<f64>,
    b1: &DVector<f64>,
    ce: &DVector<f64>,
    delta0: f64,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let n = h.nrows();
    let m_eq = je.nrows();
    let k = n + m_eq;
    let mut delta = delta0;
    let mut delta_c = 0.0f64;
    loop {
        let mut m = DMatrix::zeros(k, k);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = h[(i, j)];
            }
            m[(i, i)] += delta;
        }
        for i in 0..m_eq {
            for j in 0..n {
                m[(n + i, j)] = -je[(i, j)];
                m[(j, n + i)] = -je[(i, j)];
            }
            m[(n + i, n + i)] = -delta_c;
        }
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let eig = SymmetricEigen::new(m);
        let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let cut = 1e-11 * scale;
        let pos = eig.eigenvalues.iter().filter(|v| **v > cut).count();
        let neg = eig.eigenvalues.iter().filter(|v| **v < -cut).count();
        if pos == n && neg == m_eq {
            let mut rhs = DVector::zeros(k);
            for i in 0..n {
                rhs[i] = b1[i];
            }
            for i in 0..m_eq {
                rhs[n + i] = ce[i];
            }
            let coeffs = eig.eigenvectors.transpose() * rhs;
            let z = &eig.eigenvectors
                * DVector::from_fn(k, |i, _| coeffs[i] / eig.eigenvalues[i]);
            let dx = DVector::from_fn(n, |i, _| z[i]);
            let dr = DVector::from_fn(m_eq, |i, _| z[n + i]);
            return Some((dx, dr, delta));
        }
        if delta >= 1e9 {
            return None;
        }
        if pos + neg < k && m_eq > 0 {
            delta_c = (delta_c * 10.0).max(1e-12);
        }
        delta = if delta == 0.0 { 1e-8 } else { delta * 10.0 };
    }
}

/// Damped quasi-Newton update keeping the Lagrangian Hessian approximation
/// positive definite.
fn damped_bfgs_update(b: &mut DMatrix<f64>, step: &DVector<f64>, ygrad: &DVector<f64>) {
    let bs = &*b * step;
    let sbs = step.dot(&bs);
    let sy = step.dot(ygrad);
    if sbs <= 0.0 || step.norm() < 1e-14 {
        return;
    }
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let yt = theta * ygrad + (1.0 - theta) * &bs;
    let syt = step.dot(&yt);
    if syt <= 1e-14 * step.norm() * yt.norm() {
        return;
    }
    *b -= (&bs * bs.transpose()) / sbs;
    *b += (&yt * yt.transpose()) / syt;
}

struct IterLog {
    file: std::fs::File,
}

impl IterLog {
    fn open(path: &PathBuf) -> Self {
        let mut file = std::fs::File::create(path).expect("create iteration log");
        writeln!(file, "iter,f,psi,stationarity,complementarity,eq,ineq")
            .expect("write iteration log header");
        Self { file }
    }

    fn row(&mut self, iter: usize, f: f64, psi: f64, norms: [f64; 4]) {
        writeln!(
            self.file,
            "{iter},{f:.9e},{psi:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            norms[0], norms[1], norms[2], norms[3]
        )
        .expect("write iteration log row");
    }
}

/// Minimize the problem from `x0`. Every status returns the best iterate;
/// `Optimal` guarantees all four KKT blocks are at or below `opts.tol` with
/// strictly positive slacks and nonnegative inequality multipliers.
pub fn solve(problem: &NlpProblem, x0: &DVector<f64>, opts: &SolveOpts) -> NlpSolution {
    assert_eq!(x0.len(), problem.n, "start point length");
    assert!(x0.iter().all(|v| v.is_finite()), "start point must be finite");
    assert!(opts.tol > 0.0, "tolerance must be positive");
    let tau = 0.995;

    let mut log = opts.iter_log.as_ref().map(IterLog::open);

    let mut x = x0.clone();
    let (mut f, mut gf) = (problem.objective)(&x);
    let (mut ce, mut je) = (problem.eq_constraints)(&x);
    let (mut ci, mut ji) = (problem.ineq_constraints)(&x);
    check_dims(problem, &gf, &ce, &je, &ci, &ji);

    let mut s = DVector::from_fn(problem.m_in, |i, _| ci[i].max(1e-2));
    let mut psi = opts.psi0;
    let mut q = DVector::from_fn(problem.m_in, |i, _| psi / s[i]);
    let mut r = DVector::zeros(problem.m_eq);

    let mut bfgs = DMatrix::<f64>::identity(problem.n, problem.n);
    let mut nu = 1.0f64;
    let mut delta_seed = 0.0f64;
    let mut stall = 0usize;
    let mut status = NlpStatus::MaxIter;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let point = KktPoint {
            x: x.clone(),
            s_sl: s.clone(),
            r: r.clone(),
            q: q.clone(),
        };
        let true_blocks = blocks_from(problem, &point, 0.0, &gf, &ce, &je, &ci, &ji);
        if let Some(l) = log.as_mut() {
            l.row(iter, f, psi, true_blocks.norms());
        }
        if true_blocks.max() <= opts.tol {
            status = NlpStatus::Optimal;
            break;
        }
        // Barrier subproblem solved loosely: shrink psi and re-center.
        loop {
            let barrier_blocks = blocks_from(problem, &point, psi, &gf, &ce, &je, &ci, &ji);
            if barrier_blocks.max() <= psi.sqrt() && psi > 1e-20 {
                psi *= opts.psi_shrink;
            } else {
                break;
            }
        }

        let w = match &problem.lagrangian_hessian {
            Some(cb) => {
                let w = cb(&x, &r, &q);
                assert_eq!(w.shape(), (problem.n, problem.n), "Lagrangian Hessian");
                w
            }
            None => bfgs.clone(),
        };

        // Condense slacks and inequality multipliers out of the Newton
        // system; sigma is the diagonal S^-1 Q barrier curvature.
        let sigma = DVector::from_fn(problem.m_in, |i, _| q[i] / s[i]);
        let mut h = w;
        for a in 0..problem.m_in {
            for i in 0..problem.n {
                for j in 0..problem.n {
                    h[(i, j)] += ji[(a, i)] * sigma[a] * ji[(a, j)];
                }
            }
        }
        let rc = &ci - &s;
        let corr = DVector::from_fn(problem.m_in, |i, _| {
            psi / s[i] - q[i] - sigma[i] * rc[i]
        });
        let b1 = -(&gf - je.transpose() * &r - ji.transpose() * &q) + ji.transpose() * &corr;

        let Some((dx, dr, used_delta)) = condensed_step(&h, &je, &b1, &ce, delta_seed) else {
            status = NlpStatus::NumericFailure;
            break;
        };
        delta_seed = if used_delta > 0.0 { used_delta / 10.0 } else { 0.0 };
        let ds = &ji * &dx + &rc;
        let dq = DVector::from_fn(problem.m_in, |i, _| psi / s[i] - q[i] - sigma[i] * ds[i]);

        // Penalty weight large enough that the direction decreases the
        // merit function whenever the iterate is infeasible.
        let grad_part = gf.dot(&dx)
            - psi * (0..problem.m_in).map(|i| ds[i] / s[i]).sum::<f64>();
        let infeas_l1 = ce.iter().map(|v| v.abs()).sum::<f64>()
            + rc.iter().map(|v| v.abs()).sum::<f64>();
        let mult_scale = inf_norm(&r).max(inf_norm(&q)).max(inf_norm(&dr));
        nu = nu.max(2.0 * mult_scale);
        if infeas_l1 > 1e-12 {
            let needed = grad_part / (0.5 * infeas_l1);
            if needed > nu {
                nu = 1.5 * needed;
            }
        }
        let dphi = grad_part - nu * infeas_l1;

        let alpha_max = fraction_to_boundary(&s, &ds, tau);
        let alpha_q = fraction_to_boundary(&q, &dq, tau);
        let phi0 = merit(f, &s, &ce, &ci, psi, nu);

        let mut alpha = alpha_max;
        let mut accepted = false;
        for _ in 0..40 {
            let xt = &x + alpha * &dx;
            let st = &s + alpha * &ds;
            let (ft, gft) = (problem.objective)(&xt);
            let (cet, jet) = (problem.eq_constraints)(&xt);
            let (cit, jit) = (problem.ineq_constraints)(&xt);
            if ft.is_finite() && st.iter().all(|v| *v > 0.0) {
                let phit = merit(ft, &st, &cet, &cit, psi, nu);
                if phit <= phi0 + 1e-4 * alpha * dphi {
                    if problem.lagrangian_hessian.is_none() {
                        let r_new = &r + alpha * &dr;
                        let q_new = DVector::from_fn(problem.m_in, |i, _| {
                            q[i] + alpha_q * dq[i]
                        });
                        // Lagrangian gradient difference with the new
                        // multipliers held fixed at both endpoints.
                        let y = (&gft - jet.transpose() * &r_new - jit.transpose() * &q_new)
                            - (&gf - je.transpose() * &r_new - ji.transpose() * &q_new);
                        let step = alpha * &dx;
                        damped_bfgs_update(&mut bfgs, &step, &y);
                    }
                    x = xt;
                    s = st;
                    r += alpha * &dr;
                    for i in 0..problem.m_in {
                        q[i] += alpha_q * dq[i];
                    }
                    f = ft;
                    gf = gft;
                    ce = cet;
                    je = jet;
                    ci = cit;
                    ji = jit;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }

        let moved = accepted
            && alpha * inf_norm(&dx) > 1e-14 * (1.0 + inf_norm(&x));
        if moved {
            stall = 0;
        } else {
            stall += 1;
            delta_seed = (delta_seed * 10.0).max(1e-8);
            if stall >= 5 {
                let infeas = inf_norm(&ce).max(inf_norm(&rc));
                status = if infeas > opts.tol {
                    NlpStatus::Infeasible
                } else {
                    NlpStatus::MaxIter
                };
                break;
            }
        }
    }

    let point = KktPoint {
        x: x.clone(),
        s_sl: s.clone(),
        r: r.clone(),
        q: q.clone(),
    };
    let final_blocks = blocks_from(problem, &point, 0.0, &gf, &ce, &je, &ci, &ji);
    NlpSolution {
        x_star: x,
        r,
        q,
        s_sl: s,
        status,
        kkt_residual: final_blocks.max(),
        iterations,
    }
}
