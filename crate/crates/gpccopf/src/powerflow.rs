//! AC power flow (Newton-Raphson, polar form), the linear DC approximation,
//! and per-branch flow evaluation.

use crate::grid::{admittance_matrix, BusKind, CaseError, GridCase};
use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")]
    NotConverged { iterations: usize, mismatch: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("iterate left the physical region at iteration {iteration} (angle step {max_step:.2} rad)")]
    Diverged { iteration: usize, max_step: f64 },
    #[error("active injections sum to {sum:.3e}, not zero: the lossless model needs balance")]
    Unbalanced { sum: f64 },
    #[error("singular reduced susceptance matrix")]
    SingularSusceptance,
    #[error("injection vector has length {got}, case has {want} {kind}")]
    DimensionMismatch {
        kind: &'static str,
        got: usize,
        want: usize,
    },
}

/// Device-level powers, aligned with the owning lists of a `GridCase`:
/// `p_g[i]` belongs to `case.gens[i]`, `p_l[i]`/`q_l[i]` to `case.loads[i]`,
/// `p_rs[i]`/`q_rs[i]` to `case.res_units[i]`. The slack generator's `p_g`
/// entry is ignored by the solve; the slack bus absorbs the residual.
#[derive(Debug, Clone)]
pub struct InjectionSet {
    pub p_g: Vec<f64>,
    pub p_l: Vec<f64>,
    pub q_l: Vec<f64>,
    pub p_rs: Vec<f64>,
    pub q_rs: Vec<f64>,
}

impl InjectionSet {
    /// Net (p, q) per bus: generation plus RES minus load. Generator reactive
    /// output is not part of the specification, so `q` here covers the PQ-bus
    /// equations only; gen-bus q falls out of the solve.
    pub fn net_per_bus(&self, case: &GridCase) -> Result<(DVector<f64>, DVector<f64>), PfError> {
        let check = |kind: &'static str, got: usize, want: usize| {
            if got != want {
                Err(PfError::DimensionMismatch { kind, got, want })
            } else {
                Ok(())
            }
        };
        check("gens", self.p_g.len(), case.gens.len())?;
        check("loads", self.p_l.len(), case.loads.len())?;
        check("loads", self.q_l.len(), case.loads.len())?;
        check("res units", self.p_rs.len(), case.res_units.len())?;
        check("res units", self.q_rs.len(), case.res_units.len())?;
        let m = case.n_buses();
        let mut p = DVector::zeros(m);
        let mut q = DVector::zeros(m);
        for (g, &pg) in case.gens.iter().zip(&self.p_g) {
            p[case.bus_index(g.bus)] += pg;
        }
        for (l, (&pl, &ql)) in case.loads.iter().zip(self.p_l.iter().zip(&self.q_l)) {
            let k = case.bus_index(l.bus);
            p[k] -= pl;
            q[k] -= ql;
        }
        for (r, (&pr, &qr)) in case.res_units.iter().zip(self.p_rs.iter().zip(&self.q_rs)) {
            let k = case.bus_index(r.bus);
            p[k] += pr;
            q[k] += qr;
        }
        Ok((p, q))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchFlow {
    pub p: f64,
    pub q: f64,
    pub s: f64,
}

/// Converged operating point. `p`/`q` are realized net injections per bus,
/// including the slack residual and gen-bus reactive output.
#[derive(Debug, Clone, Serialize)]
pub struct PfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub flows: Vec<BranchFlow>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Net complex injections implied by a voltage profile:
/// `s_k = v_k * conj((Y v)_k)` split into (p, q).
pub(crate) fn implied_injections(
    y: &DMatrix<Complex<f64>>,
    v: &DVector<f64>,
    theta: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let m = v.len();
    let mut p = DVector::zeros(m);
    let mut q = DVector::zeros(m);
    for k in 0..m {
        let (mut pk, mut qk) = (0.0, 0.0);
        for j in 0..m {
            let yj = y[(k, j)];
            if yj.re == 0.0 && yj.im == 0.0 {
                continue;
            }
            let dt = theta[k] - theta[j];
            let (sin, cos) = dt.sin_cos();
            pk += v[j] * (yj.re * cos + yj.im * sin);
            qk += v[j] * (yj.re * sin - yj.im * cos);
        }
        p[k] = v[k] * pk;
        q[k] = v[k] * qk;
    }
    (p, q)
}

/// Partial derivatives of the implied injections with respect to angles and
/// magnitudes, as four dense m-by-m blocks (dp/dtheta, dp/dv, dq/dtheta,
/// dq/dv). Diagonal entries use the textbook shortcuts in terms of the
/// injections themselves.
pub(crate) fn injection_jacobian(
    y: &DMatrix<Complex<f64>>,
    v: &DVector<f64>,
    theta: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = v.len();
    let mut dp_dt = DMatrix::zeros(m, m);
    let mut dp_dv = DMatrix::zeros(m, m);
    let mut dq_dt = DMatrix::zeros(m, m);
    let mut dq_dv = DMatrix::zeros(m, m);
    for k in 0..m {
        let ykk = y[(k, k)];
        dp_dt[(k, k)] = -q[k] - ykk.im * v[k] * v[k];
        dp_dv[(k, k)] = p[k] / v[k] + ykk.re * v[k];
        dq_dt[(k, k)] = p[k] - ykk.re * v[k] * v[k];
        dq_dv[(k, k)] = q[k] / v[k] - ykk.im * v[k];
        for j in 0..m {
            if j == k {
                continue;
            }
            let yj = y[(k, j)];
            if yj.re == 0.0 && yj.im == 0.0 {
                continue;
            }
            let dt = theta[k] - theta[j];
            let (sin, cos) = dt.sin_cos();
            let gc_bs = yj.re * cos + yj.im * sin;
            let gs_bc = yj.re * sin - yj.im * cos;
            dp_dt[(k, j)] = v[k] * v[j] * gs_bc;
            dp_dv[(k, j)] = v[k] * gc_bs;
            dq_dt[(k, j)] = -v[k] * v[j] * gc_bs;
            dq_dv[(k, j)] = v[k] * gs_bc;
        }
    }
    (dp_dt, dp_dv, dq_dt, dq_dv)
}

/// Newton-Raphson AC power flow in polar coordinates. Flat start with PV and
/// slack magnitudes pinned to their set-points; no reactive-limit switching.
pub fn solve_ac_pf(
    case: &GridCase,
    inj: &InjectionSet,
    tol: f64,
    max_iter: usize,
) -> Result<PfSolution, PfError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let y = admittance_matrix(case)?;
    let (p_spec, q_spec) = inj.net_per_bus(case)?;
    let m = case.n_buses();
    let slack = case.slack_index();

    let mut v = DVector::from_element(m, 1.0);
    let mut theta = DVector::zeros(m);
    for (k, bus) in case.buses.iter().enumerate() {
        if let Some(vset) = case.v_set_at(bus.id) {
            v[k] = vset;
        }
    }

    // Unknowns: theta at every non-slack bus, v at PQ buses. The mismatch
    // rows pair up one-to-one (p rows, then q rows).
    let ang: Vec<usize> = (0..m).filter(|&k| k != slack).collect();
    let mag: Vec<usize> = (0..m)
        .filter(|&k| case.buses[k].kind == BusKind::Pq)
        .collect();
    let n_unk = ang.len() + mag.len();

    let mut iterations = 0;
    loop {
        let (p_calc, q_calc) = implied_injections(&y, &v, &theta);
        let mut mismatch = DVector::zeros(n_unk);
        for (r, &k) in ang.iter().enumerate() {
            mismatch[r] = p_spec[k] - p_calc[k];
        }
        for (r, &k) in mag.iter().enumerate() {
            mismatch[ang.len() + r] = q_spec[k] - q_calc[k];
        }
        let max_mismatch = mismatch.amax();
        if max_mismatch <= tol {
            let (p, q) = implied_injections(&y, &v, &theta);
            let flows = branch_flows(case, v.as_slice(), theta.as_slice());
            return Ok(PfSolution {
                v: v.as_slice().to_vec(),
                theta: theta.as_slice().to_vec(),
                p: p.as_slice().to_vec(),
                q: q.as_slice().to_vec(),
                flows,
                iterations,
                max_mismatch,
            });
        }
        if iterations >= max_iter {
            return Err(PfError::NotConverged {
                iterations,
                mismatch: max_mismatch,
            });
        }

        let (dp_dt, dp_dv, dq_dt, dq_dv) = injection_jacobian(&y, &v, &theta, &p_calc, &q_calc);
        let mut jac = DMatrix::zeros(n_unk, n_unk);
        for (r, &k) in ang.iter().enumerate() {
            for (c, &j) in ang.iter().enumerate() {
                jac[(r, c)] = dp_dt[(k, j)];
            }
            for (c, &j) in mag.iter().enumerate() {
                jac[(r, ang.len() + c)] = dp_dv[(k, j)];
            }
        }
        for (r, &k) in mag.iter().enumerate() {
            for (c, &j) in ang.iter().enumerate() {
                jac[(ang.len() + r, c)] = dq_dt[(k, j)];
            }
            for (c, &j) in mag.iter().enumerate() {
                jac[(ang.len() + r, ang.len() + c)] = dq_dv[(k, j)];
            }
        }
        let step = jac
            .lu()
            .solve(&mismatch)
            .ok_or(PfError::SingularJacobian { iteration: iterations })?;

        let max_ang_step = step.rows(0, ang.len()).amax();
        if max_ang_step >= 3.0 {
            return Err(PfError::Diverged {
                iteration: iterations,
                max_step: max_ang_step,
            });
        }
        for (r, &k) in ang.iter().enumerate() {
            theta[k] += step[r];
        }
        for (r, &k) in mag.iter().enumerate() {
            v[k] += step[ang.len() + r];
            if v[k] <= 0.0 {
                return Err(PfError::Diverged {
                    iteration: iterations,
                    max_step: max_ang_step,
                });
            }
        }
        iterations += 1;
    }
}

/// Physical from-end flow of one branch given endpoint voltages:
/// `s_kj = v̄_k (y (v̄_k − v̄_j))*` with `y = g + jb` the series admittance.
fn end_flow(y: Complex<f64>, vk: f64, vj: f64, dt: f64) -> (f64, f64) {
    let (g, b) = (y.re, y.im);
    let (sin, cos) = dt.sin_cos();
    let p = g * vk * vk - vk * vj * (g * cos + b * sin);
    let q = -b * vk * vk - vk * vj * (g * sin - b * cos);
    (p, q)
}

/// From-end branch flows for a voltage profile. Per-bus net injection then
/// decomposes exactly into shunt consumption plus outgoing flows:
/// `p_k = v_k² g_shunt + Σ p_kj` and `q_k = −v_k² b_shunt + Σ q_kj`,
/// summing the from-end flow of every branch incident to bus k.
pub fn branch_flows(case: &GridCase, v: &[f64], theta: &[f64]) -> Vec<BranchFlow> {
    case.branches
        .iter()
        .map(|br| {
            let (k, j) = (case.bus_index(br.from), case.bus_index(br.to));
            let (p, q) = end_flow(br.admittance(), v[k], v[j], theta[k] - theta[j]);
            BranchFlow {
                p,
                q,
                s: p.hypot(q),
            }
        })
        .collect()
}

/// DC power flow: angles from the reduced susceptance system
/// `B' θ = p` with the slack row and column removed and `θ[slack] = 0`.
/// Injections must balance; losses are outside this model.
pub fn solve_dc_pf(case: &GridCase, p: &[f64]) -> Result<Vec<f64>, PfError> {
    let m = case.n_buses();
    if p.len() != m {
        return Err(PfError::DimensionMismatch {
            kind: "buses",
            got: p.len(),
            want: m,
        });
    }
    let sum: f64 = p.iter().sum();
    if sum.abs() > 1e-9 {
        return Err(PfError::Unbalanced { sum });
    }
    let mut b = DMatrix::zeros(m, m);
    for br in &case.branches {
        let w = 1.0 / br.x;
        let (k, j) = (case.bus_index(br.from), case.bus_index(br.to));
        b[(k, k)] += w;
        b[(j, j)] += w;
        b[(k, j)] -= w;
        b[(j, k)] -= w;
    }
    let slack = case.slack_index();
    let keep: Vec<usize> = (0..m).filter(|&k| k != slack).collect();
    let mut b_red = DMatrix::zeros(keep.len(), keep.len());
    let mut p_red = DVector::zeros(keep.len());
    for (r, &k) in keep.iter().enumerate() {
        p_red[r] = p[k];
        for (c, &j) in keep.iter().enumerate() {
            b_red[(r, c)] = b[(k, j)];
        }
    }
    let theta_red = b_red
        .lu()
        .solve(&p_red)
        .ok_or(PfError::SingularSusceptance)?;
    let mut theta = vec![0.0; m];
    for (r, &k) in keep.iter().enumerate() {
        theta[k] = theta_red[r];
    }
    Ok(theta)
}

/// Per-branch DC active flow `(θ_k − θ_j)/x` at the from-end.
pub fn dc_branch_flows(case: &GridCase, theta: &[f64]) -> Vec<f64> {
    case.branches
        .iter()
        .map(|br| (theta[case.bus_index(br.from)] - theta[case.bus_index(br.to)]) / br.x)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{cases, parse_case};
    use approx::assert_abs_diff_eq;

    fn two_bus(load_mw: f64, load_mvar: f64) -> GridCase {
        let text = format!(
            r#"{{
            "base_mva": 100.0,
            "buses": [
                {{"id": 1, "kind": "slack", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0}},
                {{"id": 2, "kind": "pq", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0}}
            ],
            "branches": [{{"from": 1, "to": 2, "r": 0.0, "x": 0.1, "s_max_mva": 100.0}}],
            "gens": [{{"bus": 1, "p_min_mw": 0.0, "p_max_mw": 100.0, "q_min_mvar": -100.0, "q_max_mvar": 100.0, "v_set": 1.0, "c2": 0.1, "c1": 1.0, "c0": 0.0}}],
            "loads": [{{"bus": 2, "p_ref_mw": {load_mw}, "gamma": {}}}],
            "res": []
        }}"#,
            load_mvar / load_mw
        );
        parse_case(&text).unwrap()
    }

    fn inj_for(case: &GridCase) -> InjectionSet {
        InjectionSet {
            p_g: vec![0.0; case.gens.len()],
            p_l: case.loads.iter().map(|l| l.p_ref).collect(),
            q_l: case.loads.iter().map(|l| l.p_ref * l.gamma).collect(),
            p_rs: case.res_units.iter().map(|r| r.p_ref).collect(),
            q_rs: case.res_units.iter().map(|r| r.p_ref * r.gamma).collect(),
        }
    }

    #[test]
    fn zero_injections_converge_immediately() {
        let case = two_bus(10.0, 3.0);
        let inj = InjectionSet {
            p_g: vec![0.0],
            p_l: vec![0.0],
            q_l: vec![0.0],
            p_rs: vec![],
            q_rs: vec![],
        };
        let sol = solve_ac_pf(&case, &inj, 1e-8, 20).unwrap();
        assert_eq!(sol.iterations, 0);
        for k in 0..2 {
            assert_eq!(sol.v[k], 1.0);
            assert_eq!(sol.theta[k], 0.0);
        }
        assert!(sol.flows[0].s.abs() < 1e-15);
    }

    #[test]
    fn two_bus_load_matches_closed_form() {
        // Lossless line x=0.1 from slack v=1 to a 0.1+j0.03 p.u. load. The
        // single-line injection at bus 2 in closed form:
        //   p_2 = (v1 v2 / x) sin θ2,  q_2 = (v2² − v1 v2 cos θ2)/x.
        let case = two_bus(10.0, 3.0);
        let sol = solve_ac_pf(&case, &inj_for(&case), 1e-10, 20).unwrap();
        let (v2, t2) = (sol.v[1], sol.theta[1]);
        assert_abs_diff_eq!(v2 * t2.sin() / 0.1, -0.1, epsilon = 1e-8);
        assert_abs_diff_eq!((v2 * v2 - v2 * t2.cos()) / 0.1, -0.03, epsilon = 1e-8);
        assert!(sol.iterations <= 5);
    }

    #[test]
    fn ieee9_reference_injections_converge() {
        let case = cases::ieee9();
        // Deterministic generation split covering load plus an allowance for
        // losses; the slack picks up the residual.
        let mut inj = inj_for(&case);
        let total_load: f64 = inj.p_l.iter().sum::<f64>() - inj.p_rs.iter().sum::<f64>();
        let wsum: f64 = case.gens.iter().map(|g| g.p_max).sum();
        for (slot, g) in inj.p_g.iter_mut().zip(&case.gens) {
            *slot = total_load * g.p_max / wsum;
        }
        let sol = solve_ac_pf(&case, &inj, 1e-8, 20).unwrap();
        assert!(sol.iterations <= 6, "took {} iterations", sol.iterations);
        assert!(sol.max_mismatch < 1e-8);
        // Voltage profile should sit inside a plausible operating band.
        for &vk in &sol.v {
            assert!(vk > 0.9 && vk < 1.1);
        }
    }

    #[test]
    fn per_bus_balance_decomposes_into_flows_and_shunts() {
        let case = cases::ieee9();
        let mut inj = inj_for(&case);
        inj.p_g = vec![0.7, 1.6, 0.85];
        let sol = solve_ac_pf(&case, &inj, 1e-9, 20).unwrap();
        let m = case.n_buses();
        let mut p_acc = vec![0.0; m];
        let mut q_acc = vec![0.0; m];
        for (k, bus) in case.buses.iter().enumerate() {
            p_acc[k] += sol.v[k] * sol.v[k] * bus.g_shunt;
            q_acc[k] -= sol.v[k] * sol.v[k] * bus.b_shunt;
        }
        for (br, fl) in case.branches.iter().zip(&sol.flows) {
            let k = case.bus_index(br.from);
            p_acc[k] += fl.p;
            q_acc[k] += fl.q;
            // To-end flow: same physical formula viewed from the other side.
            let j = case.bus_index(br.to);
            let (pr, qr) = end_flow(
                br.admittance(),
                sol.v[j],
                sol.v[k],
                sol.theta[j] - sol.theta[k],
            );
            p_acc[j] += pr;
            q_acc[j] += qr;
        }
        for k in 0..m {
            assert_abs_diff_eq!(p_acc[k], sol.p[k], epsilon = 1e-8);
            assert_abs_diff_eq!(q_acc[k], sol.q[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let case = cases::ieee9();
        let y = admittance_matrix(&case).unwrap();
        let m = case.n_buses();
        // Perturbed interior point, away from the flat-start symmetry.
        let v = DVector::from_iterator(m, (0..m).map(|k| 1.0 + 0.01 * (k as f64 % 3.0)));
        let theta = DVector::from_iterator(m, (0..m).map(|k| 0.02 * (k as f64) - 0.05));
        let (p, q) = implied_injections(&y, &v, &theta);
        let (dp_dt, dp_dv, dq_dt, dq_dv) = injection_jacobian(&y, &v, &theta, &p, &q);
        let h = 1e-6;
        for j in 0..m {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let (pp, qp) = implied_injections(&y, &v, &tp);
            let (pm, qm) = implied_injections(&y, &v, &tm);
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let (pvp, qvp) = implied_injections(&y, &vp, &theta);
            let (pvm, qvm) = implied_injections(&y, &vm, &theta);
            for k in 0..m {
                assert_abs_diff_eq!(dp_dt[(k, j)], (pp[k] - pm[k]) / (2.0 * h), epsilon = 1e-5);
                assert_abs_diff_eq!(dq_dt[(k, j)], (qp[k] - qm[k]) / (2.0 * h), epsilon = 1e-5);
                assert_abs_diff_eq!(dp_dv[(k, j)], (pvp[k] - pvm[k]) / (2.0 * h), epsilon = 1e-5);
                assert_abs_diff_eq!(dq_dv[(k, j)], (qvp[k] - qvm[k]) / (2.0 * h), epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn hopeless_load_reports_divergence() {
        let case = two_bus(10000.0, 3000.0);
        let err = solve_ac_pf(&case, &inj_for(&case), 1e-8, 30).unwrap_err();
        assert!(matches!(
            err,
            PfError::Diverged { .. } | PfError::NotConverged { .. } | PfError::SingularJacobian { .. }
        ));
    }

    #[test]
    fn larger_cases_converge_at_reference_injections() {
        for case in [cases::ieee39(), cases::ieee118()] {
            let mut inj = inj_for(&case);
            let total: f64 = inj.p_l.iter().sum::<f64>() - inj.p_rs.iter().sum::<f64>();
            let wsum: f64 = case.gens.iter().map(|g| g.p_max).sum();
            for (slot, g) in inj.p_g.iter_mut().zip(&case.gens) {
                *slot = total * g.p_max / wsum;
            }
            let sol = solve_ac_pf(&case, &inj, 1e-8, 30).unwrap();
            assert!(sol.max_mismatch < 1e-8);
            assert!(sol.v.iter().all(|&v| v > 0.8 && v < 1.2));
        }
    }

    #[test]
    fn dc_two_bus_angle_difference() {
        let case = two_bus(10.0, 3.0);
        let theta = solve_dc_pf(&case, &[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(theta[0] - theta[1], 0.1, epsilon = 1e-12);
        assert_eq!(theta[0], 0.0);
        assert_abs_diff_eq!(dc_branch_flows(&case, &theta)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dc_zero_injections_give_zero_angles() {
        let case = cases::ieee9();
        let theta = solve_dc_pf(&case, &vec![0.0; 9]).unwrap();
        assert!(theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn dc_rejects_unbalanced_injections() {
        let case = two_bus(10.0, 3.0);
        assert!(matches!(
            solve_dc_pf(&case, &[1.0, -0.5]),
            Err(PfError::Unbalanced { .. })
        ));
    }

    #[test]
    fn dc_reproduces_injections_and_tracks_ac() {
        let case = cases::ieee9();
        // Balanced injection pattern: generation scaled to match load exactly.
        let mut p = vec![0.0; 9];
        for l in &case.loads {
            p[case.bus_index(l.bus)] -= l.p_ref;
        }
        for r in &case.res_units {
            p[case.bus_index(r.bus)] += r.p_ref;
        }
        let deficit: f64 = -p.iter().sum::<f64>();
        let wsum: f64 = case.gens.iter().map(|g| g.p_max).sum();
        for g in &case.gens {
            p[case.bus_index(g.bus)] += deficit * g.p_max / wsum;
        }
        let theta = solve_dc_pf(&case, &p).unwrap();
        // Linear-system residual: B'theta must reproduce p at non-slack buses.
        let flows = dc_branch_flows(&case, &theta);
        let mut back = vec![0.0; 9];
        for (br, &f) in case.branches.iter().zip(&flows) {
            back[case.bus_index(br.from)] += f;
            back[case.bus_index(br.to)] -= f;
        }
        let slack = case.slack_index();
        for k in 0..9 {
            if k != slack {
                assert_abs_diff_eq!(back[k], p[k], epsilon = 1e-10);
            }
        }
    }
}
