//! Chance-constrained dispatch assembly. Decision vector: generator
//! set-points plus affine-recourse participation factors. Probabilistic
//! output and generator limits become deterministic margins through normal
//! quantiles applied to surrogate-propagated moments; the surrogate is
//! either a full posterior over the grid response or a fitted linear model
//! plus a posterior over its residuals. A deterministic AC dispatch over
//! voltages, angles, and injections serves as the uncertainty-free baseline.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{destandardize, input_schema, output_schema, DatasetError, SampleSet, Scaler};
use crate::gp::{matrix_to_rows, rows_to_matrix, GpModel, SurrogatePosterior};
use crate::grid::GridCase;
use crate::nlp::{self, NlpProblem, NlpSolution, NlpStatus, SolveOpts};
use crate::powerflow::{implied_injections, injection_jacobian, InjectionSet};
use crate::propagate::{em, ta1, ta2, GaussianInput};

#[derive(Debug, Error)]
pub enum CcopfError {
    #[error("violation probability {0} outside (0, 1)")]
    BadEpsilon(f64),
    #[error("uncertainty specification invalid: {0}")]
    BadSpec(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("margin exceeds feasible band for {name}: [{lo}, {hi}]")]
    EmptyBand { name: String, lo: f64, hi: f64 },
    #[error("design matrix is rank deficient (rank {rank}, need {need})")]
    RankDeficient { rank: usize, need: usize },
    #[error("least-squares fit needs more than {need} rows, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// How surrogate output moments are obtained from the Gaussian input
/// distribution when constraints are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    Ta1,
    Ta2,
    Em,
}

/// Standard normal quantile `Phi^{-1}(1 - eps)`: the one-sided margin
/// multiplier that caps the violation probability of a Gaussian constraint
/// at `eps`. Rational minimax approximation with relative error below
/// 1.2e-9 over the open unit interval.
pub fn quantile(eps: f64) -> Result<f64, CcopfError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CcopfError::BadEpsilon(eps));
    }
    let p = 1.0 - eps;
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };
    Ok(x)
}

/// Fluctuation model: independent zero-mean Gaussian deviations, one per
/// load and one per renewable unit, plus per-class acceptable violation
/// probabilities for generator, reactive, voltage, and flow limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub sigma_l: Vec<f64>,
    pub sigma_rs: Vec<f64>,
    pub eps_pg: f64,
    pub eps_q: f64,
    pub eps_v: f64,
    pub eps_s: f64,
}

impl UncertaintySpec {
    /// Deviations proportional to the forecast: 15% of each load, 30% of
    /// each renewable unit; 0.1% violation budget for generator limits,
    /// 2.5% for the others.
    pub fn default_for(case: &GridCase) -> UncertaintySpec {
        UncertaintySpec {
            sigma_l: case.loads.iter().map(|l| 0.15 * l.p_ref.abs()).collect(),
            sigma_rs: case
                .res_units
                .iter()
                .map(|r| 0.30 * r.p_ref.abs())
                .collect(),
            eps_pg: 0.001,
            eps_q: 0.025,
            eps_v: 0.025,
            eps_s: 0.025,
        }
    }

    pub fn validate(&self, case: &GridCase) -> Result<(), CcopfError> {
        if self.sigma_l.len() != case.loads.len() {
            return Err(CcopfError::BadSpec(format!(
                "{} load deviations for {} loads",
                self.sigma_l.len(),
                case.loads.len()
            )));
        }
        if self.sigma_rs.len() != case.res_units.len() {
            return Err(CcopfError::BadSpec(format!(
                "{} renewable deviations for {} units",
                self.sigma_rs.len(),
                case.res_units.len()
            )));
        }
        for (name, eps) in [
            ("eps_pg", self.eps_pg),
            ("eps_q", self.eps_q),
            ("eps_v", self.eps_v),
            ("eps_s", self.eps_s),
        ] {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(CcopfError::BadSpec(format!(
                    "{name} = {eps} outside (0, 0.5)"
                )));
            }
        }
        if let Some(s) = self
            .sigma_l
            .iter()
            .chain(&self.sigma_rs)
            .find(|s| !(**s >= 0.0))
        {
            return Err(CcopfError::BadSpec(format!("negative deviation {s}")));
        }
        Ok(())
    }

    /// Deviations in input-column order: loads first, then renewables.
    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_l
            .iter()
            .chain(&self.sigma_rs)
            .copied()
            .collect()
    }

    /// Total fluctuation variance `tr(Sigma_omega)`.
    pub fn trace_cov(&self) -> f64 {
        self.sigma().iter().map(|s| s * s).sum()
    }
}

/// Covariance of the surrogate input vector under affine recourse. The
/// uncertain inputs move by independent deviations `omega`; the generator
/// inputs move together by `alpha` times the summed deviation, so the
/// whole input is the image of `omega` under `[alpha 1'; I]` and the
/// covariance is that map applied to `diag(sigma^2)` from both sides.
pub fn input_covariance(alpha: &DVector<f64>, uspec: &UncertaintySpec) -> DMatrix<f64> {
    covariance_from(alpha.as_slice(), &uspec.sigma())
}

fn covariance_from(alpha: &[f64], sigma: &[f64]) -> DMatrix<f64> {
    let (n_g, n_u) = (alpha.len(), sigma.len());
    let n = n_g + n_u;
    let trace: f64 = sigma.iter().map(|s| s * s).sum();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n_g {
        for j in 0..n_g {
            cov[(i, j)] = alpha[i] * alpha[j] * trace;
        }
        for j in 0..n_u {
            let c = alpha[i] * sigma[j] * sigma[j];
            cov[(i, n_g + j)] = c;
            cov[(n_g + j, i)] = c;
        }
    }
    for j in 0..n_u {
        cov[(n_g + j, n_g + j)] = sigma[j] * sigma[j];
    }
    cov
}

/// Tighten each `[lo, hi]` band by `r` standard deviations on both sides.
/// A band that closes entirely is reported by constraint name instead of
/// silently inverting.
pub fn reformulate_margins(
    names: &[String],
    sigma2: &[f64],
    bounds: &[(f64, f64)],
    r: f64,
) -> Result<Vec<(f64, f64)>, CcopfError> {
    assert_eq!(names.len(), sigma2.len());
    assert_eq!(names.len(), bounds.len());
    names
        .iter()
        .zip(sigma2)
        .zip(bounds)
        .map(|((name, &s2), &(lo, hi))| {
            assert!(s2 >= 0.0, "variance must be non-negative");
            let m = r * s2.sqrt();
            let (tlo, thi) = (lo + m, hi - m);
            if tlo > thi {
                return Err(CcopfError::EmptyBand {
                    name: name.clone(),
                    lo: tlo,
                    hi: thi,
                });
            }
            Ok((tlo, thi))
        })
        .collect()
}

/// Affine map from raw surrogate inputs to raw outputs, fitted to a
/// lossless-network dataset. Voltage outputs of such datasets are the
/// constant `v_dc`, so their rows carry zero coefficients.
#[derive(Debug, Clone)]
pub struct LinearSurrogate {
    pub input_schema: Vec<String>,
    pub output_schema: Vec<String>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub v_dc: f64,
}

#[derive(Serialize, Deserialize)]
struct LinearSurrogateJson {
    input_schema: Vec<String>,
    output_schema: Vec<String>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    v_dc: f64,
}

impl LinearSurrogate {
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(LinearSurrogateJson {
            input_schema: self.input_schema.clone(),
            output_schema: self.output_schema.clone(),
            a: matrix_to_rows(&self.a),
            b: self.b.iter().copied().collect(),
            v_dc: self.v_dc,
        })
        .expect("plain data serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<LinearSurrogate, CcopfError> {
        let json: LinearSurrogateJson = serde_json::from_value(v.clone())
            .map_err(|e| CcopfError::SchemaMismatch(format!("linear surrogate: {e}")))?;
        let a = rows_to_matrix(&json.a);
        if a.nrows() != json.output_schema.len() || a.ncols() != json.input_schema.len() {
            return Err(CcopfError::SchemaMismatch(
                "coefficient matrix shape disagrees with schemas".into(),
            ));
        }
        Ok(LinearSurrogate {
            input_schema: json.input_schema,
            output_schema: json.output_schema,
            a,
            b: DVector::from_vec(json.b),
            v_dc: json.v_dc,
        })
    }
}

/// Ordinary least squares with intercept, one fit per output column, on the
/// raw (destandardized) data. Constant output columns short-circuit to a
/// zero coefficient row with the constant as intercept.
pub fn fit_linear_surrogate(dc_set: &SampleSet) -> Result<LinearSurrogate, CcopfError> {
    let raw = if dc_set.scaler.is_some() {
        destandardize(dc_set)?
    } else {
        dc_set.clone()
    };
    let (m, n) = (raw.n_rows(), raw.n_x());
    if m <= n {
        return Err(CcopfError::TooFewSamples { got: m, need: n });
    }
    let mut design = DMatrix::zeros(m, n + 1);
    design.view_mut((0, 0), (m, n)).copy_from(&raw.x);
    design.column_mut(n).fill(1.0);
    let svd = design.clone().svd(true, true);
    let sv_max = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-10 * sv_max)
        .count();
    if rank < n + 1 {
        return Err(CcopfError::RankDeficient { rank, need: n + 1 });
    }
    let coeffs = svd
        .solve(&raw.y, 1e-10 * sv_max)
        .expect("svd factors were requested");
    let mut a = DMatrix::zeros(raw.n_y(), n);
    let mut b = DVector::zeros(raw.n_y());
    for j in 0..raw.n_y() {
        let col = raw.y.column(j);
        let (lo, hi) = (col.min(), col.max());
        if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
            b[j] = col.sum() / m as f64;
        } else {
            for i in 0..n {
                a[(j, i)] = coeffs[(i, j)];
            }
            b[j] = coeffs[(n, j)];
        }
    }
    Ok(LinearSurrogate {
        input_schema: raw.input_schema.clone(),
        output_schema: raw.output_schema.clone(),
        a,
        b,
        v_dc: 1.0,
    })
}

/// Mean active powers the dispatch is planned against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub p_l: Vec<f64>,
    pub p_rs: Vec<f64>,
}

impl Forecast {
    pub fn from_case(case: &GridCase) -> Forecast {
        Forecast {
            p_l: case.loads.iter().map(|l| l.p_ref).collect(),
            p_rs: case.res_units.iter().map(|r| r.p_ref).collect(),
        }
    }

    pub fn demand(&self) -> f64 {
        self.p_l.iter().sum::<f64>() - self.p_rs.iter().sum::<f64>()
    }
}

/// Expected generation cost under affine recourse: the stochastic set-point
/// `p + alpha * Omega` turns each quadratic term into
/// `c2 (p^2 + alpha^2 tr(Sigma_omega)) + c1 p + c0`.
pub fn expected_cost(
    p_g: &[f64],
    alpha: &[f64],
    costs: &[(f64, f64, f64)],
    trace_cov: f64,
) -> f64 {
    p_g.iter()
        .zip(alpha)
        .zip(costs)
        .map(|((&p, &a), &(c2, c1, c0))| c2 * (p * p + trace_cov * a * a) + c1 * p + c0)
        .sum()
}

type MomentFn = Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

/// Ready-to-solve dispatch problem plus the metadata needed to interpret a
/// solution: margin multipliers, bounds, and an independent moment probe
/// that re-derives output moments through the propagation module.
pub struct CcOpfProblem {
    pub nlp: NlpProblem,
    pub n_gen: usize,
    pub output_names: Vec<String>,
    pub output_bounds: Vec<(f64, f64)>,
    pub r_out: Vec<f64>,
    pub r_pg: f64,
    pub trace_cov: f64,
    pub costs: Vec<(f64, f64, f64)>,
    moments: MomentFn,
}

impl CcOpfProblem {
    /// Output moments at a stacked decision `[p_g; alpha]`, computed through
    /// the propagation module rather than the constraint callbacks.
    pub fn moments_at(&self, dec: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.moments)(dec)
    }
}

/// Geometry shared by every constraint callback: which input column each
/// generator occupies, the deviation vector, bounds, and margin multipliers.
#[derive(Clone)]
struct Assembly {
    n_g: usize,
    n_gx: usize,
    n_u: usize,
    /// Input column of each generator's set-point; `None` for the slack.
    gen_col: Vec<Option<usize>>,
    sigma: Vec<f64>,
    trace: f64,
    base_pl: Vec<f64>,
    base_prs: Vec<f64>,
    out_bounds: Vec<(f64, f64)>,
    r_out: Vec<f64>,
    r_pg: f64,
    p_bounds: Vec<(f64, f64)>,
    costs: Vec<(f64, f64, f64)>,
}

/// Lower bound used for apparent-flow outputs, which are magnitudes and
/// have no physical lower limit; it sits far below any reachable value so
/// only the upper side can bind.
const FLOW_LOWER_SENTINEL: f64 = -1.0e3;

pub(crate) fn class_eps(name: &str, uspec: &UncertaintySpec) -> Result<f64, CcopfError> {
    if name.starts_with("v_") {
        Ok(uspec.eps_v)
    } else if name.starts_with("qg_") {
        Ok(uspec.eps_q)
    } else if name.starts_with("s_") {
        Ok(uspec.eps_s)
    } else {
        Err(CcopfError::SchemaMismatch(format!(
            "unrecognized output column {name}"
        )))
    }
}

pub(crate) fn bounds_for_output(case: &GridCase, name: &str) -> Result<(f64, f64), CcopfError> {
    let missing = || CcopfError::SchemaMismatch(format!("output {name} not found in the case"));
    if let Some(id) = name.strip_prefix("v_") {
        let id: i64 = id.parse().map_err(|_| missing())?;
        let bus = case
            .buses
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(missing)?;
        Ok((bus.v_min, bus.v_max))
    } else if let Some(id) = name.strip_prefix("qg_") {
        let id: i64 = id.parse().map_err(|_| missing())?;
        let (mut lo, mut hi, mut found) = (0.0, 0.0, false);
        for g in case.gens.iter().filter(|g| g.bus == id) {
            lo += g.q_min;
            hi += g.q_max;
            found = true;
        }
        if !found {
            return Err(missing());
        }
        Ok((lo, hi))
    } else if let Some(rest) = name.strip_prefix("s_") {
        let (from, to) = rest.split_once('_').ok_or_else(missing)?;
        let (from, to): (i64, i64) = (
            from.parse().map_err(|_| missing())?,
            to.parse().map_err(|_| missing())?,
        );
        let br = case
            .branches
            .iter()
            .find(|b| b.from == from && b.to == to)
            .ok_or_else(missing)?;
        Ok((FLOW_LOWER_SENTINEL, br.s_max))
    } else {
        Err(CcopfError::SchemaMismatch(format!(
            "unrecognized output column {name}"
        )))
    }
}

impl Assembly {
    fn new(
        case: &GridCase,
        forecast: &Forecast,
        uspec: &UncertaintySpec,
        output_names: &[String],
    ) -> Result<Assembly, CcopfError> {
        uspec.validate(case)?;
        if forecast.p_l.len() != case.loads.len() || forecast.p_rs.len() != case.res_units.len() {
            return Err(CcopfError::BadSpec(
                "forecast length disagrees with the case".into(),
            ));
        }
        let non_slack = case.non_slack_gens();
        let mut gen_col = vec![None; case.gens.len()];
        for (col, &gi) in non_slack.iter().enumerate() {
            gen_col[gi] = Some(col);
        }
        let mut out_bounds = Vec::with_capacity(output_names.len());
        let mut r_out = Vec::with_capacity(output_names.len());
        for name in output_names {
            out_bounds.push(bounds_for_output(case, name)?);
            r_out.push(quantile(class_eps(name, uspec)?)?);
        }
        Ok(Assembly {
            n_g: case.gens.len(),
            n_gx: non_slack.len(),
            n_u: case.loads.len() + case.res_units.len(),
            gen_col,
            sigma: uspec.sigma(),
            trace: uspec.trace_cov(),
            base_pl: forecast.p_l.clone(),
            base_prs: forecast.p_rs.clone(),
            out_bounds,
            r_out,
            r_pg: quantile(uspec.eps_pg)?,
            p_bounds: case.gens.iter().map(|g| (g.p_min, g.p_max)).collect(),
            costs: case.gens.iter().map(|g| (g.c2, g.c1, g.c0)).collect(),
        })
    }

    fn n_x(&self) -> usize {
        self.n_gx + self.n_u
    }

    fn n_dec(&self) -> usize {
        2 * self.n_g
    }

    fn m_in(&self, n_y: usize) -> usize {
        2 * n_y + 3 * self.n_g
    }

    /// Raw surrogate input at a decision: generator columns from `p_g`,
    /// uncertain columns at their forecast means.
    fn mean_input(&self, p_g: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_x());
        for (gi, col) in self.gen_col.iter().enumerate() {
            if let Some(c) = *col {
                x[c] = p_g[gi];
            }
        }
        for (j, &p) in self.base_pl.iter().chain(&self.base_prs).enumerate() {
            x[self.n_gx + j] = p;
        }
        x
    }

    /// Participation factors of the generators present in the input vector,
    /// in input-column order.
    fn alpha_cols(&self, alpha: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.n_gx];
        for (gi, col) in self.gen_col.iter().enumerate() {
            if let Some(c) = *col {
                a[c] = alpha[gi];
            }
        }
        a
    }

    /// Generator band and participation-nonnegativity rows, appended after
    /// the output rows starting at `row0`. Margins scale with each
    /// generator's own participation factor.
    fn gen_alpha_rows(
        &self,
        p_g: &[f64],
        alpha: &[f64],
        c: &mut DVector<f64>,
        jac: &mut DMatrix<f64>,
        row0: usize,
    ) {
        let root_t = self.trace.sqrt();
        for g in 0..self.n_g {
            let (lo, hi) = self.p_bounds[g];
            let m = self.r_pg * alpha[g] * root_t;
            let (rl, rh) = (row0 + 2 * g, row0 + 2 * g + 1);
            c[rl] = p_g[g] - lo - m;
            c[rh] = hi - m - p_g[g];
            jac[(rl, g)] = 1.0;
            jac[(rh, g)] = -1.0;
            jac[(rl, self.n_g + g)] = -self.r_pg * root_t;
            jac[(rh, self.n_g + g)] = -self.r_pg * root_t;
        }
        let base = row0 + 2 * self.n_g;
        for g in 0..self.n_g {
            c[base + g] = alpha[g];
            jac[(base + g, self.n_g + g)] = 1.0;
        }
    }
}

fn split_decision(dec: &DVector<f64>, n_g: usize) -> (&[f64], &[f64]) {
    dec.as_slice().split_at(n_g)
}

/// Mean, variance, and their gradients with respect to the stacked decision
/// `[p_g; alpha]`, for one output in raw units.
struct OutputMoments {
    mu: f64,
    var: f64,
    dmu: DVector<f64>,
    dvar: DVector<f64>,
}

impl OutputMoments {
    fn add(mut self, other: &OutputMoments) -> OutputMoments {
        self.mu += other.mu;
        self.var += other.var;
        self.dmu += &other.dmu;
        self.dvar += &other.dvar;
        self
    }
}

/// First-order propagation through a surrogate posterior for one output.
/// Variance combines the posterior variance at the mean input with the
/// deviation vector pushed through the mean gradient; gradients follow by
/// the chain rule through the posterior Hessian.
fn ta1_output(
    model: &dyn SurrogatePosterior,
    i: usize,
    x_std: &DVector<f64>,
    asm: &Assembly,
    alpha: &[f64],
) -> OutputMoments {
    let sc = model.scaler();
    let (ym, ys) = (sc.y_mean[i], sc.y_std[i]);
    let (m_std, v_det) = model.predict_one(i, x_std);
    let g_std = model.mean_grad(i, x_std);
    let hess = model.mean_hessian(i, x_std);
    let g_phys: Vec<f64> = g_std
        .iter()
        .zip(&sc.x_std)
        .map(|(g, xs)| g / xs)
        .collect();
    let mut u = 0.0;
    for (gi, col) in asm.gen_col.iter().enumerate() {
        if let Some(c) = *col {
            u += alpha[gi] * g_phys[c];
        }
    }
    let w: Vec<f64> = (0..asm.n_u)
        .map(|j| u + g_phys[asm.n_gx + j])
        .collect();
    let s_w: f64 = asm
        .sigma
        .iter()
        .zip(&w)
        .map(|(s, w)| s * s * w)
        .sum();
    let var_in: f64 = asm
        .sigma
        .iter()
        .zip(&w)
        .map(|(s, w)| s * s * w * w)
        .sum();
    // t = d(var_in)/d(g_std): push the deviation weights back through the map
    // from inputs to the per-deviation sensitivities w_j.
    let mut t = DVector::zeros(asm.n_x());
    for (gi, col) in asm.gen_col.iter().enumerate() {
        if let Some(c) = *col {
            t[c] = alpha[gi] / sc.x_std[c] * s_w;
        }
    }
    for j in 0..asm.n_u {
        let c = asm.n_gx + j;
        t[c] = asm.sigma[j] * asm.sigma[j] * w[j] / sc.x_std[c];
    }
    let dvar_dxstd = model.var_grad(i, x_std) + 2.0 * (&hess * &t);
    let mut dmu = DVector::zeros(asm.n_dec());
    let mut dvar = DVector::zeros(asm.n_dec());
    for (gi, col) in asm.gen_col.iter().enumerate() {
        if let Some(c) = *col {
            dmu[gi] = ys * g_phys[c];
            dvar[gi] = ys * ys * dvar_dxstd[c] / sc.x_std[c];
            dvar[asm.n_g + gi] = ys * ys * 2.0 * s_w * g_phys[c];
        }
    }
    OutputMoments {
        mu: ym + ys * m_std,
        var: ys * ys * (v_det + var_in),
        dmu,
        dvar,
    }
}

/// Exact propagation through an affine map: mean is the map at the mean
/// input, variance is the coefficient row pushed through the recourse
/// covariance. Only the participation factors move the variance.
fn linear_output(lin: &LinearSurrogate, i: usize, x_mean: &DVector<f64>, asm: &Assembly, alpha: &[f64]) -> OutputMoments {
    let row = lin.a.row(i);
    let mu = row.transpose().dot(x_mean) + lin.b[i];
    let mut u = 0.0;
    for (gi, col) in asm.gen_col.iter().enumerate() {
        if let Some(c) = *col {
            u += alpha[gi] * row[c];
        }
    }
    let mut s_w = 0.0;
    let mut var = 0.0;
    for j in 0..asm.n_u {
        let wl = u + row[asm.n_gx + j];
        let s2 = asm.sigma[j] * asm.sigma[j];
        s_w += s2 * wl;
        var += s2 * wl * wl;
    }
    let mut dmu = DVector::zeros(asm.n_dec());
    let mut dvar = DVector::zeros(asm.n_dec());
    for (gi, col) in asm.gen_col.iter().enumerate() {
        if let Some(c) = *col {
            dmu[gi] = row[c];
            dvar[asm.n_g + gi] = 2.0 * s_w * row[c];
        }
    }
    OutputMoments { mu, var, dmu, dvar }
}

/// Variance floor inside the square root of a margin; keeps the gradient
/// bounded when a variance underflows to zero.
const VAR_FLOOR: f64 = 1e-16;

fn margin_rows(
    om: &OutputMoments,
    (lo, hi): (f64, f64),
    r: f64,
    row: usize,
    c: &mut DVector<f64>,
    jac: &mut DMatrix<f64>,
) {
    let sd = om.var.max(VAR_FLOOR).sqrt();
    let dsd = &om.dvar / (2.0 * sd);
    c[row] = om.mu - lo - r * sd;
    c[row + 1] = hi - r * sd - om.mu;
    for k in 0..om.dmu.len() {
        jac[(row, k)] = om.dmu[k] - r * dsd[k];
        jac[(row + 1, k)] = -om.dmu[k] - r * dsd[k];
    }
}

fn standardized_input(sc: &Scaler, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| (x[i] - sc.x_mean[i]) / sc.x_std[i])
}

/// Standardized-space Gaussian input at a decision: mean from the forecast
/// and set-points, covariance from the recourse map scaled into the
/// surrogate's input units.
fn gaussian_input_at(sc: &Scaler, asm: &Assembly, p_g: &[f64], alpha: &[f64]) -> GaussianInput {
    let x_std = standardized_input(sc, &asm.mean_input(p_g));
    let cov_phys = covariance_from(&asm.alpha_cols(alpha), &asm.sigma);
    let n = cov_phys.nrows();
    let cov_std = DMatrix::from_fn(n, n, |i, j| cov_phys[(i, j)] / (sc.x_std[i] * sc.x_std[j]));
    GaussianInput::new(x_std, cov_std).expect("recourse covariance is symmetric PSD")
}

/// Output moments in raw units through the propagation module.
fn propagated_moments(
    model: &GpModel,
    asm: &Assembly,
    dec: &DVector<f64>,
    prop: Propagation,
) -> (DVector<f64>, DVector<f64>) {
    let (p_g, alpha) = split_decision(dec, asm.n_g);
    let gin = gaussian_input_at(&model.scaler, asm, p_g, alpha);
    let go = match prop {
        Propagation::Ta1 => ta1(model, &gin),
        Propagation::Ta2 => ta2(model, &gin),
        Propagation::Em => em(model, &gin),
    };
    let sc = &model.scaler;
    let mu = DVector::from_fn(go.mean.len(), |i, _| sc.y_mean[i] + sc.y_std[i] * go.mean[i]);
    let var = DVector::from_fn(go.var.len(), |i, _| sc.y_std[i] * sc.y_std[i] * go.var[i]);
    (mu, var)
}

/// Hybrid moments: affine part at the mean plus its recourse variance,
/// first-order propagation for the residual posterior, added per output.
fn hybrid_moments(
    lin: &LinearSurrogate,
    resid: &dyn SurrogatePosterior,
    asm: &Assembly,
    dec: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (p_g, alpha) = split_decision(dec, asm.n_g);
    let x_mean = asm.mean_input(p_g);
    let gin = gaussian_input_at(resid.scaler(), asm, p_g, alpha);
    let go = ta1(resid, &gin);
    let sc = resid.scaler();
    let n_y = lin.output_schema.len();
    let mut mu = DVector::zeros(n_y);
    let mut var = DVector::zeros(n_y);
    for i in 0..n_y {
        let lin_om = linear_output(lin, i, &x_mean, asm, alpha);
        mu[i] = lin_om.mu + sc.y_mean[i] + sc.y_std[i] * go.mean[i];
        var[i] = lin_om.var + sc.y_std[i] * sc.y_std[i] * go.var[i];
    }
    (mu, var)
}

fn objective_callbacks(asm: &Assembly) -> (impl Fn(&DVector<f64>) -> (f64, DVector<f64>) + Clone, usize) {
    let asm = asm.clone();
    let n_g = asm.n_g;
    (
        move |dec: &DVector<f64>| {
            let (p_g, alpha) = split_decision(dec, n_g);
            let f = expected_cost(p_g, alpha, &asm.costs, asm.trace);
            let mut grad = DVector::zeros(asm.n_dec());
            for g in 0..n_g {
                let (c2, c1, _) = asm.costs[g];
                grad[g] = 2.0 * c2 * p_g[g] + c1;
                grad[n_g + g] = 2.0 * c2 * asm.trace * alpha[g];
            }
            (f, grad)
        },
        2 * n_g,
    )
}

fn equality_callbacks(asm: &Assembly, demand: f64) -> impl Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Clone {
    let n_g = asm.n_g;
    move |dec: &DVector<f64>| {
        let (p_g, alpha) = split_decision(dec, n_g);
        let c = DVector::from_vec(vec![
            alpha.iter().sum::<f64>() - 1.0,
            p_g.iter().sum::<f64>() - demand,
        ]);
        let mut jac = DMatrix::zeros(2, 2 * n_g);
        for g in 0..n_g {
            jac[(0, n_g + g)] = 1.0;
            jac[(1, g)] = 1.0;
        }
        (c, jac)
    }
}

/// Chance-constrained dispatch over a full surrogate posterior: expected
/// quadratic cost, participation and active-power balance equalities, and
/// margin-tightened output, generator, and participation inequalities.
/// First-order propagation carries analytic derivatives; the second-order
/// and exact propagation variants differentiate by central differences.
pub fn build_full_problem(
    case: &GridCase,
    model: &GpModel,
    forecast: &Forecast,
    uspec: &UncertaintySpec,
    propagation: Propagation,
) -> Result<CcOpfProblem, CcopfError> {
    if model.input_schema != input_schema(case) || model.output_schema != output_schema(case) {
        return Err(CcopfError::SchemaMismatch(
            "surrogate schemas disagree with the case".into(),
        ));
    }
    let asm = Assembly::new(case, forecast, uspec, &model.output_schema)?;
    let n_y = model.output_schema.len();
    let model = Arc::new(model.clone());
    let (objective, n_dec) = objective_callbacks(&asm);
    let eq = equality_callbacks(&asm, forecast.demand());

    let ineq: Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Send + Sync> =
        match propagation {
            Propagation::Ta1 => {
                let asm_c = asm.clone();
                let model_c = model.clone();
                Box::new(move |dec: &DVector<f64>| {
                    let (p_g, alpha) = split_decision(dec, asm_c.n_g);
                    let x_std = standardized_input(&model_c.scaler, &asm_c.mean_input(p_g));
                    let m_in = asm_c.m_in(n_y);
                    let mut c = DVector::zeros(m_in);
                    let mut jac = DMatrix::zeros(m_in, asm_c.n_dec());
                    for i in 0..n_y {
                        let om = ta1_output(model_c.as_ref(), i, &x_std, &asm_c, alpha);
                        margin_rows(&om, asm_c.out_bounds[i], asm_c.r_out[i], 2 * i, &mut c, &mut jac);
                    }
                    asm_c.gen_alpha_rows(p_g, alpha, &mut c, &mut jac, 2 * n_y);
                    (c, jac)
                })
            }
            Propagation::Ta2 | Propagation::Em => {
                let asm_c = asm.clone();
                let model_c = model.clone();
                let value = move |dec: &DVector<f64>| -> DVector<f64> {
                    let (p_g, alpha) = split_decision(dec, asm_c.n_g);
                    let (mu, var) = propagated_moments(&model_c, &asm_c, dec, propagation);
                    let m_in = asm_c.m_in(n_y);
                    let mut c = DVector::zeros(m_in);
                    let mut jac = DMatrix::zeros(m_in, asm_c.n_dec());
                    for i in 0..n_y {
                        let sd = var[i].max(VAR_FLOOR).sqrt();
                        let (lo, hi) = asm_c.out_bounds[i];
                        c[2 * i] = mu[i] - lo - asm_c.r_out[i] * sd;
                        c[2 * i + 1] = hi - asm_c.r_out[i] * sd - mu[i];
                    }
                    asm_c.gen_alpha_rows(p_g, alpha, &mut c, &mut jac, 2 * n_y);
                    c
                };
                Box::new(move |dec: &DVector<f64>| {
                    let c = value(dec);
                    let mut jac = DMatrix::zeros(c.len(), dec.len());
                    for k in 0..dec.len() {
                        let h = 1e-6 * (1.0 + dec[k].abs());
                        let mut hi = dec.clone();
                        hi[k] += h;
                        let mut lo = dec.clone();
                        lo[k] -= h;
                        let col = (value(&hi) - value(&lo)) / (2.0 * h);
                        jac.column_mut(k).copy_from(&col);
                    }
                    (c, jac)
                })
            }
        };

    let moments: MomentFn = {
        let asm_c = asm.clone();
        let model_c = model.clone();
        Box::new(move |dec: &DVector<f64>| propagated_moments(&model_c, &asm_c, dec, propagation))
    };

    Ok(CcOpfProblem {
        nlp: NlpProblem {
            n: n_dec,
            m_eq: 2,
            m_in: asm.m_in(n_y),
            objective: Box::new(objective),
            eq_constraints: Box::new(eq),
            ineq_constraints: ineq,
            lagrangian_hessian: None,
        },
        n_gen: asm.n_g,
        output_names: model.output_schema.clone(),
        output_bounds: asm.out_bounds.clone(),
        r_out: asm.r_out.clone(),
        r_pg: asm.r_pg,
        trace_cov: asm.trace,
        costs: asm.costs.clone(),
        moments,
    })
}

/// Chance-constrained dispatch over an affine surrogate plus a posterior
/// trained on its residuals. Constraint moments add the two parts; the
/// residual posterior is propagated to first order.
pub fn build_hybrid_problem(
    case: &GridCase,
    lin: &LinearSurrogate,
    resid: Arc<dyn SurrogatePosterior + Send + Sync>,
    forecast: &Forecast,
    uspec: &UncertaintySpec,
) -> Result<CcOpfProblem, CcopfError> {
    let (ins, outs) = (input_schema(case), output_schema(case));
    if lin.input_schema != ins || lin.output_schema != outs {
        return Err(CcopfError::SchemaMismatch(
            "affine surrogate schemas disagree with the case".into(),
        ));
    }
    if resid.input_schema() != ins.as_slice() || resid.output_schema() != outs.as_slice() {
        return Err(CcopfError::SchemaMismatch(
            "residual surrogate schemas disagree with the case".into(),
        ));
    }
    let asm = Assembly::new(case, forecast, uspec, &outs)?;
    let n_y = outs.len();
    let lin = Arc::new(lin.clone());
    let (objective, n_dec) = objective_callbacks(&asm);
    let eq = equality_callbacks(&asm, forecast.demand());

    let ineq: Box<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Send + Sync> = {
        let asm_c = asm.clone();
        let lin_c = lin.clone();
        let resid_c = resid.clone();
        Box::new(move |dec: &DVector<f64>| {
            let (p_g, alpha) = split_decision(dec, asm_c.n_g);
            let x_mean = asm_c.mean_input(p_g);
            let x_std = standardized_input(resid_c.scaler(), &x_mean);
            let m_in = asm_c.m_in(n_y);
            let mut c = DVector::zeros(m_in);
            let mut jac = DMatrix::zeros(m_in, asm_c.n_dec());
            for i in 0..n_y {
                let om = linear_output(&lin_c, i, &x_mean, &asm_c, alpha)
                    .add(&ta1_output(resid_c.as_ref(), i, &x_std, &asm_c, alpha));
                margin_rows(&om, asm_c.out_bounds[i], asm_c.r_out[i], 2 * i, &mut c, &mut jac);
            }
            asm_c.gen_alpha_rows(p_g, alpha, &mut c, &mut jac, 2 * n_y);
            (c, jac)
        })
    };

    let moments: MomentFn = {
        let asm_c = asm.clone();
        let lin_c = lin.clone();
        let resid_c = resid.clone();
        Box::new(move |dec: &DVector<f64>| hybrid_moments(&lin_c, resid_c.as_ref(), &asm_c, dec))
    };

    Ok(CcOpfProblem {
        nlp: NlpProblem {
            n: n_dec,
            m_eq: 2,
            m_in: asm.m_in(n_y),
            objective: Box::new(objective),
            eq_constraints: Box::new(eq),
            ineq_constraints: ineq,
            lagrangian_hessian: None,
        },
        n_gen: asm.n_g,
        output_names: outs,
        output_bounds: asm.out_bounds.clone(),
        r_out: asm.r_out.clone(),
        r_pg: asm.r_pg,
        trace_cov: asm.trace,
        costs: asm.costs.clone(),
        moments,
    })
}

/// Starting point `[p_g; alpha]`: an equal-marginal-cost dispatch of the
/// forecast demand, nudged strictly inside the generator boxes, with
/// uniform participation.
pub fn warm_start(case: &GridCase, forecast: &Forecast) -> DVector<f64> {
    let n_g = case.gens.len();
    let demand = forecast.demand();
    let mut p = vec![0.0; n_g];
    let mut fixed = vec![false; n_g];
    // Waterfilling on the marginal-cost level: clamp box violators, re-solve
    // for the rest. Terminates after at most n_g rounds.
    for _ in 0..=n_g {
        let residual: f64 = demand
            - p.iter()
                .zip(&fixed)
                .filter(|(_, f)| **f)
                .map(|(p, _)| p)
                .sum::<f64>();
        let free: Vec<usize> = (0..n_g).filter(|&g| !fixed[g]).collect();
        if free.is_empty() {
            break;
        }
        let degenerate = free.iter().any(|&g| case.gens[g].c2 < 1e-12);
        if degenerate {
            let share = residual / free.len() as f64;
            for &g in &free {
                p[g] = share;
            }
        } else {
            let inv_sum: f64 = free.iter().map(|&g| 0.5 / case.gens[g].c2).sum();
            let c1_term: f64 = free
                .iter()
                .map(|&g| 0.5 * case.gens[g].c1 / case.gens[g].c2)
                .sum();
            let lambda = (residual + c1_term) / inv_sum;
            for &g in &free {
                p[g] = 0.5 * (lambda - case.gens[g].c1) / case.gens[g].c2;
            }
        }
        let mut clamped = false;
        for &g in &free {
            let (lo, hi) = (case.gens[g].p_min, case.gens[g].p_max);
            if p[g] < lo {
                p[g] = lo;
                fixed[g] = true;
                clamped = true;
            } else if p[g] > hi {
                p[g] = hi;
                fixed[g] = true;
                clamped = true;
            }
        }
        if !clamped {
            break;
        }
    }
    let mut dec = DVector::zeros(2 * n_g);
    for g in 0..n_g {
        let (lo, hi) = (case.gens[g].p_min, case.gens[g].p_max);
        let pad = 1e-3 * (hi - lo);
        dec[g] = p[g].clamp(lo + pad, hi - pad);
        dec[n_g + g] = 1.0 / n_g as f64;
    }
    dec
}

/// Optimized dispatch with its uncertainty bookkeeping: output moments
/// re-derived through the propagation module, margin sizes per output and
/// per generator, and the expected cost.
#[derive(Debug, Clone)]
pub struct CcOpfSolution {
    pub p_g: Vec<f64>,
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub lambda_out: Vec<f64>,
    pub lambda_pg: Vec<f64>,
    pub cost: f64,
    pub status: NlpStatus,
    pub solve_time: f64,
    pub iterations: usize,
}

pub fn status_str(status: NlpStatus) -> &'static str {
    match status {
        NlpStatus::Optimal => "optimal",
        NlpStatus::MaxIter => "max_iter",
        NlpStatus::Infeasible => "infeasible",
        NlpStatus::NumericFailure => "numeric_failure",
    }
}

impl CcOpfSolution {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "p_g": self.p_g,
            "alpha": self.alpha,
            "cost": self.cost,
            "status": status_str(self.status),
            "margins": {"output": self.lambda_out, "generator": self.lambda_pg},
            "moments": {"mu": self.mu, "sigma2": self.sigma2},
            "timing_s": self.solve_time,
        })
    }
}

/// Solve an assembled dispatch problem from a starting point inside the
/// generator boxes and map the result into dispatch terms.
pub fn solve_cc_opf(
    problem: &CcOpfProblem,
    x0: &DVector<f64>,
    opts: &SolveOpts,
) -> CcOpfSolution {
    let n_g = problem.n_gen;
    assert_eq!(x0.len(), 2 * n_g, "decision is set-points plus factors");
    let start = Instant::now();
    let sol: NlpSolution = nlp::solve(&problem.nlp, x0, opts);
    let solve_time = start.elapsed().as_secs_f64();
    let (p_g, alpha) = split_decision(&sol.x_star, n_g);
    let (mu, var) = problem.moments_at(&sol.x_star);
    let lambda_out: Vec<f64> = problem
        .r_out
        .iter()
        .zip(var.iter())
        .map(|(r, v)| r * v.max(0.0).sqrt())
        .collect();
    let root_t = problem.trace_cov.sqrt();
    let lambda_pg: Vec<f64> = alpha
        .iter()
        .map(|a| problem.r_pg * a.max(0.0) * root_t)
        .collect();
    CcOpfSolution {
        p_g: p_g.to_vec(),
        alpha: alpha.to_vec(),
        mu: mu.iter().copied().collect(),
        sigma2: var.iter().copied().collect(),
        lambda_out,
        lambda_pg,
        cost: expected_cost(p_g, alpha, &problem.costs, problem.trace_cov),
        status: sol.status,
        solve_time,
        iterations: sol.iterations,
    }
}

/// Uncertainty-free dispatch: voltages, angles, and generator injections
/// chosen to minimize quadratic cost subject to the full nonlinear
/// power-balance equalities and box and flow limits.
#[derive(Debug, Clone)]
pub struct AcOpfDispatch {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub status: NlpStatus,
    pub kkt_residual: f64,
}

/// Deterministic AC dispatch at fixed injections. Generator-hosting buses
/// keep their scheduled voltage setpoints, matching the convention the
/// surrogate's labeled data was produced under; the unknowns are the
/// remaining bus voltages, non-slack angles, and generator active and
/// reactive outputs, with both power-balance residuals enforced per bus.
pub fn solve_deterministic_acopf(
    case: &GridCase,
    inj_mean: &InjectionSet,
    opts: &SolveOpts,
) -> Result<(AcOpfDispatch, f64), CcopfError> {
    let n = case.n_buses();
    let n_g = case.gens.len();
    let slack = case.slack_index();
    let ybus = crate::grid::admittance_matrix(case)
        .map_err(|e| CcopfError::BadSpec(format!("case admittance: {e}")))?;

    // Fixed (non-generator) net injections per bus: renewables minus loads.
    let mut p_fix = DVector::<f64>::zeros(n);
    let mut q_fix = DVector::<f64>::zeros(n);
    for (l, (&pl, &ql)) in case
        .loads
        .iter()
        .zip(inj_mean.p_l.iter().zip(&inj_mean.q_l))
    {
        let k = case.bus_index(l.bus);
        p_fix[k] -= pl;
        q_fix[k] -= ql;
    }
    for (r, (&pr, &qr)) in case
        .res_units
        .iter()
        .zip(inj_mean.p_rs.iter().zip(&inj_mean.q_rs))
    {
        let k = case.bus_index(r.bus);
        p_fix[k] += pr;
        q_fix[k] += qr;
    }
    let gen_bus: Vec<usize> = case.gens.iter().map(|g| case.bus_index(g.bus)).collect();

    // Scheduled voltage per bus; `None` leaves the magnitude free.
    let v_fixed: Vec<Option<f64>> = case.buses.iter().map(|b| case.v_set_at(b.id)).collect();
    let mut v_pos = vec![None; n];
    let mut n_vf = 0;
    for k in 0..n {
        if v_fixed[k].is_none() {
            v_pos[k] = Some(n_vf);
            n_vf += 1;
        }
    }

    // Decision layout: free v (n_vf) | theta at non-slack buses | p_g | q_g.
    let theta_pos: Vec<Option<usize>> = (0..n)
        .map(|k| {
            if k == slack {
                None
            } else if k < slack {
                Some(n_vf + k)
            } else {
                Some(n_vf + k - 1)
            }
        })
        .collect();
    let n_dec = n_vf + (n - 1) + 2 * n_g;
    let p_off = n_vf + n - 1;
    let q_off = p_off + n_g;

    let unpack = {
        let theta_pos = theta_pos.clone();
        let v_pos = v_pos.clone();
        let v_fixed = v_fixed.clone();
        move |x: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            let v = DVector::from_fn(n, |k, _| {
                v_fixed[k].unwrap_or_else(|| x[v_pos[k].expect("free bus has a slot")])
            });
            let theta = DVector::from_fn(n, |k, _| theta_pos[k].map_or(0.0, |p| x[p]));
            (v, theta)
        }
    };

    let costs: Vec<(f64, f64, f64)> = case.gens.iter().map(|g| (g.c2, g.c1, g.c0)).collect();
    let objective = {
        let costs = costs.clone();
        move |x: &DVector<f64>| {
            let mut f = 0.0;
            let mut grad = DVector::zeros(n_dec);
            for g in 0..n_g {
                let (c2, c1, c0) = costs[g];
                let p = x[p_off + g];
                f += c2 * p * p + c1 * p + c0;
                grad[p_off + g] = 2.0 * c2 * p + c1;
            }
            (f, grad)
        }
    };

    let eq = {
        let ybus = ybus.clone();
        let gen_bus = gen_bus.clone();
        let p_fix = p_fix.clone();
        let q_fix = q_fix.clone();
        let theta_pos = theta_pos.clone();
        let v_pos = v_pos.clone();
        let unpack = unpack.clone();
        move |x: &DVector<f64>| {
            let (v, theta) = unpack(x);
            let (p_imp, q_imp) = implied_injections(&ybus, &v, &theta);
            let mut c = DVector::zeros(2 * n);
            for k in 0..n {
                c[k] = p_imp[k] - p_fix[k];
                c[n + k] = q_imp[k] - q_fix[k];
            }
            for (g, &k) in gen_bus.iter().enumerate() {
                c[k] -= x[p_off + g];
                c[n + k] -= x[q_off + g];
            }
            let (dp_dt, dp_dv, dq_dt, dq_dv) = injection_jacobian(&ybus, &v, &theta, &p_imp, &q_imp);
            let mut jac = DMatrix::zeros(2 * n, n_dec);
            for k in 0..n {
                for j in 0..n {
                    if let Some(pos) = v_pos[j] {
                        jac[(k, pos)] = dp_dv[(k, j)];
                        jac[(n + k, pos)] = dq_dv[(k, j)];
                    }
                    if let Some(pos) = theta_pos[j] {
                        jac[(k, pos)] = dp_dt[(k, j)];
                        jac[(n + k, pos)] = dq_dt[(k, j)];
                    }
                }
            }
            for (g, &k) in gen_bus.iter().enumerate() {
                jac[(k, p_off + g)] = -1.0;
                jac[(n + k, q_off + g)] = -1.0;
            }
            (c, jac)
        }
    };

    // Flow limits in squared form s_max^2 - p^2 - q^2 >= 0: smooth at zero
    // flow, same feasible set as the magnitude bound.
    let branches: Vec<(usize, usize, f64, f64, f64)> = case
        .branches
        .iter()
        .map(|br| {
            let y = br.admittance();
            (
                case.bus_index(br.from),
                case.bus_index(br.to),
                y.re,
                y.im,
                br.s_max,
            )
        })
        .collect();
    let n_br = branches.len();
    let m_in = 2 * n_vf + 4 * n_g + n_br;
    let bus_bounds: Vec<(f64, f64)> = case.buses.iter().map(|b| (b.v_min, b.v_max)).collect();
    let gen_p: Vec<(f64, f64)> = case.gens.iter().map(|g| (g.p_min, g.p_max)).collect();
    let gen_q: Vec<(f64, f64)> = case.gens.iter().map(|g| (g.q_min, g.q_max)).collect();

    let ineq = {
        let theta_pos = theta_pos.clone();
        let v_pos = v_pos.clone();
        let unpack = unpack.clone();
        let gen_q = gen_q.clone();
        move |x: &DVector<f64>| {
            let (v, theta) = unpack(x);
            let mut c = DVector::zeros(m_in);
            let mut jac = DMatrix::zeros(m_in, n_dec);
            let mut row = 0;
            for k in 0..n {
                let Some(pos) = v_pos[k] else { continue };
                let (lo, hi) = bus_bounds[k];
                c[row] = x[pos] - lo;
                c[row + 1] = hi - x[pos];
                jac[(row, pos)] = 1.0;
                jac[(row + 1, pos)] = -1.0;
                row += 2;
            }
            for g in 0..n_g {
                let (lo, hi) = gen_p[g];
                c[row] = x[p_off + g] - lo;
                c[row + 1] = hi - x[p_off + g];
                jac[(row, p_off + g)] = 1.0;
                jac[(row + 1, p_off + g)] = -1.0;
                row += 2;
            }
            for g in 0..n_g {
                let (lo, hi) = gen_q[g];
                c[row] = x[q_off + g] - lo;
                c[row + 1] = hi - x[q_off + g];
                jac[(row, q_off + g)] = 1.0;
                jac[(row + 1, q_off + g)] = -1.0;
                row += 2;
            }
            for &(k, j, gse, bse, s_max) in &branches {
                let dt = theta[k] - theta[j];
                let (sin, cos) = dt.sin_cos();
                let gc_bs = gse * cos + bse * sin;
                let gs_bc = gse * sin - bse * cos;
                let p = gse * v[k] * v[k] - v[k] * v[j] * gc_bs;
                let q = -bse * v[k] * v[k] - v[k] * v[j] * gs_bc;
                c[row] = s_max * s_max - p * p - q * q;
                let dp = [
                    2.0 * gse * v[k] - v[j] * gc_bs,
                    -v[k] * gc_bs,
                    v[k] * v[j] * gs_bc,
                ];
                let dq = [
                    -2.0 * bse * v[k] - v[j] * gs_bc,
                    -v[k] * gs_bc,
                    -v[k] * v[j] * gc_bs,
                ];
                // Columns: v_k, v_j, and the shared angle difference; the
                // theta_j column is the negated theta_k column.
                let coeff = |dpx: f64, dqx: f64| -2.0 * p * dpx - 2.0 * q * dqx;
                if let Some(pos) = v_pos[k] {
                    jac[(row, pos)] += coeff(dp[0], dq[0]);
                }
                if let Some(pos) = v_pos[j] {
                    jac[(row, pos)] += coeff(dp[1], dq[1]);
                }
                if let Some(pos) = theta_pos[k] {
                    jac[(row, pos)] += coeff(dp[2], dq[2]);
                }
                if let Some(pos) = theta_pos[j] {
                    jac[(row, pos)] -= coeff(dp[2], dq[2]);
                }
                row += 1;
            }
            (c, jac)
        }
    };

    let problem = NlpProblem {
        n: n_dec,
        m_eq: 2 * n,
        m_in,
        objective: Box::new(objective),
        eq_constraints: Box::new(eq),
        ineq_constraints: Box::new(ineq),
        lagrangian_hessian: None,
    };

    let mut x0 = DVector::zeros(n_dec);
    for k in 0..n {
        if let Some(pos) = v_pos[k] {
            x0[pos] = 1.0;
        }
    }
    let forecast = Forecast {
        p_l: inj_mean.p_l.clone(),
        p_rs: inj_mean.p_rs.clone(),
    };
    let warm = warm_start(case, &forecast);
    for g in 0..n_g {
        x0[p_off + g] = warm[g];
        let (lo, hi) = gen_q[g];
        x0[q_off + g] = 0.0f64.clamp(lo, hi);
    }

    let sol = nlp::solve(&problem, &x0, opts);
    let (v, theta) = unpack(&sol.x_star);
    let p_g: Vec<f64> = (0..n_g).map(|g| sol.x_star[p_off + g]).collect();
    let q_g: Vec<f64> = (0..n_g).map(|g| sol.x_star[q_off + g]).collect();
    let cost: f64 = p_g
        .iter()
        .zip(&costs)
        .map(|(&p, &(c2, c1, c0))| c2 * p * p + c1 * p + c0)
        .sum();
    Ok((
        AcOpfDispatch {
            v: v.iter().copied().collect(),
            theta: theta.iter().copied().collect(),
            p_g,
            q_g,
            status: sol.status,
            kkt_residual: sol.kkt_residual,
        },
        cost,
    ))
}
