//! Synthetic dataset generation: injection sampling, per-sample power-flow
//! labeling, standardization and CSV persistence.

use crate::grid::{BusKind, GridCase};
use crate::powerflow::{
    dc_branch_flows, solve_ac_pf, solve_dc_pf, InjectionSet, PfError,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("infeasible sample {sample}: renewable output exceeds scaled load")]
    InfeasibleSample { sample: usize },
    #[error("dataset generation unstable: {divergent} of {total} samples diverged")]
    Unstable { divergent: usize, total: usize },
    #[error("constant column {0}")]
    ConstantColumn(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dataset has no scaler attached")]
    MissingScaler,
    #[error("malformed dataset CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pf(#[from] PfError),
}

/// Log-normal fluctuation parameters for loads (eta) and renewables (nu),
/// uniform generation-split bounds (psi), the loss factor rho relating total
/// generation to total load, and the RNG seed. The (mu, sigma) pairs
/// parameterize the underlying normal in log space; each multiplier is the
/// product of a correlated factor shared within its device class and an
/// independent per-device factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub mu_eta_corr: f64,
    pub sigma_eta_corr: f64,
    pub mu_eta_unc: f64,
    pub sigma_eta_unc: f64,
    pub mu_nu_corr: f64,
    pub sigma_nu_corr: f64,
    pub mu_nu_unc: f64,
    pub sigma_nu_unc: f64,
    pub psi_lo: f64,
    pub psi_hi: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            mu_eta_corr: -1.0,
            sigma_eta_corr: 0.1,
            mu_eta_unc: 1.0,
            sigma_eta_unc: 0.05,
            mu_nu_corr: 0.2,
            sigma_nu_corr: 0.4,
            mu_nu_unc: 1.0,
            sigma_nu_unc: 0.3,
            psi_lo: 0.8,
            psi_hi: 1.2,
            rho: 1.0139,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::InvalidParams(msg));
        for (name, s) in [
            ("sigma_eta_corr", self.sigma_eta_corr),
            ("sigma_eta_unc", self.sigma_eta_unc),
            ("sigma_nu_corr", self.sigma_nu_corr),
            ("sigma_nu_unc", self.sigma_nu_unc),
        ] {
            if !(s >= 0.0) {
                return bad(format!("{name} = {s} must be non-negative"));
            }
        }
        if !(self.psi_lo > 0.0 && self.psi_lo <= self.psi_hi) {
            return bad(format!(
                "psi bounds [{}, {}] must satisfy 0 < lo <= hi",
                self.psi_lo, self.psi_hi
            ));
        }
        if !(self.rho >= 1.0) {
            return bad(format!("rho = {} must be at least 1", self.rho));
        }
        Ok(())
    }
}

/// One row stream per sample: the generator is re-seeded with the shared seed
/// and the sample index selects the stream, so any sample can be reproduced
/// in isolation and parallel generation cannot reorder draws.
pub(crate) fn sample_rng(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

fn draw_normal(rng: &mut ChaCha8Rng, mu: f64, sigma: f64) -> f64 {
    // Normal::new only rejects negative sigma; sigma = 0 is the degenerate
    // point mass at mu and must still consume one standard-normal draw so
    // that skip-based replay stays aligned.
    Normal::new(mu, sigma).expect("validated sigma").sample(rng)
}

fn draw_psi(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Generation split for one sample, after the load/RES draws have been
/// consumed from `rng`: provisional output psi_k * p_max_k per generator,
/// then a single scaling that enforces
/// `sum(p_g) + sum(p_rs) = rho * sum(p_l)` exactly.
fn generation_for_sample(
    case: &GridCase,
    params: &SamplingParams,
    p_l: &[f64],
    p_rs: &[f64],
    rng: &mut ChaCha8Rng,
    sample: usize,
) -> Result<Vec<f64>, DatasetError> {
    let provisional: Vec<f64> = case
        .gens
        .iter()
        .map(|g| draw_psi(rng, params.psi_lo, params.psi_hi) * g.p_max)
        .collect();
    let target = params.rho * p_l.iter().sum::<f64>() - p_rs.iter().sum::<f64>();
    if target <= 0.0 {
        return Err(DatasetError::InfeasibleSample { sample });
    }
    let total: f64 = provisional.iter().sum();
    let scale = target / total;
    Ok(provisional.iter().map(|p| p * scale).collect())
}

fn loads_res_for_sample(
    case: &GridCase,
    params: &SamplingParams,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let eta_corr = draw_normal(rng, params.mu_eta_corr, params.sigma_eta_corr).exp();
    let p_l: Vec<f64> = case
        .loads
        .iter()
        .map(|l| {
            let eta_unc = draw_normal(rng, params.mu_eta_unc, params.sigma_eta_unc).exp();
            eta_corr * eta_unc * l.p_ref
        })
        .collect();
    let nu_corr = draw_normal(rng, params.mu_nu_corr, params.sigma_nu_corr).exp();
    let p_rs: Vec<f64> = case
        .res_units
        .iter()
        .map(|r| {
            let nu_unc = draw_normal(rng, params.mu_nu_unc, params.sigma_nu_unc).exp();
            nu_corr * nu_unc * r.p_ref
        })
        .collect();
    (p_l, p_rs)
}

/// Draw `m_s` complete injection samples. Per sample: one correlated and one
/// per-device log-normal factor for loads and for RES, reactive powers tied
/// by each device's gamma, then the generation split (see
/// [`sample_generation`]) on the same per-sample stream.
pub fn sample_injections(
    case: &GridCase,
    params: &SamplingParams,
    m_s: usize,
) -> Result<Vec<InjectionSet>, DatasetError> {
    params.validate()?;
    assert!(m_s >= 1, "at least one sample");
    (0..m_s)
        .map(|i| {
            let mut rng = sample_rng(params.seed, i);
            let (p_l, p_rs) = loads_res_for_sample(case, params, &mut rng);
            let p_g = generation_for_sample(case, params, &p_l, &p_rs, &mut rng, i)?;
            let q_l = case
                .loads
                .iter()
                .zip(&p_l)
                .map(|(l, &p)| l.gamma * p)
                .collect();
            let q_rs = case
                .res_units
                .iter()
                .zip(&p_rs)
                .map(|(r, &p)| r.gamma * p)
                .collect();
            Ok(InjectionSet {
                p_g,
                p_l,
                q_l,
                p_rs,
                q_rs,
            })
        })
        .collect()
}

/// Generation split for externally supplied load/RES rows. Reproduces the
/// exact psi draws of [`sample_injections`] for the same seed and sample
/// index by first discarding the load/RES draws from each stream.
pub fn sample_generation(
    case: &GridCase,
    params: &SamplingParams,
    p_l: &[Vec<f64>],
    p_rs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, DatasetError> {
    params.validate()?;
    assert_eq!(p_l.len(), p_rs.len(), "sample counts must agree");
    p_l.iter()
        .zip(p_rs)
        .enumerate()
        .map(|(i, (pl, prs))| {
            let mut rng = sample_rng(params.seed, i);
            for _ in 0..(2 + case.loads.len() + case.res_units.len()) {
                let _: f64 = StandardNormal.sample(&mut rng);
            }
            generation_for_sample(case, params, pl, prs, &mut rng, i)
        })
        .collect()
}

/// Per-column affine transform: `standardized = (raw − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Input/output table with named columns. `x` rows are injection features,
/// `y` rows the corresponding power-flow quantities; `scaler` is present
/// exactly when the table holds standardized values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub input_schema: Vec<String>,
    pub output_schema: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub scaler: Option<Scaler>,
}

impl SampleSet {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_index(&self, name: &str) -> Option<usize> {
        self.input_schema.iter().position(|c| c == name)
    }

    pub fn y_index(&self, name: &str) -> Option<usize> {
        self.output_schema.iter().position(|c| c == name)
    }
}

/// Input column names: active power of non-slack generators, loads, RES.
pub fn input_schema(case: &GridCase) -> Vec<String> {
    let mut names = Vec::new();
    for gi in case.non_slack_gens() {
        names.push(format!("pg_{}", case.gens[gi].bus));
    }
    for l in &case.loads {
        names.push(format!("pl_{}", l.bus));
    }
    for r in &case.res_units {
        names.push(format!("prs_{}", r.bus));
    }
    names
}

/// Output column names: voltage magnitude at non-generator buses, reactive
/// output at generator buses, apparent from-end flow per branch.
pub fn output_schema(case: &GridCase) -> Vec<String> {
    let mut names = Vec::new();
    for b in &case.buses {
        if b.kind == BusKind::Pq {
            names.push(format!("v_{}", b.id));
        }
    }
    for b in &case.buses {
        if matches!(b.kind, BusKind::Slack | BusKind::Pv) {
            names.push(format!("qg_{}", b.id));
        }
    }
    for br in &case.branches {
        names.push(format!("s_{}_{}", br.from, br.to));
    }
    names
}

pub(crate) fn x_row(case: &GridCase, inj: &InjectionSet) -> Vec<f64> {
    let mut row = Vec::new();
    for gi in case.non_slack_gens() {
        row.push(inj.p_g[gi]);
    }
    row.extend_from_slice(&inj.p_l);
    row.extend_from_slice(&inj.p_rs);
    row
}

/// Output row for a converged operating point in [`output_schema`] order:
/// voltages at non-generator buses, generator reactive outputs, apparent
/// from-end flow per branch.
pub(crate) fn output_row(
    case: &GridCase,
    inj: &InjectionSet,
    sol: &crate::powerflow::PfSolution,
) -> Vec<f64> {
    let mut y = Vec::new();
    for (k, b) in case.buses.iter().enumerate() {
        if b.kind == BusKind::Pq {
            y.push(sol.v[k]);
        }
    }
    for b in &case.buses {
        if matches!(b.kind, BusKind::Slack | BusKind::Pv) {
            y.push(qg_at_bus(case, inj, &sol.q, b.id));
        }
    }
    for fl in &sol.flows {
        y.push(fl.s);
    }
    y
}

/// Generator reactive output at a gen bus: the power-flow net reactive
/// injection plus co-located load minus co-located RES.
fn qg_at_bus(case: &GridCase, inj: &InjectionSet, q_net: &[f64], bus_id: i64) -> f64 {
    let k = case.bus_index(bus_id);
    let mut qg = q_net[k];
    for (l, &ql) in case.loads.iter().zip(&inj.q_l) {
        if l.bus == bus_id {
            qg += ql;
        }
    }
    for (r, &qr) in case.res_units.iter().zip(&inj.q_rs) {
        if r.bus == bus_id {
            qg -= qr;
        }
    }
    qg
}

/// Label every sample with an AC power-flow solve. Samples whose solve
/// diverges are dropped; the second return value counts them. More than 10%
/// divergence aborts with an error instead of returning a biased table.
pub fn build_dataset(
    case: &GridCase,
    samples: &[InjectionSet],
    tol: f64,
) -> Result<(SampleSet, usize), DatasetError> {
    let rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = samples
        .par_iter()
        .map(|inj| match solve_ac_pf(case, inj, tol, 30) {
            Ok(sol) => Some((x_row(case, inj), output_row(case, inj, &sol))),
            Err(
                PfError::NotConverged { .. }
                | PfError::Diverged { .. }
                | PfError::SingularJacobian { .. },
            ) => None,
            Err(e) => panic!("power flow setup failed: {e}"),
        })
        .collect();

    let divergent = rows.iter().filter(|r| r.is_none()).count();
    if divergent * 10 > samples.len() {
        return Err(DatasetError::Unstable {
            divergent,
            total: samples.len(),
        });
    }
    let kept: Vec<(Vec<f64>, Vec<f64>)> = rows.into_iter().flatten().collect();
    let set = assemble(case, &kept)?;
    Ok((set, divergent))
}

/// Label every sample with a DC solve instead: flat voltage columns, zero
/// reactive columns, absolute DC branch flow for the apparent-power columns.
/// The slack generator absorbs the sampled loss allowance so the lossless
/// model balances.
pub fn build_dc_dataset(
    case: &GridCase,
    samples: &[InjectionSet],
) -> Result<SampleSet, DatasetError> {
    let n_pq = case.buses.iter().filter(|b| b.kind == BusKind::Pq).count();
    let n_gb = case.n_buses() - n_pq;
    let slack_bus = case.buses[case.slack_index()].id;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = samples
        .iter()
        .map(|inj| {
            let mut balanced = inj.clone();
            let surplus: f64 = inj.p_g.iter().sum::<f64>() + inj.p_rs.iter().sum::<f64>()
                - inj.p_l.iter().sum::<f64>();
            for (g, slot) in case.gens.iter().zip(balanced.p_g.iter_mut()) {
                if g.bus == slack_bus {
                    *slot -= surplus;
                }
            }
            let (p, _) = balanced
                .net_per_bus(case)
                .expect("sampled injections match the case");
            let theta = solve_dc_pf(case, p.as_slice())?;
            let mut y = vec![1.0; n_pq];
            y.extend(std::iter::repeat(0.0).take(n_gb));
            y.extend(dc_branch_flows(case, &theta).iter().map(|f| f.abs()));
            Ok((x_row(case, inj), y))
        })
        .collect::<Result<_, DatasetError>>()?;
    assemble(case, &rows)
}

fn assemble(case: &GridCase, rows: &[(Vec<f64>, Vec<f64>)]) -> Result<SampleSet, DatasetError> {
    let input_schema = input_schema(case);
    let output_schema = output_schema(case);
    let x = DMatrix::from_fn(rows.len(), input_schema.len(), |r, c| rows[r].0[c]);
    let y = DMatrix::from_fn(rows.len(), output_schema.len(), |r, c| rows[r].1[c]);
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(DatasetError::SchemaMismatch(
            "non-finite value in assembled dataset".into(),
        ));
    }
    Ok(SampleSet {
        input_schema,
        output_schema,
        x,
        y,
        scaler: None,
    })
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    let mut stds = Vec::with_capacity(m.ncols());
    for c in 0..m.ncols() {
        let col = m.column(c);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Column-wise standardization to zero mean and unit (population) standard
/// deviation; the fitted scaler rides along on the returned set.
pub fn standardize(set: &SampleSet) -> Result<SampleSet, DatasetError> {
    let (x_mean, x_std) = column_stats(&set.x);
    let (y_mean, y_std) = column_stats(&set.y);
    for (names, stds) in [
        (&set.input_schema, &x_std),
        (&set.output_schema, &y_std),
    ] {
        for (name, &s) in names.iter().zip(stds.iter()) {
            if s <= 1e-12 {
                return Err(DatasetError::ConstantColumn(name.clone()));
            }
        }
    }
    let mut x = set.x.clone();
    for c in 0..x.ncols() {
        for r in 0..x.nrows() {
            x[(r, c)] = (x[(r, c)] - x_mean[c]) / x_std[c];
        }
    }
    let mut y = set.y.clone();
    for c in 0..y.ncols() {
        for r in 0..y.nrows() {
            y[(r, c)] = (y[(r, c)] - y_mean[c]) / y_std[c];
        }
    }
    Ok(SampleSet {
        input_schema: set.input_schema.clone(),
        output_schema: set.output_schema.clone(),
        x,
        y,
        scaler: Some(Scaler {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }),
    })
}

/// Inverse of [`standardize`]; the scaler is consumed from the set itself.
pub fn destandardize(set: &SampleSet) -> Result<SampleSet, DatasetError> {
    let scaler = set.scaler.as_ref().ok_or(DatasetError::MissingScaler)?;
    let mut x = set.x.clone();
    for c in 0..x.ncols() {
        for r in 0..x.nrows() {
            x[(r, c)] = x[(r, c)] * scaler.x_std[c] + scaler.x_mean[c];
        }
    }
    let mut y = set.y.clone();
    for c in 0..y.ncols() {
        for r in 0..y.nrows() {
            y[(r, c)] = y[(r, c)] * scaler.y_std[c] + scaler.y_mean[c];
        }
    }
    Ok(SampleSet {
        input_schema: set.input_schema.clone(),
        output_schema: set.output_schema.clone(),
        x,
        y,
        scaler: None,
    })
}

/// Replace each output with what the affine surrogate fails to explain:
/// `y - (A x + b)`, row by row, in raw units. A posterior trained on the
/// result corrects the affine model instead of relearning the whole map.
pub fn residual_dataset(
    ac_set: &SampleSet,
    lin: &crate::ccopf::LinearSurrogate,
) -> Result<SampleSet, DatasetError> {
    let raw = if ac_set.scaler.is_some() {
        destandardize(ac_set)?
    } else {
        ac_set.clone()
    };
    if raw.input_schema != lin.input_schema || raw.output_schema != lin.output_schema {
        return Err(DatasetError::SchemaMismatch(
            "affine surrogate schemas disagree with the dataset".into(),
        ));
    }
    let mut y = raw.y.clone();
    for r in 0..raw.n_rows() {
        let x = DVector::from_fn(raw.n_x(), |c, _| raw.x[(r, c)]);
        let pred = lin.predict(&x);
        for c in 0..raw.n_y() {
            y[(r, c)] -= pred[c];
        }
    }
    Ok(SampleSet {
        input_schema: raw.input_schema,
        output_schema: raw.output_schema,
        x: raw.x,
        y,
        scaler: None,
    })
}

/// One CSV with input columns followed by output columns; 17 significant
/// digits so every f64 round-trips bit-exactly.
pub fn write_csv<W: Write>(set: &SampleSet, w: &mut W) -> std::io::Result<()> {
    let header: Vec<&str> = set
        .input_schema
        .iter()
        .chain(&set.output_schema)
        .map(|s| s.as_str())
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..set.n_rows() {
        let mut fields = Vec::with_capacity(set.n_x() + set.n_y());
        for c in 0..set.n_x() {
            fields.push(format!("{:.16e}", set.x[(r, c)]));
        }
        for c in 0..set.n_y() {
            fields.push(format!("{:.16e}", set.y[(r, c)]));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Read a dataset CSV; columns are classified as inputs or outputs by their
/// schema prefix (`pg_`/`pl_`/`prs_` vs `v_`/`qg_`/`s_`).
pub fn read_csv<R: BufRead>(r: R) -> Result<SampleSet, DatasetError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or(DatasetError::Csv {
            line: 1,
            reason: "empty file".into(),
        })??;
    let mut input_schema = Vec::new();
    let mut output_schema = Vec::new();
    let mut is_input = Vec::new();
    for name in header.split(',') {
        let input = name.starts_with("pg_") || name.starts_with("pl_") || name.starts_with("prs_");
        let output = name.starts_with("v_") || name.starts_with("qg_") || name.starts_with("s_");
        if input {
            input_schema.push(name.to_string());
        } else if output {
            output_schema.push(name.to_string());
        } else {
            return Err(DatasetError::Csv {
                line: 1,
                reason: format!("unrecognized column {name}"),
            });
        }
        is_input.push(input);
    }
    let mut x_rows: Vec<f64> = Vec::new();
    let mut y_rows: Vec<f64> = Vec::new();
    let mut n_rows = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != is_input.len() {
            return Err(DatasetError::Csv {
                line: i + 2,
                reason: format!(
                    "expected {} fields, found {}",
                    is_input.len(),
                    fields.len()
                ),
            });
        }
        for (f, &inp) in fields.iter().zip(&is_input) {
            let v: f64 = f.parse().map_err(|e| DatasetError::Csv {
                line: i + 2,
                reason: format!("{e}"),
            })?;
            if inp {
                x_rows.push(v);
            } else {
                y_rows.push(v);
            }
        }
        n_rows += 1;
    }
    Ok(SampleSet {
        x: DMatrix::from_row_slice(n_rows, input_schema.len(), &x_rows),
        y: DMatrix::from_row_slice(n_rows, output_schema.len(), &y_rows),
        input_schema,
        output_schema,
        scaler: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::cases;
    use approx::assert_abs_diff_eq;

    /// Default RES levels frequently exceed the scaled load on the small
    /// 9-bus case; tests that need whole batches to succeed tone them down.
    fn feasible_params() -> SamplingParams {
        SamplingParams {
            mu_nu_corr: -2.0,
            ..SamplingParams::default()
        }
    }

    #[test]
    fn degenerate_sigmas_give_exact_multipliers() {
        let case = cases::ieee9();
        let params = SamplingParams {
            sigma_eta_corr: 0.0,
            sigma_eta_unc: 0.0,
            sigma_nu_corr: 0.0,
            sigma_nu_unc: 0.0,
            ..SamplingParams::default()
        };
        let samples = sample_injections(&case, &params, 3).unwrap();
        let expected = (params.mu_eta_corr).exp() * (params.mu_eta_unc).exp();
        for s in &samples {
            for (l, &p) in case.loads.iter().zip(&s.p_l) {
                assert_eq!(p, expected * l.p_ref);
            }
            let nu = (params.mu_nu_corr).exp() * (params.mu_nu_unc).exp();
            for (r, &p) in case.res_units.iter().zip(&s.p_rs) {
                assert_eq!(p, nu * r.p_ref);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let case = cases::ieee9();
        let params = feasible_params();
        let a = sample_injections(&case, &params, 20).unwrap();
        let b = sample_injections(&case, &params, 20).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.p_g, sb.p_g);
            assert_eq!(sa.p_l, sb.p_l);
            assert_eq!(sa.q_l, sb.q_l);
            assert_eq!(sa.p_rs, sb.p_rs);
            assert_eq!(sa.q_rs, sb.q_rs);
        }
    }

    #[test]
    fn log_multiplier_mean_matches_parameters() {
        let case = cases::ieee9();
        let params = feasible_params();
        let n = 10_000;
        let samples = sample_injections(&case, &params, n).unwrap();
        let ref_p = case.loads[0].p_ref;
        let mean_log: f64 = samples
            .iter()
            .map(|s| (s.p_l[0] / ref_p).ln())
            .sum::<f64>()
            / n as f64;
        let expected = params.mu_eta_corr + params.mu_eta_unc;
        let pooled_sd = (params.sigma_eta_corr.powi(2) + params.sigma_eta_unc.powi(2)).sqrt();
        let band = 3.0 * pooled_sd / (n as f64).sqrt();
        assert!(
            (mean_log - expected).abs() < band,
            "mean {mean_log} vs {expected} +- {band}"
        );
    }

    #[test]
    fn generation_balance_is_exact() {
        let case = cases::ieee9();
        let params = feasible_params();
        for s in sample_injections(&case, &params, 50).unwrap() {
            let lhs: f64 = s.p_g.iter().sum::<f64>() + s.p_rs.iter().sum::<f64>();
            let rhs: f64 = params.rho * s.p_l.iter().sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-12, "balance off by {}", lhs - rhs);
        }
    }

    #[test]
    fn reactive_power_is_tied_by_gamma() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 10).unwrap();
        for s in &samples {
            for ((l, &p), &q) in case.loads.iter().zip(&s.p_l).zip(&s.q_l) {
                assert_eq!(q, l.gamma * p);
            }
            for ((r, &p), &q) in case.res_units.iter().zip(&s.p_rs).zip(&s.q_rs) {
                assert_eq!(q, r.gamma * p);
            }
        }
    }

    #[test]
    fn standalone_generation_matches_combined_path() {
        let case = cases::ieee9();
        let params = feasible_params();
        let samples = sample_injections(&case, &params, 25).unwrap();
        let p_l: Vec<Vec<f64>> = samples.iter().map(|s| s.p_l.clone()).collect();
        let p_rs: Vec<Vec<f64>> = samples.iter().map(|s| s.p_rs.clone()).collect();
        let p_g = sample_generation(&case, &params, &p_l, &p_rs).unwrap();
        for (s, pg) in samples.iter().zip(&p_g) {
            assert_eq!(&s.p_g, pg);
        }
    }

    #[test]
    fn excess_renewables_are_infeasible() {
        let case = cases::ieee9();
        // nu median e^5 inflates 80 MW of RES far beyond rho * 315 MW.
        let params = SamplingParams {
            mu_nu_corr: 5.0,
            sigma_nu_corr: 0.0,
            sigma_nu_unc: 0.0,
            mu_nu_unc: 0.0,
            ..SamplingParams::default()
        };
        match sample_injections(&case, &params, 1) {
            Err(DatasetError::InfeasibleSample { sample: 0 }) => {}
            other => panic!("expected infeasible sample, got {other:?}"),
        }
    }

    #[test]
    fn ieee9_dataset_has_expected_schema() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 30).unwrap();
        let (set, dropped) = build_dataset(&case, &samples, 1e-8).unwrap();
        assert_eq!(set.n_x(), 7);
        assert_eq!(set.n_y(), 18);
        assert_eq!(set.n_rows() + dropped, 30);
        assert_eq!(
            set.input_schema,
            ["pg_2", "pg_3", "pl_5", "pl_7", "pl_9", "prs_4", "prs_6"]
        );
        assert_eq!(set.output_schema[0], "v_4");
        assert_eq!(set.output_schema[6], "qg_1");
        assert_eq!(set.output_schema[9], "s_1_4");
        assert!(set.x.iter().all(|v| v.is_finite()));
        assert!(set.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_variance_sampling_gives_identical_rows() {
        let case = cases::ieee9();
        let params = SamplingParams {
            sigma_eta_corr: 0.0,
            sigma_eta_unc: 0.0,
            sigma_nu_corr: 0.0,
            sigma_nu_unc: 0.0,
            psi_lo: 1.0,
            psi_hi: 1.0,
            ..SamplingParams::default()
        };
        let samples = sample_injections(&case, &params, 5).unwrap();
        let (set, dropped) = build_dataset(&case, &samples, 1e-10).unwrap();
        assert_eq!(dropped, 0);
        for r in 1..set.n_rows() {
            for c in 0..set.n_y() {
                assert_eq!(set.y[(r, c)], set.y[(0, c)]);
            }
        }
    }

    #[test]
    fn standardize_roundtrip_and_moments() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 40).unwrap();
        let (set, _) = build_dataset(&case, &samples, 1e-8).unwrap();
        let std_set = standardize(&set).unwrap();
        let n = std_set.n_rows() as f64;
        for c in 0..std_set.n_x() {
            let col = std_set.x.column(c);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
        }
        let back = destandardize(&std_set).unwrap();
        for (a, b) in set.x.iter().zip(back.x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in set.y.iter().zip(back.y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_point_column_standardizes_to_symmetric_pattern() {
        let set = SampleSet {
            input_schema: vec!["pl_1".into()],
            output_schema: vec!["v_2".into()],
            x: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            y: DMatrix::from_column_slice(3, 1, &[2.0, 4.0, 6.0]),
            scaler: None,
        };
        let s = standardize(&set).unwrap();
        // Population std of [1,2,3] is sqrt(2/3); entries become ±sqrt(3/2).
        let e = (1.5f64).sqrt();
        assert_abs_diff_eq!(s.x[(0, 0)], -e, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[(1, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[(2, 0)], e, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_is_reported_by_name() {
        let set = SampleSet {
            input_schema: vec!["pl_1".into()],
            output_schema: vec!["v_4".into()],
            x: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            y: DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]),
            scaler: None,
        };
        match standardize(&set) {
            Err(DatasetError::ConstantColumn(name)) => assert_eq!(name, "v_4"),
            other => panic!("expected constant column error, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 8).unwrap();
        let (set, _) = build_dataset(&case, &samples, 1e-8).unwrap();
        let mut buf = Vec::new();
        write_csv(&set, &mut buf).unwrap();
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(set.input_schema, back.input_schema);
        assert_eq!(set.output_schema, back.output_schema);
        assert_eq!(set.x, back.x);
        assert_eq!(set.y, back.y);
    }

    #[test]
    fn dc_dataset_has_flat_voltage_and_zero_reactive() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 6).unwrap();
        let set = build_dc_dataset(&case, &samples).unwrap();
        assert_eq!(set.n_y(), 18);
        for r in 0..set.n_rows() {
            for c in 0..6 {
                assert_eq!(set.y[(r, c)], 1.0);
            }
            for c in 6..9 {
                assert_eq!(set.y[(r, c)], 0.0);
            }
            for c in 9..18 {
                assert!(set.y[(r, c)] >= 0.0);
            }
        }
    }

    #[test]
    fn dc_flows_track_ac_flows_loosely() {
        let case = cases::ieee9();
        let params = SamplingParams {
            sigma_eta_corr: 0.0,
            sigma_eta_unc: 0.0,
            sigma_nu_corr: 0.0,
            sigma_nu_unc: 0.0,
            psi_lo: 1.0,
            psi_hi: 1.0,
            ..feasible_params()
        };
        let samples = sample_injections(&case, &params, 1).unwrap();
        let (ac, _) = build_dataset(&case, &samples, 1e-10).unwrap();
        let dc = build_dc_dataset(&case, &samples).unwrap();
        for c in 9..18 {
            let (a, d) = (ac.y[(0, c)], dc.y[(0, c)]);
            assert!(
                (a - d).abs() <= 0.20 * a.abs().max(0.3),
                "column {c}: ac {a} vs dc {d}"
            );
        }
    }

    #[test]
    fn residuals_of_exactly_affine_data_vanish() {
        let x = DMatrix::from_fn(8, 2, |r, c| {
            if c == 0 {
                0.3 * r as f64
            } else {
                0.1 * (r * r) as f64
            }
        });
        let y = DMatrix::from_fn(8, 1, |r, _| 2.0 * x[(r, 0)] - x[(r, 1)] + 0.5);
        let set = SampleSet {
            input_schema: vec!["a".into(), "b".into()],
            output_schema: vec!["u".into()],
            x,
            y,
            scaler: None,
        };
        let lin = crate::ccopf::fit_linear_surrogate(&set).unwrap();
        let resid = residual_dataset(&set, &lin).unwrap();
        assert!(resid.y.iter().all(|v| v.abs() < 1e-10));
        assert_eq!(resid.x, set.x);
    }

    #[test]
    fn residuals_plus_prediction_reconstruct_the_labels() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 12).unwrap();
        let (ac, _) = build_dataset(&case, &samples, 1e-8).unwrap();
        let dc = build_dc_dataset(&case, &samples).unwrap();
        let lin = crate::ccopf::fit_linear_surrogate(&dc).unwrap();
        let resid = residual_dataset(&ac, &lin).unwrap();
        let mut max_diff: f64 = 0.0;
        for r in 0..ac.n_rows() {
            let x = DVector::from_fn(ac.n_x(), |c, _| ac.x[(r, c)]);
            let pred = lin.predict(&x);
            for c in 0..ac.n_y() {
                max_diff = max_diff.max((resid.y[(r, c)] + pred[c] - ac.y[(r, c)]).abs());
            }
        }
        assert_eq!(max_diff, 0.0, "reconstruction must be exact");
    }

    #[test]
    fn residual_flow_columns_have_less_variance_than_the_labels() {
        let case = cases::ieee9();
        let samples = sample_injections(&case, &feasible_params(), 40).unwrap();
        let (ac, _) = build_dataset(&case, &samples, 1e-8).unwrap();
        let dc = build_dc_dataset(&case, &samples).unwrap();
        let lin = crate::ccopf::fit_linear_surrogate(&dc).unwrap();
        let resid = residual_dataset(&ac, &lin).unwrap();
        let var = |m: &DMatrix<f64>, c: usize| column_stats(m).1[c].powi(2);
        for (c, name) in ac.output_schema.iter().enumerate() {
            if name.starts_with("s_") {
                assert!(
                    var(&resid.y, c) < var(&ac.y, c),
                    "column {name} must shrink"
                );
            }
        }
    }
}
