//! Static grid model: case-file parsing, validation and admittance assembly.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("malformed case JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no slack bus")]
    NoSlack,
    #[error("multiple slack buses ({0} found)")]
    MultipleSlack(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBus(i64),
    #[error("branch {from}-{to} references a missing bus")]
    DanglingBranch { from: i64, to: i64 },
    #[error("{kind} at missing bus {bus}")]
    DanglingDevice { kind: &'static str, bus: i64 },
    #[error("grid is not connected: bus {0} unreachable from the slack")]
    Disconnected(i64),
    #[error("invalid bus {bus}: {reason}")]
    InvalidBus { bus: i64, reason: String },
    #[error("invalid branch {from}-{to}: {reason}")]
    InvalidBranch { from: i64, to: i64, reason: String },
    #[error("invalid generator at bus {bus}: {reason}")]
    InvalidGen { bus: i64, reason: String },
    #[error("invalid {kind} at bus {bus}: {reason}")]
    InvalidDevice { kind: &'static str, bus: i64, reason: String },
    #[error("zero-impedance branch {from}-{to}")]
    ZeroImpedanceBranch { from: i64, to: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// A single bus. Shunt admittance is per-unit on the system base; line
/// charging from the source data is folded into `b_shunt` at conversion time,
/// which leaves the bus admittance matrix unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
}

/// A series branch, `r + jx` per-unit, with an apparent-power limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    pub s_max: f64,
}

impl Branch {
    /// Series admittance `y = 1/(r + jx)`: conductance `r/(r²+x²)`,
    /// susceptance `−x/(r²+x²)`.
    pub fn admittance(&self) -> Complex<f64> {
        let d = self.r * self.r + self.x * self.x;
        Complex::new(self.r / d, -self.x / d)
    }
}

/// A dispatchable generator with quadratic cost `c2·p² + c1·p + c0`
/// (per-unit power, $ cost).
#[derive(Debug, Clone, PartialEq)]
pub struct Gen {
    pub bus: i64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_set: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

/// A load or renewable unit: reference active power and a fixed
/// reactive-to-active ratio `gamma` (q = gamma·p at any operating point).
#[derive(Debug, Clone, PartialEq)]
pub struct Injector {
    pub bus: i64,
    pub p_ref: f64,
    pub gamma: f64,
}

pub type Load = Injector;
pub type Res = Injector;

/// Validated, immutable grid description. All powers are per-unit on
/// `base_mva`; cost coefficients are per-unit based as well.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub gens: Vec<Gen>,
    pub loads: Vec<Load>,
    pub res_units: Vec<Res>,
    index: HashMap<i64, usize>,
}

impl GridCase {
    /// Validate and build the internal id → position map. Bus order is
    /// preserved from the input; it defines the column order of every
    /// downstream dataset.
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        gens: Vec<Gen>,
        loads: Vec<Load>,
        res_units: Vec<Res>,
    ) -> Result<Self, CaseError> {
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(CaseError::DuplicateBus(b.id));
            }
        }
        let case = GridCase {
            base_mva,
            buses,
            branches,
            gens,
            loads,
            res_units,
            index,
        };
        case.validate()?;
        Ok(case)
    }

    fn validate(&self) -> Result<(), CaseError> {
        let slack: Vec<_> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .collect();
        match slack.len() {
            0 => return Err(CaseError::NoSlack),
            1 => {}
            n => return Err(CaseError::MultipleSlack(n)),
        }
        for b in &self.buses {
            if !(b.v_min > 0.0 && b.v_min <= b.v_max) {
                return Err(CaseError::InvalidBus {
                    bus: b.id,
                    reason: format!("voltage band [{}, {}]", b.v_min, b.v_max),
                });
            }
        }
        for br in &self.branches {
            if !self.index.contains_key(&br.from) || !self.index.contains_key(&br.to) {
                return Err(CaseError::DanglingBranch {
                    from: br.from,
                    to: br.to,
                });
            }
            if br.from == br.to {
                return Err(CaseError::InvalidBranch {
                    from: br.from,
                    to: br.to,
                    reason: "self loop".into(),
                });
            }
            if br.r < 0.0 || br.x == 0.0 || !(br.s_max > 0.0) {
                return Err(CaseError::InvalidBranch {
                    from: br.from,
                    to: br.to,
                    reason: format!("r={}, x={}, s_max={}", br.r, br.x, br.s_max),
                });
            }
        }
        for g in &self.gens {
            let bi = *self
                .index
                .get(&g.bus)
                .ok_or(CaseError::DanglingDevice { kind: "generator", bus: g.bus })?;
            if self.buses[bi].kind == BusKind::Pq {
                return Err(CaseError::InvalidGen {
                    bus: g.bus,
                    reason: "generator on a PQ bus".into(),
                });
            }
            if g.p_min > g.p_max || g.q_min > g.q_max {
                return Err(CaseError::InvalidGen {
                    bus: g.bus,
                    reason: "limit pair min > max".into(),
                });
            }
            if g.c2 < 0.0 || g.c1 < 0.0 || g.c0 < 0.0 {
                return Err(CaseError::InvalidGen {
                    bus: g.bus,
                    reason: "negative cost coefficient".into(),
                });
            }
            if !(g.v_set > 0.0) {
                return Err(CaseError::InvalidGen {
                    bus: g.bus,
                    reason: format!("v_set={}", g.v_set),
                });
            }
        }
        // Every generator-kind bus must carry a set-point, and co-located
        // generators must agree on it: the power-flow solve pins one voltage
        // per bus.
        for b in &self.buses {
            if matches!(b.kind, BusKind::Slack | BusKind::Pv) {
                let sets: Vec<f64> = self
                    .gens
                    .iter()
                    .filter(|g| g.bus == b.id)
                    .map(|g| g.v_set)
                    .collect();
                if sets.is_empty() {
                    return Err(CaseError::InvalidBus {
                        bus: b.id,
                        reason: "generator bus without a generator".into(),
                    });
                }
                if sets.iter().any(|&v| (v - sets[0]).abs() > 1e-12) {
                    return Err(CaseError::InvalidBus {
                        bus: b.id,
                        reason: "co-located generators disagree on v_set".into(),
                    });
                }
            }
        }
        for (kind, list) in [("load", &self.loads), ("res", &self.res_units)] {
            for d in list.iter() {
                if !self.index.contains_key(&d.bus) {
                    return Err(CaseError::DanglingDevice { kind, bus: d.bus });
                }
                // Negative gamma is a capacitive load; only non-finite values
                // are rejected.
                if !d.gamma.is_finite() || !d.p_ref.is_finite() {
                    return Err(CaseError::InvalidDevice {
                        kind,
                        bus: d.bus,
                        reason: format!("p_ref={}, gamma={}", d.p_ref, d.gamma),
                    });
                }
            }
        }
        // Connectivity, breadth-first from the slack.
        let m = self.buses.len();
        let mut adj = vec![Vec::new(); m];
        for br in &self.branches {
            let (a, b) = (self.index[&br.from], self.index[&br.to]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; m];
        let mut queue = vec![self.slack_index()];
        seen[queue[0]] = true;
        while let Some(k) = queue.pop() {
            for &j in &adj[k] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(CaseError::Disconnected(self.buses[k].id));
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Dense position of a bus id; panics on unknown ids (validated input).
    pub fn bus_index(&self, id: i64) -> usize {
        self.index[&id]
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// v_set of the generator(s) at a bus, if any.
    pub fn v_set_at(&self, bus_id: i64) -> Option<f64> {
        self.gens.iter().find(|g| g.bus == bus_id).map(|g| g.v_set)
    }

    /// Positions (into `gens`) of the generators not at the slack bus, in
    /// declaration order. These are the generation columns of any dataset.
    pub fn non_slack_gens(&self) -> Vec<usize> {
        let slack = self.buses[self.slack_index()].id;
        self.gens
            .iter()
            .enumerate()
            .filter(|(_, g)| g.bus != slack)
            .map(|(i, _)| i)
            .collect()
    }

    /// Position (into `gens`) of the slack-bus generator.
    pub fn slack_gen(&self) -> usize {
        let slack = self.buses[self.slack_index()].id;
        self.gens
            .iter()
            .position(|g| g.bus == slack)
            .expect("validated case has a slack generator")
    }
}

/// Bus admittance matrix, standard convention: off-diagonal `(k,j)` is
/// `−y_kj`, diagonal is the sum of incident series admittances plus the bus
/// shunt. Rows of a shunt-free matrix therefore sum to zero.
pub fn admittance_matrix(case: &GridCase) -> Result<DMatrix<Complex<f64>>, CaseError> {
    let m = case.n_buses();
    let mut y = DMatrix::from_element(m, m, Complex::new(0.0, 0.0));
    for br in &case.branches {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(CaseError::ZeroImpedanceBranch {
                from: br.from,
                to: br.to,
            });
        }
        let yb = br.admittance();
        let (a, b) = (case.bus_index(br.from), case.bus_index(br.to));
        y[(a, a)] += yb;
        y[(b, b)] += yb;
        y[(a, b)] -= yb;
        y[(b, a)] -= yb;
    }
    for (k, bus) in case.buses.iter().enumerate() {
        y[(k, k)] += Complex::new(bus.g_shunt, bus.b_shunt);
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// JSON case format. Files carry MW/MVAr (suffixes in the field names) and
// MW-based cost coefficients, as conventional case files do; parsing converts
// to per-unit on base_mva, serializing converts back.

#[derive(Serialize, Deserialize)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<BusFile>,
    branches: Vec<BranchFile>,
    gens: Vec<GenFile>,
    loads: Vec<InjectorFile>,
    res: Vec<InjectorFile>,
}

#[derive(Serialize, Deserialize)]
struct BusFile {
    id: i64,
    kind: BusKind,
    v_min: f64,
    v_max: f64,
    g_shunt: f64,
    b_shunt: f64,
}

#[derive(Serialize, Deserialize)]
struct BranchFile {
    from: i64,
    to: i64,
    r: f64,
    x: f64,
    s_max_mva: f64,
}

#[derive(Serialize, Deserialize)]
struct GenFile {
    bus: i64,
    p_min_mw: f64,
    p_max_mw: f64,
    q_min_mvar: f64,
    q_max_mvar: f64,
    v_set: f64,
    c2: f64,
    c1: f64,
    c0: f64,
}

#[derive(Serialize, Deserialize)]
struct InjectorFile {
    bus: i64,
    p_ref_mw: f64,
    gamma: f64,
}

/// Parse and validate a JSON case file.
pub fn parse_case(text: &str) -> Result<GridCase, CaseError> {
    let f: CaseFile = serde_json::from_str(text)?;
    let base = f.base_mva;
    let buses = f
        .buses
        .into_iter()
        .map(|b| Bus {
            id: b.id,
            kind: b.kind,
            v_min: b.v_min,
            v_max: b.v_max,
            g_shunt: b.g_shunt,
            b_shunt: b.b_shunt,
        })
        .collect();
    let branches = f
        .branches
        .into_iter()
        .map(|b| Branch {
            from: b.from,
            to: b.to,
            r: b.r,
            x: b.x,
            s_max: b.s_max_mva / base,
        })
        .collect();
    let gens = f
        .gens
        .into_iter()
        .map(|g| Gen {
            bus: g.bus,
            p_min: g.p_min_mw / base,
            p_max: g.p_max_mw / base,
            q_min: g.q_min_mvar / base,
            q_max: g.q_max_mvar / base,
            v_set: g.v_set,
            c2: g.c2 * base * base,
            c1: g.c1 * base,
            c0: g.c0,
        })
        .collect();
    let conv = |list: Vec<InjectorFile>| {
        list.into_iter()
            .map(|d| Injector {
                bus: d.bus,
                p_ref: d.p_ref_mw / base,
                gamma: d.gamma,
            })
            .collect()
    };
    let loads = conv(f.loads);
    let res_units = conv(f.res);
    GridCase::new(base, buses, branches, gens, loads, res_units)
}

/// Serialize back to the JSON case format (MW/MVAr units). Round-trips
/// through `parse_case` bit-exactly.
pub fn serialize_case(case: &GridCase) -> String {
    let base = case.base_mva;
    let f = CaseFile {
        base_mva: base,
        buses: case
            .buses
            .iter()
            .map(|b| BusFile {
                id: b.id,
                kind: b.kind,
                v_min: b.v_min,
                v_max: b.v_max,
                g_shunt: b.g_shunt,
                b_shunt: b.b_shunt,
            })
            .collect(),
        branches: case
            .branches
            .iter()
            .map(|b| BranchFile {
                from: b.from,
                to: b.to,
                r: b.r,
                x: b.x,
                s_max_mva: b.s_max * base,
            })
            .collect(),
        gens: case
            .gens
            .iter()
            .map(|g| GenFile {
                bus: g.bus,
                p_min_mw: g.p_min * base,
                p_max_mw: g.p_max * base,
                q_min_mvar: g.q_min * base,
                q_max_mvar: g.q_max * base,
                v_set: g.v_set,
                c2: g.c2 / (base * base),
                c1: g.c1 / base,
                c0: g.c0,
            })
            .collect(),
        loads: case
            .loads
            .iter()
            .map(|d| InjectorFile {
                bus: d.bus,
                p_ref_mw: d.p_ref * base,
                gamma: d.gamma,
            })
            .collect(),
        res: case
            .res_units
            .iter()
            .map(|d| InjectorFile {
                bus: d.bus,
                p_ref_mw: d.p_ref * base,
                gamma: d.gamma,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&f).expect("case serialization cannot fail")
}

/// Case files shipped with the repository.
pub mod cases {
    use super::{parse_case, GridCase};

    pub const IEEE9: &str = include_str!("../../../cases/ieee9.json");
    pub const IEEE39: &str = include_str!("../../../cases/ieee39.json");
    pub const IEEE118: &str = include_str!("../../../cases/ieee118.json");

    pub fn ieee9() -> GridCase {
        parse_case(IEEE9).expect("bundled IEEE-9 case is valid")
    }

    pub fn ieee39() -> GridCase {
        parse_case(IEEE39).expect("bundled IEEE-39 case is valid")
    }

    pub fn ieee118() -> GridCase {
        parse_case(IEEE118).expect("bundled IEEE-118 case is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> &'static str {
        r#"{
            "base_mva": 100.0,
            "buses": [
                {"id": 1, "kind": "slack", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0},
                {"id": 2, "kind": "pq", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0}
            ],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.1, "s_max_mva": 100.0}],
            "gens": [{"bus": 1, "p_min_mw": 0.0, "p_max_mw": 100.0, "q_min_mvar": -100.0, "q_max_mvar": 100.0, "v_set": 1.0, "c2": 0.1, "c1": 1.0, "c0": 0.0}],
            "loads": [{"bus": 2, "p_ref_mw": 10.0, "gamma": 0.3}],
            "res": []
        }"#
    }

    #[test]
    fn minimal_two_bus_case_parses() {
        let case = parse_case(two_bus()).unwrap();
        assert_eq!(case.n_buses(), 2);
        assert_eq!(case.gens.len(), 1);
        assert_eq!(case.loads[0].p_ref, 0.1);
        assert_eq!(case.loads[0].gamma, 0.3);
        assert_eq!(case.branches[0].s_max, 1.0);
    }

    #[test]
    fn missing_slack_is_rejected() {
        let text = two_bus().replace("\"slack\"", "\"pv\"");
        match parse_case(&text) {
            Err(CaseError::NoSlack) => {}
            other => panic!("expected NoSlack, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_bus_id_is_rejected() {
        let text = two_bus().replace("\"id\": 2", "\"id\": 1");
        assert!(matches!(parse_case(&text), Err(CaseError::DuplicateBus(1))));
    }

    #[test]
    fn dangling_branch_is_rejected() {
        let text = two_bus().replace("\"to\": 2", "\"to\": 7");
        assert!(matches!(
            parse_case(&text),
            Err(CaseError::DanglingBranch { from: 1, to: 7 })
        ));
    }

    #[test]
    fn branch_admittance_matches_series_formula() {
        // r=0, x=0.1: y = 0 − j/0.1, so G=0 and B=−10.
        let br = Branch {
            from: 1,
            to: 2,
            r: 0.0,
            x: 0.1,
            s_max: 1.0,
        };
        let y = br.admittance();
        assert_eq!(y.re, 0.0);
        assert!((y.im + 10.0).abs() < 1e-12);
    }

    #[test]
    fn admittance_is_symmetric_with_zero_row_sums() {
        // Three-bus ring, no shunts: every row of Y sums to zero because the
        // diagonal accumulates exactly what the off-diagonals subtract.
        let buses = (1..=3)
            .map(|id| Bus {
                id,
                kind: if id == 1 { BusKind::Slack } else { BusKind::Pq },
                v_min: 0.9,
                v_max: 1.1,
                g_shunt: 0.0,
                b_shunt: 0.0,
            })
            .collect();
        let mk = |from, to, r, x| Branch {
            from,
            to,
            r,
            x,
            s_max: 1.0,
        };
        let branches = vec![
            mk(1, 2, 0.01, 0.1),
            mk(2, 3, 0.02, 0.2),
            mk(3, 1, 0.03, 0.3),
        ];
        let gens = vec![Gen {
            bus: 1,
            p_min: 0.0,
            p_max: 1.0,
            q_min: -1.0,
            q_max: 1.0,
            v_set: 1.0,
            c2: 0.0,
            c1: 0.0,
            c0: 0.0,
        }];
        let case = GridCase::new(100.0, buses, branches, gens, vec![], vec![]).unwrap();
        let y = admittance_matrix(&case).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                assert_eq!(y[(k, j)], y[(j, k)]);
            }
            let row: Complex<f64> = (0..3).map(|j| y[(k, j)]).sum();
            assert!(row.norm() < 1e-12, "row {k} sums to {row}");
        }
    }

    #[test]
    fn shunt_lands_on_the_diagonal() {
        let mut case = parse_case(two_bus()).unwrap();
        case.buses[1].b_shunt = 0.25;
        let y = admittance_matrix(&case).unwrap();
        let row: Complex<f64> = (0..2).map(|j| y[(1, j)]).sum();
        assert!((row - Complex::new(0.0, 0.25)).norm() < 1e-12);
    }

    #[test]
    fn zero_impedance_branch_is_an_error() {
        let mut case = parse_case(two_bus()).unwrap();
        case.branches[0].r = 0.0;
        case.branches[0].x = 0.0;
        assert!(matches!(
            admittance_matrix(&case),
            Err(CaseError::ZeroImpedanceBranch { .. })
        ));
    }

    #[test]
    fn serialize_parse_roundtrip_is_identity() {
        let case = parse_case(two_bus()).unwrap();
        let back = parse_case(&serialize_case(&case)).unwrap();
        assert_eq!(case, back);
    }

    #[test]
    fn bundled_cases_parse_and_validate() {
        let c9 = cases::ieee9();
        assert_eq!((c9.n_buses(), c9.branches.len(), c9.gens.len()), (9, 9, 3));
        let c39 = cases::ieee39();
        assert_eq!(
            (c39.n_buses(), c39.branches.len(), c39.gens.len()),
            (39, 46, 10)
        );
        let c118 = cases::ieee118();
        assert_eq!(
            (c118.n_buses(), c118.branches.len(), c118.gens.len()),
            (118, 186, 54)
        );
        for case in [&c9, &c39, &c118] {
            let back = parse_case(&serialize_case(case)).unwrap();
            assert_eq!(*case, back);
        }
    }

    #[test]
    fn disconnected_grid_is_rejected() {
        let text = r#"{
            "base_mva": 100.0,
            "buses": [
                {"id": 1, "kind": "slack", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0},
                {"id": 2, "kind": "pq", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0},
                {"id": 3, "kind": "pq", "v_min": 0.9, "v_max": 1.1, "g_shunt": 0.0, "b_shunt": 0.0}
            ],
            "branches": [{"from": 1, "to": 2, "r": 0.01, "x": 0.1, "s_max_mva": 100.0}],
            "gens": [{"bus": 1, "p_min_mw": 0.0, "p_max_mw": 100.0, "q_min_mvar": -100.0, "q_max_mvar": 100.0, "v_set": 1.0, "c2": 0.0, "c1": 1.0, "c0": 0.0}],
            "loads": [],
            "res": []
        }"#;
        assert!(matches!(parse_case(text), Err(CaseError::Disconnected(3))));
    }
}
