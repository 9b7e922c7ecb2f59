//! Grid description, MATPOWER case parsing and the dispatch box.
//!
//! Columns read from a MATPOWER case (everything else is ignored):
//!
//! | table     | columns                                            |
//! |-----------|----------------------------------------------------|
//! | `bus`     | bus_i, type, Pd, Qd, Gs, Bs, Vm, Vmax, Vmin        |
//! | `gen`     | bus, Pg, Qmax, Qmin, Vg, status, Pmax, Pmin        |
//! | `branch`  | fbus, tbus, r, x, b, status (ratio/angle ignored)  |
//! | `gencost` | model (must be 2), n, polynomial coefficients      |
//!
//! All quantities are converted to per-unit on `baseMVA` at parse time.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{logit, sigmoid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("missing `{0}` in case file")]
    Missing(&'static str),
    #[error("{table} row {row}, column {column}: {msg}")]
    Cell {
        table: &'static str,
        row: usize,
        column: usize,
        msg: String,
    },
    #[error("{table} row {row}: {msg}")]
    Row {
        table: &'static str,
        row: usize,
        msg: String,
    },
    #[error("multiple slack buses (bus {0} and bus {1})")]
    MultipleSlack(usize, usize),
    #[error("no slack bus")]
    NoSlack,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("dispatch entry {index} = {value} is not strictly inside ({lower}, {upper})")]
    OnBoundary {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    /// Bus number as written in the case file.
    pub id: usize,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage magnitude from the case file (used for a generator-less slack).
    pub v_set: f64,
    pub shunt: Complex64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Nominal series admittance 1/(r + jx).
    pub y_series: Complex64,
    /// Total line-charging susceptance.
    pub charging: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p: f64) -> f64 {
        self.c2 * p * p + self.c1 * p + self.c0
    }
    pub fn slope(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub p_set: f64,
    pub v_set: f64,
    pub cost: CostCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Load {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
    pub dispatchable: bool,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

/// Options applied while building a [`Network`] from a case file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseOptions {
    /// Make every load dispatchable within `load_range` × nominal demand.
    pub dispatchable_loads: bool,
    pub load_range: [f64; 2],
}

impl Default for CaseOptions {
    fn default() -> Self {
        Self {
            dispatchable_loads: false,
            load_range: [0.5, 1.0],
        }
    }
}

/// Immutable grid description in per-unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    slack: usize,
    /// Generators whose real power is a dispatch variable.
    dispatched_gens: Vec<usize>,
    /// Buses with at least one generator, ascending.
    gen_buses: Vec<usize>,
    /// Generators attached to each bus.
    gens_at_bus: Vec<Vec<usize>>,
    /// Loads attached to each bus.
    loads_at_bus: Vec<Vec<usize>>,
    dispatchable_loads: Vec<usize>,
}

impl Network {
    /// Assemble and validate a network. Bus, generator and load indices are
    /// positions in the corresponding vectors.
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        loads: Vec<Load>,
    ) -> Result<Self, ParseError> {
        if !(base_mva > 0.0) {
            return Err(ParseError::Invalid(format!("baseMVA must be positive, got {base_mva}")));
        }
        let n = buses.len();
        let mut slack: Option<usize> = None;
        for (i, b) in buses.iter().enumerate() {
            if b.kind == BusKind::Slack {
                if let Some(s) = slack {
                    return Err(ParseError::MultipleSlack(buses[s].id, b.id));
                }
                slack = Some(i);
            }
            check_limits("bus", i, "Vmin/Vmax", b.v_min, b.v_max)?;
        }
        let slack = slack.ok_or(ParseError::NoSlack)?;
        for (k, br) in branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(ParseError::Row {
                    table: "branch",
                    row: k + 1,
                    msg: "unknown bus reference".into(),
                });
            }
        }
        let mut gens_at_bus = vec![Vec::new(); n];
        for (g, gen) in generators.iter().enumerate() {
            if gen.bus >= n {
                return Err(ParseError::Row {
                    table: "gen",
                    row: g + 1,
                    msg: "unknown bus reference".into(),
                });
            }
            check_limits("gen", g, "Pmin/Pmax", gen.p_min, gen.p_max)?;
            check_limits("gen", g, "Qmin/Qmax", gen.q_min, gen.q_max)?;
            gens_at_bus[gen.bus].push(g);
        }
        let mut loads_at_bus = vec![Vec::new(); n];
        for (l, load) in loads.iter().enumerate() {
            if load.bus >= n {
                return Err(ParseError::Row {
                    table: "bus",
                    row: l + 1,
                    msg: "load on unknown bus".into(),
                });
            }
            check_limits("load", l, "Pmin/Pmax", load.p_min, load.p_max)?;
            check_limits("load", l, "Qmin/Qmax", load.q_min, load.q_max)?;
            loads_at_bus[load.bus].push(l);
        }
        for (i, b) in buses.iter().enumerate() {
            if b.kind == BusKind::Pv && gens_at_bus[i].is_empty() {
                return Err(ParseError::Invalid(format!("PV bus {} has no generator", b.id)));
            }
            if b.kind == BusKind::Pq && !gens_at_bus[i].is_empty() {
                return Err(ParseError::Invalid(format!("PQ bus {} carries a generator", b.id)));
            }
        }
        let dispatched_gens = (0..generators.len())
            .filter(|&g| generators[g].bus != slack)
            .collect();
        let gen_buses = (0..n).filter(|&i| !gens_at_bus[i].is_empty()).collect();
        let dispatchable_loads = (0..loads.len()).filter(|&l| loads[l].dispatchable).collect();
        Ok(Self {
            base_mva,
            buses,
            branches,
            generators,
            loads,
            slack,
            dispatched_gens,
            gen_buses,
            gens_at_bus,
            loads_at_bus,
            dispatchable_loads,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }
    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }
    pub fn slack(&self) -> usize {
        self.slack
    }
    pub fn dispatched_generators(&self) -> &[usize] {
        &self.dispatched_gens
    }
    pub fn generator_buses(&self) -> &[usize] {
        &self.gen_buses
    }
    pub fn generators_at(&self, bus: usize) -> &[usize] {
        &self.gens_at_bus[bus]
    }
    pub fn loads_at(&self, bus: usize) -> &[usize] {
        &self.loads_at_bus[bus]
    }
    pub fn dispatchable_loads(&self) -> &[usize] {
        &self.dispatchable_loads
    }

    /// Position of bus `id` (case numbering).
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Index of the first branch joining case buses `a` and `b`, either
    /// orientation.
    pub fn branch_between(&self, a: usize, b: usize) -> Option<usize> {
        let (a, b) = (self.bus_index(a)?, self.bus_index(b)?);
        self.branches
            .iter()
            .position(|br| (br.from == a && br.to == b) || (br.from == b && br.to == a))
    }

    pub fn shape(&self) -> DispatchShape {
        DispatchShape {
            n_pg: self.dispatched_gens.len(),
            n_vg: self.gen_buses.len(),
            n_pl: self.dispatchable_loads.len(),
            n_ql: self.dispatchable_loads.len(),
        }
    }

    /// Dispatch recorded in the case file: generator set points and nominal
    /// load demand. Generator voltages are taken from the first generator at
    /// each bus.
    pub fn nominal_dispatch(&self) -> Dispatch {
        Dispatch {
            p_g: self.dispatched_gens.iter().map(|&g| self.generators[g].p_set).collect(),
            v_g: self
                .gen_buses
                .iter()
                .map(|&b| self.generators[self.gens_at_bus[b][0]].v_set)
                .collect(),
            p_l: self.dispatchable_loads.iter().map(|&l| self.loads[l].p).collect(),
            q_l: self.dispatchable_loads.iter().map(|&l| self.loads[l].q).collect(),
        }
    }

    /// Real and reactive demand at every bus for `dispatch`.
    pub fn bus_demand(&self, dispatch: &Dispatch) -> (Vec<f64>, Vec<f64>) {
        let mut pd = vec![0.0; self.n_buses()];
        let mut qd = vec![0.0; self.n_buses()];
        let mut k = 0;
        for (l, load) in self.loads.iter().enumerate() {
            if load.dispatchable {
                debug_assert_eq!(self.dispatchable_loads[k], l);
                pd[load.bus] += dispatch.p_l[k];
                qd[load.bus] += dispatch.q_l[k];
                k += 1;
            } else {
                pd[load.bus] += load.p;
                qd[load.bus] += load.q;
            }
        }
        (pd, qd)
    }

    /// Voltage magnitude set point for each bus that has one (generator buses
    /// and the slack); `None` for PQ buses.
    pub fn voltage_setpoints(&self, dispatch: &Dispatch) -> Vec<Option<f64>> {
        let mut v = vec![None; self.n_buses()];
        for (k, &b) in self.gen_buses.iter().enumerate() {
            v[b] = Some(dispatch.v_g[k]);
        }
        if v[self.slack].is_none() {
            v[self.slack] = Some(self.buses[self.slack].v_set);
        }
        v
    }
}

fn check_limits(
    table: &'static str,
    row: usize,
    what: &str,
    lo: f64,
    hi: f64,
) -> Result<(), ParseError> {
    if !(lo <= hi) {
        return Err(ParseError::Row {
            table,
            row: row + 1,
            msg: format!("{what} lower limit {lo} exceeds upper limit {hi}"),
        });
    }
    Ok(())
}

/// Raw numeric tables of a MATPOWER case.
struct RawCase {
    base_mva: f64,
    tables: BTreeMap<String, Vec<Vec<f64>>>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn read_raw(text: &str) -> Result<RawCase, ParseError> {
    let mut base_mva = None;
    let mut tables = BTreeMap::new();
    let mut current: Option<(String, Vec<Vec<f64>>, String)> = None;

    for line in text.lines().map(strip_comment) {
        if let Some((name, rows, buf)) = current.as_mut() {
            let (body, done) = match line.find(']') {
                Some(i) => (&line[..i], true),
                None => (line, false),
            };
            buf.push_str(body);
            buf.push('\n');
            if done {
                let table = parse_rows(name, buf)?;
                rows.extend(table);
                let (name, rows, _) = current.take().unwrap();
                tables.insert(name, rows);
            }
            continue;
        }
        let trimmed = line.trim();
        let Some(rest) = trimmed.strip_prefix("mpc.") else {
            continue;
        };
        let Some((name, value)) = rest.split_once('=') else {
            continue;
        };
        let name = name.trim().to_string();
        let value = value.trim();
        if name == "baseMVA" {
            let v = value.trim_end_matches(';').trim();
            base_mva = Some(v.parse::<f64>().map_err(|_| {
                ParseError::Invalid(format!("baseMVA is not a number: `{v}`"))
            })?);
        } else if let Some(body) = value.strip_prefix('[') {
            match body.find(']') {
                Some(i) => {
                    let rows = parse_rows(&name, &body[..i])?;
                    tables.insert(name, rows);
                }
                None => current = Some((name, Vec::new(), format!("{body}\n"))),
            }
        }
    }
    if let Some((name, _, _)) = current {
        return Err(ParseError::Invalid(format!("unterminated matrix `mpc.{name}`")));
    }
    Ok(RawCase {
        base_mva: base_mva.ok_or(ParseError::Missing("mpc.baseMVA"))?,
        tables,
    })
}

fn table_name(name: &str) -> &'static str {
    match name {
        "bus" => "bus",
        "gen" => "gen",
        "branch" => "branch",
        "gencost" => "gencost",
        _ => "matrix",
    }
}

fn parse_rows(name: &str, body: &str) -> Result<Vec<Vec<f64>>, ParseError> {
    let mut rows = Vec::new();
    for chunk in body.split([';', '\n']) {
        let cells: Vec<&str> = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if cells.is_empty() {
            continue;
        }
        let row = rows.len() + 1;
        let parsed = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>().map_err(|_| ParseError::Cell {
                    table: table_name(name),
                    row,
                    column: c + 1,
                    msg: format!("not a number: `{s}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(parsed);
    }
    Ok(rows)
}

fn require_cols(
    table: &'static str,
    rows: &[Vec<f64>],
    min: usize,
) -> Result<(), ParseError> {
    for (r, row) in rows.iter().enumerate() {
        if row.len() < min {
            return Err(ParseError::Cell {
                table,
                row: r + 1,
                column: row.len() + 1,
                msg: format!("expected at least {min} columns"),
            });
        }
    }
    Ok(())
}

fn as_bus_id(table: &'static str, row: usize, column: usize, v: f64) -> Result<usize, ParseError> {
    if v.fract() != 0.0 || v < 0.0 {
        return Err(ParseError::Cell {
            table,
            row,
            column,
            msg: format!("bus number must be a non-negative integer, got {v}"),
        });
    }
    Ok(v as usize)
}

/// Parse a MATPOWER case with default [`CaseOptions`].
pub fn parse_case(text: &str) -> Result<Network, ParseError> {
    parse_case_with(text, &CaseOptions::default())
}

pub fn parse_case_with(text: &str, opts: &CaseOptions) -> Result<Network, ParseError> {
    let raw = read_raw(text)?;
    let base = raw.base_mva;
    if !(base > 0.0) {
        return Err(ParseError::Invalid(format!("baseMVA must be positive, got {base}")));
    }
    for name in raw.tables.keys() {
        if !matches!(name.as_str(), "bus" | "gen" | "branch" | "gencost") {
            log::warn!("ignoring unrecognised matrix `mpc.{name}`");
        }
    }
    let bus_rows = raw.tables.get("bus").ok_or(ParseError::Missing("mpc.bus"))?;
    let gen_rows = raw.tables.get("gen").ok_or(ParseError::Missing("mpc.gen"))?;
    let branch_rows = raw.tables.get("branch").ok_or(ParseError::Missing("mpc.branch"))?;
    require_cols("bus", bus_rows, 13)?;
    require_cols("gen", gen_rows, 10)?;
    require_cols("branch", branch_rows, 11)?;

    let mut index_of = BTreeMap::new();
    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut loads = Vec::new();
    for (r, row) in bus_rows.iter().enumerate() {
        let id = as_bus_id("bus", r + 1, 1, row[0])?;
        if index_of.insert(id, r).is_some() {
            return Err(ParseError::Row {
                table: "bus",
                row: r + 1,
                msg: format!("duplicate bus number {id}"),
            });
        }
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => {
                return Err(ParseError::Cell {
                    table: "bus",
                    row: r + 1,
                    column: 2,
                    msg: "isolated buses are not supported".into(),
                })
            }
            t => {
                return Err(ParseError::Cell {
                    table: "bus",
                    row: r + 1,
                    column: 2,
                    msg: format!("unknown bus type {t}"),
                })
            }
        };
        buses.push(Bus {
            id,
            kind,
            v_min: row[12],
            v_max: row[11],
            v_set: row[7],
            shunt: Complex64::new(row[4], row[5]) / base,
        });
        let (pd, qd) = (row[2] / base, row[3] / base);
        if pd != 0.0 || qd != 0.0 {
            let [lo, hi] = opts.load_range;
            let span = |x: f64| (x * lo).min(x * hi)..=(x * lo).max(x * hi);
            let (p_rng, q_rng) = if opts.dispatchable_loads {
                (span(pd), span(qd))
            } else {
                (pd..=pd, qd..=qd)
            };
            loads.push(Load {
                bus: r,
                p: pd,
                q: qd,
                dispatchable: opts.dispatchable_loads,
                p_min: *p_rng.start(),
                p_max: *p_rng.end(),
                q_min: *q_rng.start(),
                q_max: *q_rng.end(),
            });
        }
    }

    let lookup = |table: &'static str, r: usize, c: usize, v: f64| -> Result<usize, ParseError> {
        let id = as_bus_id(table, r + 1, c, v)?;
        index_of.get(&id).copied().ok_or_else(|| ParseError::Cell {
            table,
            row: r + 1,
            column: c,
            msg: format!("unknown bus {id}"),
        })
    };

    let mut branches = Vec::with_capacity(branch_rows.len());
    let mut warned_tap = false;
    for (r, row) in branch_rows.iter().enumerate() {
        let from = lookup("branch", r, 1, row[0])?;
        let to = lookup("branch", r, 2, row[1])?;
        if row[10] == 0.0 {
            continue;
        }
        let z = Complex64::new(row[2], row[3]);
        if z.norm() == 0.0 {
            return Err(ParseError::Row {
                table: "branch",
                row: r + 1,
                msg: "zero branch impedance".into(),
            });
        }
        let tap = row[8];
        if (tap != 0.0 && tap != 1.0) || row[9] != 0.0 {
            if !warned_tap {
                log::warn!("branch tap ratios and phase shifts are ignored (first at row {})", r + 1);
            }
            warned_tap = true;
        }
        branches.push(Branch {
            from,
            to,
            y_series: z.inv(),
            charging: row[4],
        });
    }

    let costs = raw.tables.get("gencost");
    let mut generators = Vec::with_capacity(gen_rows.len());
    for (r, row) in gen_rows.iter().enumerate() {
        if row[7] <= 0.0 {
            continue;
        }
        let bus = lookup("gen", r, 1, row[0])?;
        let cost = match costs.and_then(|c| c.get(r)) {
            Some(c) => poly_cost(r, c, base)?,
            None => {
                log::warn!("gen row {} has no gencost entry; using zero cost", r + 1);
                CostCurve { c2: 0.0, c1: 0.0, c0: 0.0 }
            }
        };
        generators.push(Generator {
            bus,
            p_set: row[1] / base,
            q_max: row[3] / base,
            q_min: row[4] / base,
            v_set: row[5],
            p_max: row[8] / base,
            p_min: row[9] / base,
            cost,
        });
    }
    // A PV bus whose generators are all out of service behaves as PQ.
    for (i, b) in buses.iter_mut().enumerate() {
        if b.kind == BusKind::Pv && !generators.iter().any(|g| g.bus == i) {
            log::warn!("bus {} has no in-service generator; treating as PQ", b.id);
            b.kind = BusKind::Pq;
        }
    }
    Network::new(base, buses, branches, generators, loads)
}

fn poly_cost(r: usize, row: &[f64], base: f64) -> Result<CostCurve, ParseError> {
    let err = |column: usize, msg: String| ParseError::Cell {
        table: "gencost",
        row: r + 1,
        column,
        msg,
    };
    if row.len() < 4 {
        return Err(err(row.len() + 1, "expected at least 4 columns".into()));
    }
    if row[0] != 2.0 {
        return Err(err(1, format!("only polynomial cost (model 2) is supported, got {}", row[0])));
    }
    let n = row[3] as usize;
    if n > 3 {
        return Err(err(4, format!("polynomial degree {} exceeds 2", n.saturating_sub(1))));
    }
    if row.len() < 4 + n {
        return Err(err(row.len() + 1, format!("expected {n} coefficients")));
    }
    // Coefficients are listed highest order first.
    let mut c = [0.0; 3];
    for k in 0..n {
        c[n - 1 - k] = row[4 + k];
    }
    Ok(CostCurve {
        c2: c[2] * base * base,
        c1: c[1] * base,
        c0: c[0],
    })
}

/// Sizes of the four blocks of a flattened dispatch vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchShape {
    pub n_pg: usize,
    pub n_vg: usize,
    pub n_pl: usize,
    pub n_ql: usize,
}

impl DispatchShape {
    pub fn len(&self) -> usize {
        self.n_pg + self.n_vg + self.n_pl + self.n_ql
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn pg_offset(&self) -> usize {
        0
    }
    pub fn vg_offset(&self) -> usize {
        self.n_pg
    }
    pub fn pl_offset(&self) -> usize {
        self.n_pg + self.n_vg
    }
    pub fn ql_offset(&self) -> usize {
        self.n_pg + self.n_vg + self.n_pl
    }
}

/// Controllable operating point in per-unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    /// Real power of each non-slack generator.
    pub p_g: Vec<f64>,
    /// Voltage magnitude at each generator bus.
    pub v_g: Vec<f64>,
    /// Real demand of each dispatchable load.
    pub p_l: Vec<f64>,
    /// Reactive demand of each dispatchable load.
    pub q_l: Vec<f64>,
}

impl Dispatch {
    pub fn shape(&self) -> DispatchShape {
        DispatchShape {
            n_pg: self.p_g.len(),
            n_vg: self.v_g.len(),
            n_pl: self.p_l.len(),
            n_ql: self.q_l.len(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.p_g[..], &self.v_g, &self.p_l, &self.q_l].concat()
    }

    pub fn from_flat(shape: DispatchShape, flat: &[f64]) -> Result<Self, DispatchError> {
        if flat.len() != shape.len() {
            return Err(DispatchError::Length {
                expected: shape.len(),
                got: flat.len(),
            });
        }
        let (pg, rest) = flat.split_at(shape.n_pg);
        let (vg, rest) = rest.split_at(shape.n_vg);
        let (pl, ql) = rest.split_at(shape.n_pl);
        Ok(Self {
            p_g: pg.to_vec(),
            v_g: vg.to_vec(),
            p_l: pl.to_vec(),
            q_l: ql.to_vec(),
        })
    }
}

/// Box bounds on the flattened dispatch. Entries with equal bounds are
/// frozen: they keep their bound value and are left out of the unconstrained
/// coordinate vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchBox {
    pub shape: DispatchShape,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    free: Vec<usize>,
}

/// Assemble the dispatch box from generator P and voltage limits and the
/// bounds of dispatchable loads.
pub fn dispatch_box(network: &Network) -> DispatchBox {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for &g in network.dispatched_generators() {
        lower.push(network.generators[g].p_min);
        upper.push(network.generators[g].p_max);
    }
    for &b in network.generator_buses() {
        lower.push(network.buses[b].v_min);
        upper.push(network.buses[b].v_max);
    }
    for &l in network.dispatchable_loads() {
        lower.push(network.loads[l].p_min);
        upper.push(network.loads[l].p_max);
    }
    for &l in network.dispatchable_loads() {
        lower.push(network.loads[l].q_min);
        upper.push(network.loads[l].q_max);
    }
    DispatchBox::new(network.shape(), lower, upper)
}

impl DispatchBox {
    pub fn new(shape: DispatchShape, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), shape.len());
        assert_eq!(upper.len(), shape.len());
        let free = (0..lower.len()).filter(|&i| lower[i] < upper[i]).collect();
        Self {
            shape,
            lower,
            upper,
            free,
        }
    }

    /// Length of the full (physical) dispatch layout.
    pub fn len(&self) -> usize {
        self.lower.len()
    }
    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
    /// Dimension of the unconstrained coordinate vector.
    pub fn free_dim(&self) -> usize {
        self.free.len()
    }
    /// Layout positions that are not frozen, ascending.
    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn to_unconstrained(&self, d: &Dispatch) -> Result<Vec<f64>, DispatchError> {
        let flat = d.flatten();
        if flat.len() != self.len() {
            return Err(DispatchError::Length {
                expected: self.len(),
                got: flat.len(),
            });
        }
        self.free
            .iter()
            .map(|&i| {
                let (lo, hi, v) = (self.lower[i], self.upper[i], flat[i]);
                if !(v > lo && v < hi) {
                    return Err(DispatchError::OnBoundary {
                        index: i,
                        value: v,
                        lower: lo,
                        upper: hi,
                    });
                }
                Ok(logit((v - lo) / (hi - lo)))
            })
            .collect()
    }

    /// Map unconstrained coordinates back into the box. The result is
    /// strictly inside the bounds for every finite `z`.
    pub fn from_unconstrained(&self, z: &[f64]) -> Result<Dispatch, DispatchError> {
        if z.len() != self.free.len() {
            return Err(DispatchError::Length {
                expected: self.free.len(),
                got: z.len(),
            });
        }
        let mut flat = self.lower.clone();
        for (&i, &zi) in self.free.iter().zip(z) {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            let v = lo + (hi - lo) * sigmoid(zi);
            flat[i] = v.clamp(lo.next_up(), hi.next_down());
        }
        Dispatch::from_flat(self.shape, &flat)
    }

    /// Derivative of each free physical coordinate with respect to its
    /// unconstrained coordinate, evaluated at `d`.
    pub fn jacobian_diag(&self, d: &Dispatch) -> Vec<f64> {
        let flat = d.flatten();
        self.free
            .iter()
            .map(|&i| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                (flat[i] - lo) * (hi - flat[i]) / (hi - lo)
            })
            .collect()
    }

    /// Move every free entry at least `margin` × width away from its bounds
    /// and pin frozen entries to their bound.
    pub fn nudge_inside(&self, d: &Dispatch, margin: f64) -> Dispatch {
        let mut flat = d.flatten();
        for i in 0..flat.len() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            let w = hi - lo;
            flat[i] = if w > 0.0 {
                flat[i].clamp(lo + margin * w, hi - margin * w)
            } else {
                lo
            };
        }
        Dispatch::from_flat(self.shape, &flat).expect("layout from own shape")
    }

    /// Uniform sample over the box in physical coordinates.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Dispatch {
        let flat: Vec<f64> = (0..self.len())
            .map(|i| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                if hi > lo {
                    let u: f64 = rng.sample(rand::distr::Open01);
                    lo + (hi - lo) * u
                } else {
                    lo
                }
            })
            .collect();
        Dispatch::from_flat(self.shape, &flat).expect("layout from own shape")
    }

    pub fn contains_strictly(&self, d: &Dispatch) -> bool {
        let flat = d.flatten();
        flat.len() == self.len()
            && self.free.iter().all(|&i| flat[i] > self.lower[i] && flat[i] < self.upper[i])
    }
}
