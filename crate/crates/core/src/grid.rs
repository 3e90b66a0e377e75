//! Grid data model: case parsing, validation, admittance assembly and the
//! bus partition behind the prediction/state split.
//!
//! Internally every quantity is per-unit on `base_mva`; branch and generator
//! records refer to buses by their zero-based position in `Network::buses`,
//! which is sorted by external bus number.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Reference,
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// External bus number from the case file.
    pub id: usize,
    pub kind: BusKind,
    /// Nominal demand, p.u.
    pub pd: f64,
    pub qd: f64,
    /// Shunt conductance/susceptance at V = 1 p.u.
    pub shunt_g: f64,
    pub shunt_b: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub charging_b: f64,
    /// Off-nominal turns ratio at the from end (1 when absent).
    pub tap: f64,
    /// Apparent-power limit; `None` means unlimited.
    pub s_max: Option<f64>,
}

impl Branch {
    pub fn series_admittance(&self) -> Option<(f64, f64)> {
        let d = self.r * self.r + self.x * self.x;
        if d == 0.0 {
            None
        } else {
            Some((self.r / d, -self.x / d))
        }
    }

    pub fn s_max_sq(&self) -> f64 {
        self.s_max.map_or(f64::INFINITY, |s| s * s)
    }
}

/// Quadratic cost `c0 + c1 P + c2 P^2` in $/h with `P` in p.u.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostPoly {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl CostPoly {
    #[inline]
    pub fn eval(&self, p: f64) -> f64 {
        self.c0 + p * (self.c1 + p * self.c2)
    }

    #[inline]
    pub fn derivative(&self, p: f64) -> f64 {
        self.c1 + 2.0 * self.c2 * p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostPoly,
    /// Voltage set-point from the case, used for warm starts only.
    pub v_set: f64,
    /// Number of case-file units merged into this record.
    pub units: usize,
}

/// Serializable content of a [`Network`]; the admittance matrix and the
/// partition are derived on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkData {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

/// Nodal admittance `Y = G + jB` in CSR form (row `i` holds bus `i` and its
/// neighbours, columns sorted) plus the per-branch two-port stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    /// Position of the diagonal entry of each row.
    pub diag: Vec<usize>,
    pub stamps: Vec<BranchStamp>,
}

/// `[I_f; I_t] = [[Y_ff, Y_ft]; [Y_tf, Y_tt]] [V_f; V_t]`, stored as (re, im).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchStamp {
    pub ff: (f64, f64),
    pub ft: (f64, f64),
    pub tf: (f64, f64),
    pub tt: (f64, f64),
}

impl Admittance {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(p) => (self.g[self.row_ptr[i] + p], self.b[self.row_ptr[i] + p]),
            Err(_) => (0.0, 0.0),
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.col_idx[p], self.g[p], self.b[p]))
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn to_dense(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.n();
        let mut g = vec![vec![0.0; n]; n];
        let mut b = vec![vec![0.0; n]; n];
        for i in 0..n {
            for (j, gij, bij) in self.row(i) {
                g[i][j] = gij;
                b[i][j] = bij;
            }
        }
        (g, b)
    }
}

/// Reference / generator / load split of the buses with the index maps used
/// by the `y`, `z1` and `z2` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BusPartition {
    pub reference: usize,
    /// Generator buses other than the reference, ascending.
    pub gen: Vec<usize>,
    /// Load buses, ascending.
    pub load: Vec<usize>,
    /// Generator and load buses, ascending: angle unknowns and P equations.
    pub nonref: Vec<usize>,
    /// Generator buses plus the reference, ascending: voltage entries of `y`.
    pub gen_ref: Vec<usize>,
    pub gen_pos: Vec<Option<usize>>,
    pub load_pos: Vec<Option<usize>>,
    pub nonref_pos: Vec<Option<usize>>,
    pub gen_ref_pos: Vec<Option<usize>>,
    /// Aggregated generator record attached to each bus.
    pub generator_at: Vec<Option<usize>>,
    pub n_branches: usize,
}

impl BusPartition {
    pub fn n_bus(&self) -> usize {
        self.gen_pos.len()
    }
    pub fn n_gen(&self) -> usize {
        self.gen.len()
    }
    pub fn n_load(&self) -> usize {
        self.load.len()
    }
    /// `|y| = 2 N_g + 1`
    pub fn y_len(&self) -> usize {
        2 * self.gen.len() + 1
    }
    /// `|z1| = 2 N_d + N_g`
    pub fn z1_len(&self) -> usize {
        2 * self.load.len() + self.gen.len()
    }
    /// `|z2| = 2 + N_g + M`
    pub fn z2_len(&self) -> usize {
        2 + self.gen.len() + self.n_branches
    }
    /// Offset of the voltage block inside `y`.
    pub fn y_v_offset(&self) -> usize {
        self.gen.len()
    }
    /// Offset of the load-voltage block inside `z1`.
    pub fn z1_v_offset(&self) -> usize {
        self.nonref.len()
    }
    /// Offset of the `s^2` block inside `z2`.
    pub fn z2_s2_offset(&self) -> usize {
        2 + self.gen.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkData", into = "NetworkData")]
pub struct Network {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    admittance: Admittance,
    partition: BusPartition,
}

impl TryFrom<NetworkData> for Network {
    type Error = Error;
    fn try_from(d: NetworkData) -> Result<Self> {
        Network::new(d)
    }
}

impl From<Network> for NetworkData {
    fn from(n: Network) -> Self {
        NetworkData {
            name: n.name,
            base_mva: n.base_mva,
            buses: n.buses,
            branches: n.branches,
            generators: n.generators,
        }
    }
}

impl Network {
    /// Validates the data and derives admittance and partition.
    pub fn new(data: NetworkData) -> Result<Self> {
        validate(&data)?;
        let admittance = build_admittance_from(&data)?;
        let partition = partition_from(&data);
        Ok(Self {
            name: data.name,
            base_mva: data.base_mva,
            buses: data.buses,
            branches: data.branches,
            generators: data.generators,
            admittance,
            partition,
        })
    }

    pub fn data(&self) -> NetworkData {
        self.clone().into()
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    pub fn admittance(&self) -> &Admittance {
        &self.admittance
    }

    pub fn partition(&self) -> &BusPartition {
        &self.partition
    }

    /// Nominal demand `x = [P_d; Q_d]`.
    pub fn nominal_demand(&self) -> Vec<f64> {
        self.buses
            .iter()
            .map(|b| b.pd)
            .chain(self.buses.iter().map(|b| b.qd))
            .collect()
    }

    /// Box of the prediction vector `y = [P_g; V_gen_ref]`.
    pub fn y_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let part = &self.partition;
        let mut lo = Vec::with_capacity(part.y_len());
        let mut hi = Vec::with_capacity(part.y_len());
        for &i in &part.gen {
            let g = &self.generators[part.generator_at[i].unwrap()];
            lo.push(g.p_min);
            hi.push(g.p_max);
        }
        for &i in &part.gen_ref {
            lo.push(self.buses[i].v_min);
            hi.push(self.buses[i].v_max);
        }
        (lo, hi)
    }

    pub fn reference_generator(&self) -> &Generator {
        &self.generators[self.partition.generator_at[self.partition.reference].unwrap()]
    }

    /// Copy with unit taps and no line charging, i.e. the plain series
    /// branch model whose flows are `p = -G V_i^2 + V_i V_j (G cos + B sin)`.
    pub fn without_taps_and_charging(&self) -> Result<Self> {
        let mut d = self.data();
        for br in &mut d.branches {
            br.tap = 1.0;
            br.charging_b = 0.0;
        }
        Network::new(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Parses MATPOWER `.m` text or the JSON mirror (detected by a leading `{`).
pub fn parse_case(text: &str) -> Result<Network> {
    if text.trim_start().starts_with('{') {
        return Network::from_json(text);
    }
    let raw = RawCase::parse(text)?;
    raw.into_network()
}

pub fn build_admittance(network: &Network) -> Result<Admittance> {
    build_admittance_from(&network.data())
}

pub fn partition(network: &Network) -> BusPartition {
    network.partition.clone()
}

fn validate(d: &NetworkData) -> Result<()> {
    let n = d.buses.len();
    if n == 0 {
        return Err(Error::Validation("network has no buses".into()));
    }
    if !(d.base_mva > 0.0) {
        return Err(Error::Validation(format!("base MVA must be positive, got {}", d.base_mva)));
    }
    let refs: Vec<usize> = (0..n).filter(|&i| d.buses[i].kind == BusKind::Reference).collect();
    match refs.len() {
        0 => return Err(Error::Validation("missing reference bus".into())),
        1 => {}
        _ => {
            let ids: Vec<usize> = refs.iter().map(|&i| d.buses[i].id).collect();
            return Err(Error::Validation(format!("duplicated reference bus: {ids:?}")));
        }
    }
    for w in d.buses.windows(2) {
        if w[0].id >= w[1].id {
            return Err(Error::Validation(format!(
                "bus ids must be strictly ascending ({} before {})",
                w[0].id, w[1].id
            )));
        }
    }
    for b in &d.buses {
        if b.v_min > b.v_max {
            return Err(Error::Validation(format!("bus {}: v_min > v_max", b.id)));
        }
    }
    let mut gen_at = vec![0usize; n];
    for (k, g) in d.generators.iter().enumerate() {
        if g.bus >= n {
            return Err(Error::Validation(format!("generator {k} on unknown bus position {}", g.bus)));
        }
        if g.p_min > g.p_max || g.q_min > g.q_max {
            return Err(Error::Validation(format!(
                "generator at bus {}: inverted output bounds",
                d.buses[g.bus].id
            )));
        }
        gen_at[g.bus] += 1;
    }
    for (i, b) in d.buses.iter().enumerate() {
        match (b.kind, gen_at[i]) {
            (BusKind::Load, 0) => {}
            (BusKind::Load, _) => {
                return Err(Error::Validation(format!("load bus {} has a generator", b.id)))
            }
            (_, 1) => {}
            (_, 0) => {
                return Err(Error::Validation(format!("bus {} ({:?}) has no generator", b.id, b.kind)))
            }
            (_, _) => {
                return Err(Error::Validation(format!(
                    "bus {} has several generator records; aggregate them first",
                    b.id
                )))
            }
        }
    }
    for (k, br) in d.branches.iter().enumerate() {
        if br.from >= n || br.to >= n {
            return Err(Error::Validation(format!("branch {k} refers to an unknown bus")));
        }
        if br.from == br.to {
            return Err(Error::Validation(format!("branch {k} is a self loop")));
        }
        if !(br.tap > 0.0) {
            return Err(Error::Validation(format!("branch {k} has non-positive tap {}", br.tap)));
        }
        if let Some(s) = br.s_max {
            if !(s > 0.0) {
                return Err(Error::Validation(format!("branch {k} has non-positive flow limit")));
            }
        }
    }
    // connectivity
    let mut adj = vec![Vec::new(); n];
    for br in &d.branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!("bus {} is islanded", d.buses[i].id)));
    }
    Ok(())
}

fn build_admittance_from(d: &NetworkData) -> Result<Admittance> {
    let n = d.buses.len();
    let mut entries: Vec<BTreeMap<usize, (f64, f64)>> = vec![BTreeMap::new(); n];
    for i in 0..n {
        entries[i].insert(i, (d.buses[i].shunt_g, d.buses[i].shunt_b));
    }
    let mut stamps = Vec::with_capacity(d.branches.len());
    for (k, br) in d.branches.iter().enumerate() {
        let (gs, bs) = br.series_admittance().ok_or(Error::ZeroImpedance {
            branch: k,
            from: d.buses[br.from].id,
            to: d.buses[br.to].id,
        })?;
        let t = br.tap;
        let bc = 0.5 * br.charging_b;
        let st = BranchStamp {
            ff: (gs / (t * t), (bs + bc) / (t * t)),
            ft: (-gs / t, -bs / t),
            tf: (-gs / t, -bs / t),
            tt: (gs, bs + bc),
        };
        let mut add = |i: usize, j: usize, v: (f64, f64)| {
            let e = entries[i].entry(j).or_insert((0.0, 0.0));
            e.0 += v.0;
            e.1 += v.1;
        };
        add(br.from, br.from, st.ff);
        add(br.from, br.to, st.ft);
        add(br.to, br.from, st.tf);
        add(br.to, br.to, st.tt);
        stamps.push(st);
    }
    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::new();
    let mut g = Vec::new();
    let mut b = Vec::new();
    let mut diag = vec![0usize; n];
    for i in 0..n {
        for (&j, &(gij, bij)) in &entries[i] {
            if j == i {
                diag[i] = col_idx.len();
            }
            col_idx.push(j);
            g.push(gij);
            b.push(bij);
        }
        row_ptr[i + 1] = col_idx.len();
    }
    Ok(Admittance {
        row_ptr,
        col_idx,
        g,
        b,
        diag,
        stamps,
    })
}

fn partition_from(d: &NetworkData) -> BusPartition {
    let n = d.buses.len();
    let mut reference = 0;
    let mut gen = Vec::new();
    let mut load = Vec::new();
    for (i, b) in d.buses.iter().enumerate() {
        match b.kind {
            BusKind::Reference => reference = i,
            BusKind::Generator => gen.push(i),
            BusKind::Load => load.push(i),
        }
    }
    let nonref: Vec<usize> = (0..n).filter(|&i| i != reference).collect();
    let gen_ref: Vec<usize> = (0..n).filter(|&i| d.buses[i].kind != BusKind::Load).collect();
    let positions = |list: &[usize]| {
        let mut pos = vec![None; n];
        for (k, &i) in list.iter().enumerate() {
            pos[i] = Some(k);
        }
        pos
    };
    let mut generator_at = vec![None; n];
    for (k, g) in d.generators.iter().enumerate() {
        generator_at[g.bus] = Some(k);
    }
    BusPartition {
        reference,
        gen_pos: positions(&gen),
        load_pos: positions(&load),
        nonref_pos: positions(&nonref),
        gen_ref_pos: positions(&gen_ref),
        gen,
        load,
        nonref,
        gen_ref,
        generator_at,
        n_branches: d.branches.len(),
    }
}

/// Numeric tables of a MATPOWER case, before unit conversion.
#[derive(Debug, Clone, Default)]
pub struct RawCase {
    pub name: String,
    pub base_mva: f64,
    pub bus: Vec<Vec<f64>>,
    pub gen: Vec<Vec<f64>>,
    pub branch: Vec<Vec<f64>>,
    pub gencost: Vec<Vec<f64>>,
}

impl RawCase {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawCase {
            name: "case".into(),
            ..Default::default()
        };
        let mut base_seen = false;
        let mut current: Option<(String, usize)> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut row: Vec<f64> = Vec::new();

        for (lineno, full_line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = full_line.split('%').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if current.is_none() {
                if let Some(rest) = line.strip_prefix("function") {
                    if let Some(name) = rest.split('=').nth(1) {
                        raw.name = name.trim().trim_end_matches(';').to_string();
                    }
                    continue;
                }
                let Some(stmt) = line.strip_prefix("mpc.") else {
                    continue;
                };
                let (field, value) = stmt.split_once('=').ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("expected assignment, found `{line}`"),
                })?;
                let field = field.trim();
                let value = value.trim();
                if field == "baseMVA" {
                    raw.base_mva = value.trim_end_matches(';').trim().parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad baseMVA `{value}`"),
                    })?;
                    base_seen = true;
                } else if let Some(body) = value.strip_prefix('[') {
                    current = Some((field.to_string(), line_no));
                    rows.clear();
                    row.clear();
                    if Self::consume(body, line_no, &mut rows, &mut row)? {
                        raw.store(current.take().unwrap().0, std::mem::take(&mut rows));
                    }
                }
                continue;
            }
            if Self::consume(line, line_no, &mut rows, &mut row)? {
                let (name, _) = current.take().unwrap();
                raw.store(name, std::mem::take(&mut rows));
            }
        }
        if let Some((name, start)) = current {
            return Err(Error::Parse {
                line: start,
                msg: format!("matrix `{name}` is not terminated by `];`"),
            });
        }
        if !base_seen {
            return Err(Error::Parse {
                line: 0,
                msg: "missing mpc.baseMVA".into(),
            });
        }
        for (name, table) in [("bus", &raw.bus), ("gen", &raw.gen)] {
            if table.is_empty() {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("missing or empty mpc.{name}"),
                });
            }
        }
        Ok(raw)
    }

    /// Feeds one line of matrix body; returns true when `]` closes it.
    fn consume(body: &str, line_no: usize, rows: &mut Vec<Vec<f64>>, row: &mut Vec<f64>) -> Result<bool> {
        let (content, closed) = match body.find(']') {
            Some(p) => (&body[..p], true),
            None => (body, false),
        };
        for (k, chunk) in content.split(';').enumerate() {
            if k > 0 && !row.is_empty() {
                rows.push(std::mem::take(row));
            }
            for tok in chunk.split(|c: char| c.is_whitespace() || c == ',') {
                if tok.is_empty() {
                    continue;
                }
                let v = match tok {
                    "Inf" | "inf" => f64::INFINITY,
                    "-Inf" | "-inf" => f64::NEG_INFINITY,
                    _ => tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad number `{tok}`"),
                    })?,
                };
                row.push(v);
            }
        }
        // a newline also ends a row
        if !row.is_empty() {
            rows.push(std::mem::take(row));
        }
        Ok(closed)
    }

    fn store(&mut self, name: String, rows: Vec<Vec<f64>>) {
        match name.as_str() {
            "bus" => self.bus = rows,
            "gen" => self.gen = rows,
            "branch" => self.branch = rows,
            "gencost" => self.gencost = rows,
            _ => {}
        }
    }

    /// Converts to per-unit, drops out-of-service elements, aggregates
    /// generators per bus and validates.
    pub fn into_network(self) -> Result<Network> {
        let base = self.base_mva;
        let need = |table: &str, r: &Vec<f64>, k: usize, n: usize| -> Result<()> {
            if r.len() < n {
                Err(Error::Parse {
                    line: 0,
                    msg: format!("mpc.{table} row {} has {} columns, need {n}", k + 1, r.len()),
                })
            } else {
                Ok(())
            }
        };
        let mut bus_rows: Vec<&Vec<f64>> = Vec::new();
        for (k, r) in self.bus.iter().enumerate() {
            need("bus", r, k, 13)?;
            if r[1] as i64 == 4 {
                return Err(Error::Validation(format!("bus {} is isolated (type 4)", r[0])));
            }
            bus_rows.push(r);
        }
        bus_rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let index: BTreeMap<usize, usize> =
            bus_rows.iter().enumerate().map(|(k, r)| (r[0] as usize, k)).collect();
        if index.len() != bus_rows.len() {
            return Err(Error::Validation("duplicated bus number".into()));
        }
        let lookup = |id: f64| -> Result<usize> {
            index
                .get(&(id as usize))
                .copied()
                .ok_or_else(|| Error::Validation(format!("reference to unknown bus {id}")))
        };

        // generators (in service), with cost rows aligned by position
        let mut units: BTreeMap<usize, Vec<(Generator, f64)>> = BTreeMap::new();
        for (k, r) in self.gen.iter().enumerate() {
            need("gen", r, k, 10)?;
            if r[7] <= 0.0 {
                continue;
            }
            let cost = match self.gencost.get(k) {
                Some(c) => parse_cost(c, k, base)?,
                None if self.gencost.is_empty() => CostPoly::default(),
                None => {
                    return Err(Error::Parse {
                        line: 0,
                        msg: format!("missing gencost row for generator {}", k + 1),
                    })
                }
            };
            let bus = lookup(r[0])?;
            let g = Generator {
                bus,
                p_min: r[9] / base,
                p_max: r[8] / base,
                q_min: r[4] / base,
                q_max: r[3] / base,
                cost,
                v_set: r[5],
                units: 1,
            };
            units.entry(bus).or_default().push((g, r[8]));
        }
        let generators: Vec<Generator> = units.into_values().map(aggregate_units).collect();
        let has_gen: Vec<bool> = {
            let mut v = vec![false; bus_rows.len()];
            for g in &generators {
                v[g.bus] = true;
            }
            v
        };

        let buses = bus_rows
            .iter()
            .enumerate()
            .map(|(k, r)| Bus {
                id: r[0] as usize,
                kind: match (r[1] as i64, has_gen[k]) {
                    (3, _) => BusKind::Reference,
                    (_, true) => BusKind::Generator,
                    _ => BusKind::Load,
                },
                pd: r[2] / base,
                qd: r[3] / base,
                shunt_g: r[4] / base,
                shunt_b: r[5] / base,
                v_max: r[11],
                v_min: r[12],
            })
            .collect();

        let mut branches = Vec::new();
        for (k, r) in self.branch.iter().enumerate() {
            need("branch", r, k, 11)?;
            if r[10] <= 0.0 {
                continue;
            }
            if r[9] != 0.0 {
                return Err(Error::Validation(format!(
                    "branch {} has a phase shift of {} deg; phase shifters are not supported",
                    k + 1,
                    r[9]
                )));
            }
            branches.push(Branch {
                from: lookup(r[0])?,
                to: lookup(r[1])?,
                r: r[2],
                x: r[3],
                charging_b: r[4],
                tap: if r[8] == 0.0 { 1.0 } else { r[8] },
                s_max: if r[5] > 0.0 { Some(r[5] / base) } else { None },
            });
        }
        Network::new(NetworkData {
            name: self.name,
            base_mva: base,
            buses,
            branches,
            generators,
        })
    }
}

fn parse_cost(c: &[f64], k: usize, base: f64) -> Result<CostPoly> {
    let bad = |msg: String| Error::Parse { line: 0, msg };
    if c.len() < 4 {
        return Err(bad(format!("gencost row {} too short", k + 1)));
    }
    if c[0] as i64 != 2 {
        return Err(bad(format!(
            "gencost row {}: only polynomial costs (model 2) are supported",
            k + 1
        )));
    }
    let n = c[3] as usize;
    if n > 3 || c.len() < 4 + n {
        return Err(bad(format!("gencost row {}: polynomial degree > 2 or truncated", k + 1)));
    }
    // coefficients are listed highest order first
    let coeffs = &c[4..4 + n];
    let mut out = [0.0; 3];
    for (p, &v) in coeffs.iter().rev().enumerate() {
        out[p] = v * base.powi(p as i32);
    }
    Ok(CostPoly {
        c0: out[0],
        c1: out[1],
        c2: out[2],
    })
}

/// Merges several units on one bus. Output is shared in proportion to
/// capacity, which makes the merged cost exact for that dispatch rule.
fn aggregate_units(mut units: Vec<(Generator, f64)>) -> Generator {
    if units.len() == 1 {
        return units.pop().unwrap().0;
    }
    let cap: f64 = units.iter().map(|u| u.1.max(0.0)).sum();
    let count = units.len() as f64;
    let weight = |u: &(Generator, f64)| if cap > 0.0 { u.1.max(0.0) / cap } else { 1.0 / count };
    let mut cost = CostPoly::default();
    for u in &units {
        let w = weight(u);
        cost.c0 += u.0.cost.c0;
        cost.c1 += w * u.0.cost.c1;
        cost.c2 += w * w * u.0.cost.c2;
    }
    let first = &units[0].0;
    Generator {
        bus: first.bus,
        p_min: units.iter().map(|u| u.0.p_min).sum(),
        p_max: units.iter().map(|u| u.0.p_max).sum(),
        q_min: units.iter().map(|u| u.0.q_min).sum(),
        q_max: units.iter().map(|u| u.0.q_max).sum(),
        cost,
        v_set: first.v_set,
        units: units.len(),
    }
}
