//! Network case model: buses, branches, generators, per-unit conversion,
//! admittance matrix assembly, and case-file I/O.
//!
//! Cases are stored as JSON with quantities in physical units (MW, MVAr,
//! per-unit impedances on `base_mva`). [`PreparedGrid`] converts a validated
//! case into the per-unit, index-based form the solver and the training
//! pipeline consume.
//!
//! By default cases are imported in *simplified* form: off-nominal
//! transformer taps are discarded and line-charging susceptance dropped,
//! so that every branch is a pure series admittance. This keeps the
//! branch-flow equations used for training labels and physics penalties
//! exactly consistent with the admittance matrix the solver sees. Bus
//! shunts are retained.

use std::collections::HashMap;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::CaseError;

/// Default system base power, MVA.
pub const DEFAULT_BASE_MVA: f64 = 100.0;

/// Bus classification for power flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    /// Reference bus: fixed voltage magnitude and angle.
    Slack,
    /// Generator bus: fixed active injection and voltage magnitude.
    Pv,
    /// Load bus: fixed active and reactive injection.
    Pq,
}

fn default_vset() -> f64 {
    1.0
}

/// One bus of a network case. Loads are consumption-positive, in physical
/// units; shunts are per-unit admittances on the system base.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    #[serde(default)]
    pub p_load_mw: f64,
    #[serde(default)]
    pub q_load_mvar: f64,
    /// Voltage setpoint (p.u.); honored for slack and PV buses.
    #[serde(default = "default_vset")]
    pub v_setpoint: f64,
    #[serde(default)]
    pub shunt_g: f64,
    #[serde(default)]
    pub shunt_b: f64,
}

/// One branch (line or transformer). `tap = 0` means no off-nominal tap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_charge: f64,
    #[serde(default)]
    pub tap: f64,
}

/// A generator modeled as a fixed injection (negative load). PV-bus
/// generators additionally hold their bus voltage at its setpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gen {
    pub bus: u32,
    #[serde(default)]
    pub p_mw: f64,
    #[serde(default)]
    pub q_mvar: f64,
}

/// A complete network case as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCase {
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub gens: Vec<Gen>,
}

/// Import-time options. `simplified` is the default mode everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ImportOptions {
    /// Discard off-nominal taps and line charging at import.
    pub simplified: bool,
}

impl Default for ImportOptions {
    fn default() -> Self {
        Self { simplified: true }
    }
}

impl NetworkCase {
    /// Parse a case from a JSON string and validate it.
    pub fn from_json(text: &str, options: ImportOptions) -> Result<Self, CaseError> {
        let mut case: NetworkCase = serde_json::from_str(text)?;
        if options.simplified {
            case.simplify();
        }
        case.validate()?;
        Ok(case)
    }

    /// Load a case from a JSON file and validate it.
    pub fn load(path: &Path, options: ImportOptions) -> Result<Self, CaseError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, options)
    }

    /// Force every branch to a pure series admittance: taps to nominal,
    /// line-charging susceptance to zero. Returns true if anything changed.
    pub fn simplify(&mut self) -> bool {
        let mut changed = false;
        for br in &mut self.branches {
            if br.tap != 0.0 && br.tap != 1.0 {
                br.tap = 0.0;
                changed = true;
            }
            if br.b_charge != 0.0 {
                br.b_charge = 0.0;
                changed = true;
            }
        }
        if changed {
            log::warn!(
                "case '{}': simplified import active — off-nominal taps set to nominal, \
                 line charging dropped",
                self.name
            );
        }
        changed
    }

    /// Structural validation: ids unique, references resolvable, exactly
    /// one slack, nonzero impedances, positive base.
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.buses.is_empty() {
            return Err(CaseError::Empty);
        }
        if !(self.base_mva > 0.0) {
            return Err(CaseError::BadBaseMva(self.base_mva));
        }
        let mut seen = HashMap::new();
        for bus in &self.buses {
            if seen.insert(bus.id, ()).is_some() {
                return Err(CaseError::DuplicateBus(bus.id));
            }
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack_count != 1 {
            return Err(CaseError::SlackCount(slack_count));
        }
        for br in &self.branches {
            for id in [br.from, br.to] {
                if !seen.contains_key(&id) {
                    return Err(CaseError::UnknownBus(id));
                }
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(CaseError::ZeroImpedance {
                    from: br.from,
                    to: br.to,
                });
            }
        }
        for gen in &self.gens {
            if !seen.contains_key(&gen.bus) {
                return Err(CaseError::UnknownGenBus(gen.bus));
            }
        }
        Ok(())
    }

    /// Serialize back to pretty JSON (canonical field order).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization cannot fail")
    }
}

/// Sparse admittance matrix: per-row sorted `(column, value)` entries.
#[derive(Debug, Clone)]
pub struct YBus {
    pub n: usize,
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl YBus {
    fn new(n: usize) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, i: usize, j: usize, y: Complex64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1 += y,
            Err(pos) => row.insert(pos, (j, y)),
        }
    }

    /// Sorted nonzero entries of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    /// Diagonal entry of row `i` (zero if structurally absent).
    pub fn diag(&self, i: usize) -> Complex64 {
        self.rows[i]
            .binary_search_by_key(&i, |&(c, _)| c)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or_default()
    }

    /// Complex bus current-injection products `I = Y · V` for one voltage
    /// vector (used by mismatch evaluation and balance checks).
    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, y)| y * v[j]).sum())
            .collect()
    }
}

/// One branch reduced to its series admittance `g + jb`, with endpoint
/// indices into the prepared bus ordering. This is the only branch model
/// the flow equations and their sensitivities use.
#[derive(Debug, Clone, Copy)]
pub struct SeriesBranch {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
}

/// A validated case converted to per-unit, index-based form.
#[derive(Debug, Clone)]
pub struct PreparedGrid {
    pub name: String,
    pub base_mva: f64,
    pub n_bus: usize,
    /// Index of the slack bus.
    pub slack: usize,
    /// Bus classification by index.
    pub kinds: Vec<BusKind>,
    /// External bus id by index.
    pub ids: Vec<u32>,
    /// Admittance matrix including bus shunts (and tap/charging models if
    /// the case was imported without simplification).
    pub ybus: YBus,
    /// Series-admittance view of every branch, in case order.
    pub branches: Vec<SeriesBranch>,
    /// Net specified active injection per bus, p.u. (generation minus load).
    pub base_p_inj: Vec<f64>,
    /// Net specified reactive injection per bus, p.u. For PV buses this is
    /// the load-side component only; generator reactive output is a solver
    /// result there.
    pub base_q_inj: Vec<f64>,
    /// Voltage setpoints, p.u. (honored at slack and PV buses).
    pub v_setpoint: Vec<f64>,
    id_to_index: HashMap<u32, usize>,
}

impl PreparedGrid {
    pub fn new(case: &NetworkCase) -> Result<Self, CaseError> {
        case.validate()?;
        let n = case.buses.len();
        let id_to_index: HashMap<u32, usize> = case
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();

        let mut ybus = YBus::new(n);
        let mut branches = Vec::with_capacity(case.branches.len());
        for br in &case.branches {
            let i = id_to_index[&br.from];
            let j = id_to_index[&br.to];
            let ys = Complex64::new(br.r, br.x).inv();
            let tap = if br.tap == 0.0 { 1.0 } else { br.tap };
            let shunt = Complex64::new(0.0, br.b_charge / 2.0);
            ybus.add(i, i, (ys + shunt) / (tap * tap));
            ybus.add(i, j, -ys / tap);
            ybus.add(j, i, -ys / tap);
            ybus.add(j, j, ys + shunt);
            branches.push(SeriesBranch {
                from: i,
                to: j,
                g: ys.re,
                b: ys.im,
            });
        }
        let mut kinds = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut v_setpoint = Vec::with_capacity(n);
        let mut base_p_inj = vec![0.0; n];
        let mut base_q_inj = vec![0.0; n];
        let mut slack = 0;
        for (i, bus) in case.buses.iter().enumerate() {
            kinds.push(bus.kind);
            ids.push(bus.id);
            v_setpoint.push(bus.v_setpoint);
            base_p_inj[i] -= bus.p_load_mw / case.base_mva;
            base_q_inj[i] -= bus.q_load_mvar / case.base_mva;
            if bus.kind == BusKind::Slack {
                slack = i;
            }
            if bus.shunt_g != 0.0 || bus.shunt_b != 0.0 {
                ybus.add(i, i, Complex64::new(bus.shunt_g, bus.shunt_b));
            }
        }
        for gen in &case.gens {
            let i = id_to_index[&gen.bus];
            base_p_inj[i] += gen.p_mw / case.base_mva;
            // PV-bus generators regulate voltage; their reactive output is a
            // power-flow result, not a specified injection.
            if kinds[i] != BusKind::Pv {
                base_q_inj[i] += gen.q_mvar / case.base_mva;
            }
        }
        Ok(Self {
            name: case.name.clone(),
            base_mva: case.base_mva,
            n_bus: n,
            slack,
            kinds,
            ids,
            ybus,
            branches,
            base_p_inj,
            base_q_inj,
            v_setpoint,
            id_to_index,
        })
    }

    /// Internal index of an external bus id.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.id_to_index.get(&id).copied()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }
}
