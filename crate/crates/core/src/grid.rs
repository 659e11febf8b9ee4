//! Radial distribution feeder: bus-injection power flow and the grid cost of
//! EV charging (`S_t² − (S⁰_t)²` at the head of the feeder).

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SWEEP_TOL: f64 = 1e-13;
const SWEEP_MAX_ITER: usize = 200;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 30;
const COLLAPSE_PU: f64 = 0.5;

/// A per-bus load that is either constant or given slot by slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoadSeries {
    Constant(f64),
    PerSlot(Vec<f64>),
}

impl LoadSeries {
    pub fn at(&self, slot: usize) -> f64 {
        match self {
            LoadSeries::Constant(v) => *v,
            LoadSeries::PerSlot(v) => v.get(slot).copied().unwrap_or_else(|| *v.last().unwrap_or(&0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: usize,
    pub p_load_kw: LoadSeries,
    pub q_load_kvar: LoadSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

/// On-disk layout of a grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default)]
    pub name: String,
    pub slack: usize,
    pub base_kv: f64,
    pub base_kva: f64,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
}

/// A validated radial feeder with its hub-to-bus map.
#[derive(Debug, Clone)]
pub struct GridCase {
    file: GridFile,
    index: HashMap<usize, usize>,
    slack: usize,
    /// Series impedance per line, per unit.
    impedance: Vec<Complex64>,
    /// (parent bus, line) for each bus, `None` at the slack.
    parent: Vec<Option<(usize, usize)>>,
    /// Buses in breadth-first order from the slack.
    order: Vec<usize>,
    /// Bus index per hub.
    hub_buses: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Complex bus voltages, per unit, in grid-file bus order.
    pub voltages: Vec<Complex64>,
    /// Complex power delivered by the slack bus, kVA.
    pub head_power: Complex64,
    /// Largest bus-injection mismatch at non-slack buses, per unit.
    pub residual: f64,
    pub iterations: usize,
    pub used_newton: bool,
}

impl PowerFlowSolution {
    /// Apparent power at the head of the feeder, kVA.
    pub fn head_apparent_power(&self) -> f64 {
        self.head_power.norm()
    }
}

impl GridCase {
    pub fn from_file(file: GridFile) -> Result<Self> {
        let n = file.buses.len();
        let mut index = HashMap::new();
        for (i, b) in file.buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(Error::Scenario(format!("duplicate bus {}", b.id)));
            }
        }
        let slack = *index
            .get(&file.slack)
            .ok_or_else(|| Error::Scenario(format!("slack bus {} not listed", file.slack)))?;
        if n == 0 || file.lines.len() + 1 != n {
            return Err(Error::Scenario(format!(
                "radial feeder needs exactly {} lines, found {}",
                n.saturating_sub(1),
                file.lines.len()
            )));
        }
        if !(file.base_kv > 0.0) || !(file.base_kva > 0.0) {
            return Err(Error::Scenario("base voltage and power must be positive".into()));
        }
        let z_base = file.base_kv * file.base_kv * 1000.0 / file.base_kva;
        let mut adjacency = vec![Vec::new(); n];
        let mut impedance = Vec::with_capacity(file.lines.len());
        for (l, line) in file.lines.iter().enumerate() {
            let (Some(&a), Some(&b)) = (index.get(&line.from), index.get(&line.to)) else {
                return Err(Error::Scenario(format!("line {}-{} uses an unknown bus", line.from, line.to)));
            };
            if !(line.r_ohm > 0.0) || !(line.x_ohm >= 0.0) {
                return Err(Error::Scenario(format!(
                    "line {}-{} needs positive resistance",
                    line.from, line.to
                )));
            }
            adjacency[a].push((b, l));
            adjacency[b].push((a, l));
            impedance.push(Complex64::new(line.r_ohm, line.x_ohm) / z_base);
        }
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, l) in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, l));
                    queue.push_back(v);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Scenario("grid is not connected".into()));
        }
        Ok(Self { file, index, slack, impedance, parent, order, hub_buses: Vec::new() })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    /// Attaches hubs to buses (bus ids as in the grid file, one per hub).
    pub fn with_hub_buses(mut self, bus_ids: &[usize]) -> Result<Self> {
        self.hub_buses = bus_ids
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Scenario(format!("hub mapped to unknown bus {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn file(&self) -> &GridFile {
        &self.file
    }

    pub fn bus_count(&self) -> usize {
        self.file.buses.len()
    }

    pub fn line_count(&self) -> usize {
        self.file.lines.len()
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn hub_buses(&self) -> &[usize] {
        &self.hub_buses
    }

    pub fn base_kva(&self) -> f64 {
        self.file.base_kva
    }

    /// Base-case injections (negative: loads) in kVA for one slot.
    pub fn base_injections(&self, slot: usize) -> Vec<Complex64> {
        self.file
            .buses
            .iter()
            .map(|b| -Complex64::new(b.p_load_kw.at(slot), b.q_load_kvar.at(slot)))
            .collect()
    }

    /// Bus admittance matrix, per unit (dense; feeders here are small).
    pub fn admittance(&self) -> DMatrix<Complex64> {
        let n = self.bus_count();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for (l, line) in self.file.lines.iter().enumerate() {
            let a = self.index[&line.from];
            let b = self.index[&line.to];
            let yl = 1.0 / self.impedance[l];
            y[(a, a)] += yl;
            y[(b, b)] += yl;
            y[(a, b)] -= yl;
            y[(b, a)] -= yl;
        }
        y
    }

    /// Solves the power flow for complex bus injections in kVA (generation
    /// positive, loads negative). The slack entry is ignored.
    ///
    /// Backward-forward sweep; switches to Newton-Raphson if the sweep stalls.
    pub fn solve_power_flow(&self, injections: &[Complex64]) -> Result<PowerFlowSolution> {
        self.check_injections(injections)?;
        let s_pu: Vec<Complex64> = injections.iter().map(|s| s / self.file.base_kva).collect();
        match self.sweep(&s_pu) {
            Ok((v, iterations)) => self.finish(v, &s_pu, iterations, false),
            Err(SweepFailure::Stalled(v)) => {
                let (v, it) = self.newton(&s_pu, v)?;
                self.finish(v, &s_pu, it, true)
            }
            Err(SweepFailure::Collapse(bus, magnitude)) => Err(Error::VoltageCollapse { bus, magnitude }),
        }
    }

    /// Newton-Raphson from a flat start, without the sweep. Cross-check route.
    pub fn solve_power_flow_newton(&self, injections: &[Complex64]) -> Result<PowerFlowSolution> {
        self.check_injections(injections)?;
        let s_pu: Vec<Complex64> = injections.iter().map(|s| s / self.file.base_kva).collect();
        let flat = vec![Complex64::new(1.0, 0.0); self.bus_count()];
        let (v, it) = self.newton(&s_pu, flat)?;
        self.finish(v, &s_pu, it, true)
    }

    fn check_injections(&self, injections: &[Complex64]) -> Result<()> {
        if injections.len() != self.bus_count() {
            return Err(Error::Contract(format!(
                "expected {} bus injections, got {}",
                self.bus_count(),
                injections.len()
            )));
        }
        if injections.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::Domain("non-finite bus injection".into()));
        }
        Ok(())
    }

    fn sweep(&self, s_pu: &[Complex64]) -> std::result::Result<(Vec<Complex64>, usize), SweepFailure> {
        let n = self.bus_count();
        let mut v = vec![Complex64::new(1.0, 0.0); n];
        let mut current = vec![Complex64::new(0.0, 0.0); n];
        for it in 1..=SWEEP_MAX_ITER {
            // backward: branch current into each bus subtree
            for &k in &self.order {
                current[k] = -(s_pu[k] / v[k]).conj();
            }
            current[self.slack] = Complex64::new(0.0, 0.0);
            for &k in self.order.iter().rev() {
                if let Some((p, _)) = self.parent[k] {
                    let ck = current[k];
                    current[p] += ck;
                }
            }
            // forward
            let mut change: f64 = 0.0;
            for &k in &self.order {
                if let Some((p, l)) = self.parent[k] {
                    let nv = v[p] - self.impedance[l] * current[k];
                    change = change.max((nv - v[k]).norm());
                    v[k] = nv;
                    if !(v[k].norm() >= COLLAPSE_PU) {
                        return Err(SweepFailure::Collapse(self.file.buses[k].id, v[k].norm()));
                    }
                }
            }
            if change < SWEEP_TOL {
                return Ok((v, it));
            }
        }
        Err(SweepFailure::Stalled(v))
    }

    fn mismatch(&self, y: &DMatrix<Complex64>, v: &[Complex64], s_pu: &[Complex64]) -> Vec<Complex64> {
        let vv = DVector::from_column_slice(v);
        let i = y * &vv;
        (0..v.len()).map(|k| s_pu[k] - v[k] * i[k].conj()).collect()
    }

    fn newton(&self, s_pu: &[Complex64], mut v: Vec<Complex64>) -> Result<(Vec<Complex64>, usize)> {
        let n = self.bus_count();
        let y = self.admittance();
        let pq: Vec<usize> = (0..n).filter(|&k| k != self.slack).collect();
        let m = pq.len();
        let mut trace = Vec::new();
        for it in 1..=NEWTON_MAX_ITER {
            let mis = self.mismatch(&y, &v, s_pu);
            let worst = pq.iter().map(|&k| mis[k].norm()).fold(0.0, f64::max);
            trace.push(worst);
            if worst < NEWTON_TOL {
                return Ok((v, it));
            }
            // dS/dθ and dS/d|V| in complex form
            let vv = DVector::from_column_slice(&v);
            let ibus = &y * &vv;
            let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
            for (r, &k) in pq.iter().enumerate() {
                for (c, &j) in pq.iter().enumerate() {
                    let vn = v[j] / v[j].norm();
                    let mut d_ang = Complex64::new(0.0, 1.0) * v[k] * (-(y[(k, j)] * v[j])).conj();
                    let mut d_mag = v[k] * (y[(k, j)] * vn).conj();
                    if k == j {
                        d_ang += Complex64::new(0.0, 1.0) * v[k] * ibus[k].conj();
                        d_mag += ibus[k].conj() * vn;
                    }
                    jac[(r, c)] = d_ang.re;
                    jac[(r, m + c)] = d_mag.re;
                    jac[(m + r, c)] = d_ang.im;
                    jac[(m + r, m + c)] = d_mag.im;
                }
            }
            // calculated minus specified
            let f = DVector::from_iterator(
                2 * m,
                pq.iter().map(|&k| -mis[k].re).chain(pq.iter().map(|&k| -mis[k].im)),
            );
            let Some(dx) = jac.lu().solve(&f) else {
                break;
            };
            for (r, &k) in pq.iter().enumerate() {
                let ang = v[k].arg() - dx[r];
                let mag = v[k].norm() - dx[m + r];
                v[k] = Complex64::from_polar(mag, ang);
            }
            if let Some(k) = pq.iter().find(|&&k| !(v[k].norm() >= COLLAPSE_PU)) {
                return Err(Error::VoltageCollapse { bus: self.file.buses[*k].id, magnitude: v[*k].norm() });
            }
        }
        Err(Error::PowerFlowNotConverged {
            iterations: trace.len(),
            last: trace.last().copied().unwrap_or(f64::NAN),
            trace,
        })
    }

    fn finish(
        &self,
        v: Vec<Complex64>,
        s_pu: &[Complex64],
        iterations: usize,
        used_newton: bool,
    ) -> Result<PowerFlowSolution> {
        let y = self.admittance();
        let mis = self.mismatch(&y, &v, s_pu);
        let residual =
            (0..v.len()).filter(|&k| k != self.slack).map(|k| mis[k].norm()).fold(0.0, f64::max);
        let i_slack: Complex64 = (0..v.len()).map(|m| y[(self.slack, m)] * v[m]).sum();
        let head_power = v[self.slack] * i_slack.conj() * self.file.base_kva;
        Ok(PowerFlowSolution { voltages: v, head_power, residual, iterations, used_newton })
    }

    /// Head apparent power (kVA) in `slot` with extra real loads (kW, unity
    /// power factor) at the hubs' buses on top of the base loads.
    pub fn head_power(&self, slot: usize, hub_loads_kw: &[f64]) -> Result<f64> {
        if hub_loads_kw.len() != self.hub_buses.len() {
            return Err(Error::Contract(format!(
                "expected {} hub loads, got {}",
                self.hub_buses.len(),
                hub_loads_kw.len()
            )));
        }
        let mut s = self.base_injections(slot);
        for (&bus, &kw) in self.hub_buses.iter().zip(hub_loads_kw) {
            if !(kw >= 0.0) {
                return Err(Error::Domain(format!("negative hub load {kw}")));
            }
            s[bus] -= Complex64::new(kw, 0.0);
        }
        Ok(self.solve_power_flow(&s)?.head_apparent_power())
    }

    /// ENO grid cost of charging in one slot, kVA²: the squared head power with
    /// hub totals (nonflexible + charging) minus the same without charging.
    /// Slot energies are read as average powers (one time unit per slot).
    pub fn grid_cost(&self, slot: usize, hub_nonflex_kw: &[f64], hub_charging_kw: &[f64]) -> Result<f64> {
        if hub_charging_kw.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("charging loads must be nonnegative".into()));
        }
        let with: Vec<f64> = hub_nonflex_kw.iter().zip(hub_charging_kw).map(|(a, b)| a + b).collect();
        let s = self.head_power(slot, &with)?;
        let s0 = self.head_power(slot, hub_nonflex_kw)?;
        Ok(s * s - s0 * s0)
    }
}

enum SweepFailure {
    Stalled(Vec<Complex64>),
    Collapse(usize, f64),
}

const IEEE33: &str = include_str!("../data/ieee33.json");

/// Buses hosting the four hubs by default: lateral ends 18, 22, 25 and 33.
pub const IEEE33_DEFAULT_HUB_BUSES: [usize; 4] = [18, 22, 25, 33];

/// The bundled 33-bus, 12.66 kV feeder with its standard line and load data.
pub fn load_ieee33() -> Result<GridCase> {
    GridCase::from_json(IEEE33)?.with_hub_buses(&IEEE33_DEFAULT_HUB_BUSES)
}
