//! Lower level: the multiclass Wardrop equilibrium of drivers choosing a
//! route, a hub and where to charge, computed by minimising the Beckmann
//! potential over the fixed path set.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::charging::HubChargingCase;
use crate::error::{Error, Result};
use crate::transport::{enumerate_paths, ChargeDecision, PathSet, TransportScenario};

/// How charging is priced at CSO hubs while drivers settle.
#[derive(Debug, Clone, PartialEq)]
pub enum HubPricing {
    /// Marginal price of the water-filling proxy, scaled by `alpha`.
    Lmp { alpha: f64 },
    /// A constant price per hub (indexed like the scenario's hubs; entries for
    /// city hubs are ignored).
    Fixed(Vec<f64>),
}

impl HubPricing {
    pub fn lmp(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("price scale alpha must be nonnegative, got {alpha}")));
        }
        Ok(HubPricing::Lmp { alpha })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WardropMethod {
    /// Pairwise flow shifts onto the cheapest path of each class/OD block with
    /// an exact line search. Drives the gap to round-off.
    #[default]
    GradientProjection,
    /// Conditional gradient with exact line search. Slow tail; kept as a
    /// reference method.
    FrankWolfe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WardropOptions {
    /// Absolute gap tolerance in €; `None` means 1e-6 × mean free-flow path cost.
    pub tol: Option<f64>,
    pub max_sweeps: usize,
    pub method: WardropMethod,
}

impl Default for WardropOptions {
    fn default() -> Self {
        Self { tol: None, max_sweeps: 20_000, method: WardropMethod::default() }
    }
}

/// Path flows (vehicles) with the arc flows and hub needs (kWh) they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAssignment {
    path_flows: Vec<f64>,
    arc_flows: Vec<f64>,
    needs: Vec<f64>,
}

impl FlowAssignment {
    pub fn path_flows(&self) -> &[f64] {
        &self.path_flows
    }

    pub fn arc_flows(&self) -> &[f64] {
        &self.arc_flows
    }

    /// Aggregated charging need per hub, kWh.
    pub fn needs(&self) -> &[f64] {
        &self.needs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub flows: FlowAssignment,
    pub beckmann: f64,
    pub gap: f64,
    pub tol: f64,
    pub iterations: usize,
    /// Potential after every sweep.
    pub beckmann_trace: Vec<f64>,
}

impl EquilibriumResult {
    pub fn needs(&self) -> &[f64] {
        self.flows.needs()
    }
}

/// Transport scenario, its enumerated paths and the per-hub charging cases,
/// precomputed once and shared by every equilibrium solve.
#[derive(Debug, Clone)]
pub struct EquilibriumProblem {
    scenario: TransportScenario,
    paths: PathSet,
    cases: Vec<HubChargingCase>,
    /// Energy per vehicle on each path (kWh or litres).
    energy: Vec<f64>,
    /// Constant unit price per path, `None` for charging at a CSO hub.
    fixed_price: Vec<Option<f64>>,
    fare: Vec<f64>,
}

impl EquilibriumProblem {
    pub fn new(scenario: TransportScenario, k: usize) -> Result<Self> {
        let paths = enumerate_paths(&scenario, k)?;
        Self::with_paths(scenario, paths)
    }

    pub fn with_paths(scenario: TransportScenario, paths: PathSet) -> Result<Self> {
        let cases = scenario
            .hubs()
            .iter()
            .map(|h| HubChargingCase::new(&h.nonflex_kwh))
            .collect::<Result<Vec<_>>>()?;
        let mut energy = Vec::with_capacity(paths.len());
        let mut fixed_price = Vec::with_capacity(paths.len());
        let mut fare = Vec::with_capacity(paths.len());
        for p in &paths.paths {
            let class = &scenario.classes()[p.class];
            energy.push(scenario.energy_need(class, p)?);
            fixed_price.push(scenario.fixed_unit_price(class, p));
            fare.push(scenario.hubs()[p.hub].pt_fare_eur);
        }
        Ok(Self { scenario, paths, cases, energy, fixed_price, fare })
    }

    pub fn scenario(&self) -> &TransportScenario {
        &self.scenario
    }

    pub fn paths(&self) -> &PathSet {
        &self.paths
    }

    pub fn cases(&self) -> &[HubChargingCase] {
        &self.cases
    }

    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    pub fn has_cso_hub(&self) -> bool {
        self.scenario.hubs().iter().any(|h| h.is_cso())
    }

    fn charges_at_hub(&self, p: usize) -> bool {
        self.paths.paths[p].decision == ChargeDecision::AtHub
    }

    /// Builds an assignment from path flows, checking the demand constraints.
    pub fn assignment(&self, path_flows: Vec<f64>) -> Result<FlowAssignment> {
        if path_flows.len() != self.paths.len() {
            return Err(Error::Contract(format!(
                "expected {} path flows, got {}",
                self.paths.len(),
                path_flows.len()
            )));
        }
        if let Some(x) = path_flows.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::Contract(format!("path flow {x} is not a nonnegative number")));
        }
        for g in &self.paths.groups {
            let total: f64 = g.paths.iter().map(|&p| path_flows[p]).sum();
            if (total - g.demand).abs() > 1e-9 * g.demand.max(1.0) {
                return Err(Error::Contract(format!(
                    "class {} OD {} carries {total} vehicles, demand is {}",
                    self.scenario.classes()[g.class].tag.label(),
                    g.od,
                    g.demand
                )));
            }
        }
        Ok(self.assemble(path_flows))
    }

    fn assemble(&self, path_flows: Vec<f64>) -> FlowAssignment {
        let arc_flows = self.arc_flows_of(&path_flows);
        let needs = self.needs_of(&path_flows);
        FlowAssignment { path_flows, arc_flows, needs }
    }

    fn arc_flows_of(&self, path_flows: &[f64]) -> Vec<f64> {
        let mut arc = vec![0.0; self.scenario.arcs().len()];
        for (p, &x) in path_flows.iter().enumerate() {
            if x != 0.0 {
                for &a in &self.paths.routes[self.paths.paths[p].route].arcs {
                    arc[a] += x;
                }
            }
        }
        arc
    }

    fn needs_of(&self, path_flows: &[f64]) -> Vec<f64> {
        let mut needs = vec![0.0; self.scenario.hubs().len()];
        for (p, &x) in path_flows.iter().enumerate() {
            if self.charges_at_hub(p) {
                needs[self.paths.paths[p].hub] += x * self.energy[p];
            }
        }
        needs
    }

    fn hub_price(&self, hub: usize, need: f64, pricing: &HubPricing) -> f64 {
        match pricing {
            HubPricing::Lmp { alpha } => self.cases[hub].price_unchecked(need.max(0.0), *alpha),
            HubPricing::Fixed(prices) => prices[hub],
        }
    }

    fn hub_price_slope(&self, hub: usize, need: f64, pricing: &HubPricing) -> f64 {
        match pricing {
            HubPricing::Lmp { alpha } => self.cases[hub].price_slope(need.max(0.0), *alpha),
            HubPricing::Fixed(_) => 0.0,
        }
    }

    fn unit_price(&self, p: usize, needs: &[f64], pricing: &HubPricing) -> f64 {
        match self.fixed_price[p] {
            Some(v) => v,
            None => {
                let h = self.paths.paths[p].hub;
                self.hub_price(h, needs[h], pricing)
            }
        }
    }

    fn route_costs(&self, arc_flows: &[f64]) -> Vec<f64> {
        let arcs = self.scenario.arcs();
        let arc_cost: Vec<f64> =
            arcs.iter().zip(arc_flows).map(|(a, &x)| self.scenario.bpr_unchecked(a, x.max(0.0))).collect();
        self.paths.routes.iter().map(|r| r.arcs.iter().map(|&a| arc_cost[a]).sum()).collect()
    }

    fn path_costs(&self, arc_flows: &[f64], needs: &[f64], pricing: &HubPricing) -> Vec<f64> {
        let route = self.route_costs(arc_flows);
        (0..self.paths.len())
            .map(|p| {
                route[self.paths.paths[p].route] + self.fare[p] + self.energy[p] * self.unit_price(p, needs, pricing)
            })
            .collect()
    }

    /// Per-path costs at an assignment (€ per vehicle).
    pub fn costs(&self, x: &FlowAssignment, pricing: &HubPricing) -> Vec<f64> {
        self.path_costs(&x.arc_flows, &x.needs, pricing)
    }

    /// Default gap tolerance: 1e-6 × the mean path cost at free flow and zero
    /// hub load.
    pub fn default_tolerance(&self, pricing: &HubPricing) -> f64 {
        let zero_arcs = vec![0.0; self.scenario.arcs().len()];
        let zero_needs = vec![0.0; self.scenario.hubs().len()];
        let c = self.path_costs(&zero_arcs, &zero_needs, pricing);
        1e-6 * c.iter().sum::<f64>() / c.len().max(1) as f64
    }

    /// Beckmann potential: arc cost integrals, fares and fixed-price energy,
    /// and either `α·ΣG*_i(L_i)` over CSO hubs or their fixed-price energy.
    pub fn beckmann_value(&self, x: &FlowAssignment, pricing: &HubPricing) -> Result<f64> {
        let checked = self.assignment(x.path_flows.clone())?;
        Ok(self.potential(&checked, pricing))
    }

    fn potential(&self, x: &FlowAssignment, pricing: &HubPricing) -> f64 {
        let arcs = self.scenario.arcs();
        let mut value: f64 = arcs.iter().zip(&x.arc_flows).map(|(a, &f)| self.scenario.bpr_integral(a, f.max(0.0))).sum();
        for (p, &f) in x.path_flows.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            value += f * self.fare[p];
            match (self.fixed_price[p], pricing) {
                (Some(price), _) => value += f * self.energy[p] * price,
                (None, HubPricing::Fixed(prices)) => value += f * self.energy[p] * prices[self.paths.paths[p].hub],
                (None, HubPricing::Lmp { .. }) => {}
            }
        }
        if let HubPricing::Lmp { alpha } = pricing {
            if *alpha > 0.0 {
                for (h, hub) in self.scenario.hubs().iter().enumerate() {
                    if hub.is_cso() {
                        value += alpha * self.cases[h].value_unchecked(x.needs[h].max(0.0));
                    }
                }
            }
        }
        value
    }

    /// All-or-nothing loading on the cheapest path of each block at free flow
    /// (ties to the lowest path id).
    pub fn free_flow_start(&self, pricing: &HubPricing) -> FlowAssignment {
        let zero_arcs = vec![0.0; self.scenario.arcs().len()];
        let zero_needs = vec![0.0; self.scenario.hubs().len()];
        let c = self.path_costs(&zero_arcs, &zero_needs, pricing);
        let mut flows = vec![0.0; self.paths.len()];
        for g in &self.paths.groups {
            if let Some(&best) = g.paths.iter().min_by(|&&a, &&b| c[a].total_cmp(&c[b]).then(a.cmp(&b))) {
                flows[best] = g.demand;
            }
        }
        self.assemble(flows)
    }

    /// A random feasible start: each block's demand split by a symmetric
    /// Dirichlet(1) draw.
    pub fn random_start(&self, seed: u64) -> FlowAssignment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flows = vec![0.0; self.paths.len()];
        for g in &self.paths.groups {
            let draws: Vec<f64> = g.paths.iter().map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            for (&p, w) in g.paths.iter().zip(&draws) {
                flows[p] = g.demand * w / total;
            }
        }
        self.assemble(flows)
    }

    /// Largest excess of a used path's cost over the cheapest path of its
    /// class and OD pair.
    fn internal_gap(&self, x: &FlowAssignment, pricing: &HubPricing) -> f64 {
        let c = self.costs(x, pricing);
        let mut gap: f64 = 0.0;
        for g in &self.paths.groups {
            let best = g.paths.iter().map(|&p| c[p]).fold(f64::INFINITY, f64::min);
            for &p in &g.paths {
                if x.path_flows[p] > 0.0 {
                    gap = gap.max(c[p] - best);
                }
            }
        }
        gap
    }

    /// Shifts flow from path `r` to path `b` (same block) until their costs
    /// equalise or `r` is empty. Returns the amount moved.
    fn shift(&self, flows: &mut [f64], arc_flows: &mut [f64], needs: &mut [f64], r: usize, b: usize, pricing: &HubPricing) -> f64 {
        let pr = &self.paths.paths[r];
        let pb = &self.paths.paths[b];
        let ra = &self.paths.routes[pr.route].arcs;
        let ba = &self.paths.routes[pb.route].arcs;
        let r_only: Vec<usize> = ra.iter().copied().filter(|a| !ba.contains(a)).collect();
        let b_only: Vec<usize> = ba.iter().copied().filter(|a| !ra.contains(a)).collect();
        let arcs = self.scenario.arcs();
        let r_var = self.fixed_price[r].is_none();
        let b_var = self.fixed_price[b].is_none();
        let (er, eb) = (self.energy[r], self.energy[b]);
        let dr = if self.charges_at_hub(r) { er } else { 0.0 };
        let db = if self.charges_at_hub(b) { eb } else { 0.0 };
        // hub need after moving s vehicles
        let need_at = |h: usize, s: f64| {
            let mut v = needs[h];
            if self.charges_at_hub(r) && pr.hub == h {
                v -= s * dr;
            }
            if self.charges_at_hub(b) && pb.hub == h {
                v += s * db;
            }
            v.max(0.0)
        };
        let d_need = |h: usize| {
            let mut v = 0.0;
            if self.charges_at_hub(r) && pr.hub == h {
                v -= dr;
            }
            if self.charges_at_hub(b) && pb.hub == h {
                v += db;
            }
            v
        };
        // g(s) = c_r(s) − c_b(s), nonincreasing in s
        let eval = |s: f64| -> (f64, f64) {
            let mut g = self.fare[r] - self.fare[b];
            let mut dg = 0.0;
            for &a in &r_only {
                let f = (arc_flows[a] - s).max(0.0);
                g += self.scenario.bpr_unchecked(&arcs[a], f);
                dg -= self.scenario.bpr_slope(&arcs[a], f);
            }
            for &a in &b_only {
                let f = arc_flows[a] + s;
                g -= self.scenario.bpr_unchecked(&arcs[a], f);
                dg -= self.scenario.bpr_slope(&arcs[a], f);
            }
            if r_var {
                let n = need_at(pr.hub, s);
                g += er * self.hub_price(pr.hub, n, pricing);
                dg += er * self.hub_price_slope(pr.hub, n, pricing) * d_need(pr.hub);
            } else {
                g += er * self.fixed_price[r].unwrap_or(0.0);
            }
            if b_var {
                let n = need_at(pb.hub, s);
                g -= eb * self.hub_price(pb.hub, n, pricing);
                dg -= eb * self.hub_price_slope(pb.hub, n, pricing) * d_need(pb.hub);
            } else {
                g -= eb * self.fixed_price[b].unwrap_or(0.0);
            }
            (g, dg)
        };
        let cap = flows[r];
        let (g0, _) = eval(0.0);
        if !(g0 > 0.0) || cap <= 0.0 {
            return 0.0;
        }
        let (g_hi, _) = eval(cap);
        let s = if g_hi >= 0.0 {
            cap
        } else {
            let (mut lo, mut hi) = (0.0, cap);
            let mut s = 0.0;
            let (mut g, mut dg) = (g0, eval(0.0).1);
            for _ in 0..200 {
                let newton = if dg < 0.0 { s - g / dg } else { f64::NAN };
                s = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
                (g, dg) = eval(s);
                if g > 0.0 {
                    lo = s;
                } else if g < 0.0 {
                    hi = s;
                } else {
                    break;
                }
                if hi - lo <= 1e-15 * cap.max(1.0) || g.abs() <= 1e-15 {
                    break;
                }
            }
            s
        };
        // apply
        for &a in &r_only {
            arc_flows[a] = (arc_flows[a] - s).max(0.0);
        }
        for &a in &b_only {
            arc_flows[a] += s;
        }
        if self.charges_at_hub(r) {
            needs[pr.hub] = (needs[pr.hub] - s * dr).max(0.0);
        }
        if self.charges_at_hub(b) {
            needs[pb.hub] += s * db;
        }
        if s >= cap {
            flows[b] += cap;
            flows[r] = 0.0;
        } else {
            flows[r] -= s;
            flows[b] += s;
        }
        s
    }

    fn gp_sweep(&self, x: &mut FlowAssignment, pricing: &HubPricing) {
        let FlowAssignment { path_flows, arc_flows, needs } = x;
        for g in &self.paths.groups {
            let c = self.path_costs(arc_flows, needs, pricing);
            let Some(&best) = g.paths.iter().min_by(|&&a, &&b| c[a].total_cmp(&c[b]).then(a.cmp(&b))) else {
                continue;
            };
            let mut order: Vec<usize> = g.paths.iter().copied().filter(|&p| p != best && path_flows[p] > 0.0).collect();
            // most expensive first
            order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
            for r in order {
                self.shift(path_flows, arc_flows, needs, r, best, pricing);
            }
        }
    }

    /// Exact line search from `x` along `x − anchor`, as far as the flows stay
    /// nonnegative. Undoes the zigzag of pairwise shifts in flat valleys.
    fn extrapolate(&self, x: &mut FlowAssignment, anchor: &[f64], pricing: &HubPricing) {
        let dir: Vec<f64> = x.path_flows.iter().zip(anchor).map(|(f, a)| f - a).collect();
        let t_max = x
            .path_flows
            .iter()
            .zip(&dir)
            .filter(|(_, d)| **d < 0.0)
            .map(|(f, d)| f / -d)
            .fold(f64::INFINITY, f64::min)
            .min(1e3);
        if !(t_max > 0.0) {
            return;
        }
        let at = |t: f64| -> FlowAssignment {
            self.assemble(x.path_flows.iter().zip(&dir).map(|(f, d)| (f + t * d).max(0.0)).collect())
        };
        let slope = |t: f64| {
            let y = at(t);
            self.costs(&y, pricing).iter().zip(&dir).map(|(c, d)| c * d).sum::<f64>()
        };
        if slope(0.0) >= 0.0 {
            return;
        }
        let t = if slope(t_max) <= 0.0 {
            t_max
        } else {
            let (mut lo, mut hi) = (0.0, t_max);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let y = at(t);
        if self.potential(&y, pricing) < self.potential(x, pricing) {
            *x = y;
        }
    }

    fn fw_step(&self, x: &mut FlowAssignment, pricing: &HubPricing) {
        let c = self.costs(x, pricing);
        let mut target = vec![0.0; self.paths.len()];
        for g in &self.paths.groups {
            if let Some(&best) = g.paths.iter().min_by(|&&a, &&b| c[a].total_cmp(&c[b]).then(a.cmp(&b))) {
                target[best] = g.demand;
            }
        }
        let dir: Vec<f64> = target.iter().zip(&x.path_flows).map(|(t, f)| t - f).collect();
        let slope = |theta: f64| {
            let flows: Vec<f64> = x.path_flows.iter().zip(&dir).map(|(f, d)| (f + theta * d).max(0.0)).collect();
            let y = self.assemble(flows);
            let c = self.costs(&y, pricing);
            c.iter().zip(&dir).map(|(c, d)| c * d).sum::<f64>()
        };
        let theta = if slope(1.0) <= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let flows: Vec<f64> = x.path_flows.iter().zip(&dir).map(|(f, d)| (f + theta * d).max(0.0)).collect();
        *x = self.assemble(flows);
    }
}

const EXTRAPOLATE_EVERY: usize = 10;

/// Solves the lower level. Starts from `start` when given, otherwise from the
/// free-flow all-or-nothing loading.
pub fn solve_wardrop(
    problem: &EquilibriumProblem,
    pricing: &HubPricing,
    options: &WardropOptions,
    start: Option<&FlowAssignment>,
) -> Result<EquilibriumResult> {
    if let HubPricing::Lmp { alpha } = pricing {
        if !(*alpha >= 0.0) {
            return Err(Error::Domain(format!("price scale alpha must be nonnegative, got {alpha}")));
        }
    }
    if let HubPricing::Fixed(p) = pricing {
        if p.len() != problem.scenario.hubs().len() || p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("fixed hub prices must be nonnegative, one per hub".into()));
        }
    }
    let tol = options.tol.unwrap_or_else(|| problem.default_tolerance(pricing));
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("gap tolerance must be positive, got {tol}")));
    }
    let mut x = match start {
        Some(s) => problem.assignment(s.path_flows.clone())?,
        None => problem.free_flow_start(pricing),
    };
    let mut trace = vec![problem.potential(&x, pricing)];
    let mut last_gap = f64::INFINITY;
    let mut anchor = x.path_flows.clone();
    for sweep in 0..=options.max_sweeps {
        let gap = problem.internal_gap(&x, pricing);
        last_gap = gap;
        if gap <= tol {
            let certified = wardrop_gap(problem, &x, pricing)?;
            if certified <= tol {
                return Ok(EquilibriumResult {
                    beckmann: problem.potential(&x, pricing),
                    flows: x,
                    gap: certified,
                    tol,
                    iterations: sweep,
                    beckmann_trace: trace,
                });
            }
        }
        if sweep == options.max_sweeps {
            break;
        }
        match options.method {
            WardropMethod::GradientProjection => {
                problem.gp_sweep(&mut x, pricing);
                // drop accumulated drift in the incremental updates
                x = problem.assemble(std::mem::take(&mut x.path_flows));
                if (sweep + 1) % EXTRAPOLATE_EVERY == 0 {
                    problem.extrapolate(&mut x, &anchor, pricing);
                    anchor.clone_from(&x.path_flows);
                }
            }
            WardropMethod::FrankWolfe => problem.fw_step(&mut x, pricing),
        }
        trace.push(problem.potential(&x, pricing));
    }
    Err(Error::WardropNotConverged {
        gap: last_gap,
        tol,
        iterations: options.max_sweeps,
        // the potential never increases, so the last iterate is the best one
        best: Box::new(x),
    })
}

/// Equilibrium gap of any feasible assignment, recomputed from the path flows
/// through the transport model's public cost functions.
pub fn wardrop_gap(problem: &EquilibriumProblem, x: &FlowAssignment, pricing: &HubPricing) -> Result<f64> {
    let scenario = &problem.scenario;
    let paths = &problem.paths;
    let checked = problem.assignment(x.path_flows.clone())?;
    let flows = checked.path_flows();
    let mut arc_flows = vec![0.0; scenario.arcs().len()];
    let mut needs = vec![0.0; scenario.hubs().len()];
    for (p, path) in paths.paths.iter().enumerate() {
        for &a in &paths.routes[path.route].arcs {
            arc_flows[a] += flows[p];
        }
        if path.decision == ChargeDecision::AtHub {
            needs[path.hub] += flows[p] * scenario.energy_need(&scenario.classes()[path.class], path)?;
        }
    }
    let mut gap: f64 = 0.0;
    for g in &paths.groups {
        let mut costs = Vec::with_capacity(g.paths.len());
        for &p in &g.paths {
            let path = &paths.paths[p];
            let class = &scenario.classes()[path.class];
            let price = match scenario.fixed_unit_price(class, path) {
                Some(v) => v,
                None => match pricing {
                    HubPricing::Lmp { alpha } => problem.cases[path.hub].lmp_price(needs[path.hub], *alpha)?,
                    HubPricing::Fixed(v) => v[path.hub],
                },
            };
            costs.push(scenario.path_cost(paths, path, &arc_flows, price)?);
        }
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        for (&p, c) in g.paths.iter().zip(&costs) {
            if flows[p] > 0.0 {
                gap = gap.max(c - best);
            }
        }
    }
    Ok(gap)
}

/// Aggregated charging need per hub, kWh.
pub fn charging_needs(problem: &EquilibriumProblem, x: &FlowAssignment) -> Vec<f64> {
    problem.needs_of(&x.path_flows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub starts: usize,
    /// Largest absolute arc-flow difference between any two runs (vehicles).
    pub arc_deviation: f64,
    /// Same, relative to `max(|x_a|, 1)`.
    pub arc_relative: f64,
    pub need_deviation: f64,
    /// Relative to `max(|L_i|, 1 kWh)`.
    pub need_relative: f64,
    /// Largest path-flow difference; may be large where paths are interchangeable.
    pub path_deviation: f64,
}

/// Solves from `n_starts` random feasible points (seeded `seed`, `seed + 1`,
/// ...) and compares the aggregates. Each start is solved to a hundredth of
/// the configured tolerance so that solver slack does not pass for
/// non-uniqueness.
pub fn uniqueness_probe(
    problem: &EquilibriumProblem,
    pricing: &HubPricing,
    n_starts: usize,
    seed: u64,
    options: &WardropOptions,
) -> Result<UniquenessReport> {
    use rayon::prelude::*;
    if n_starts < 2 {
        return Err(Error::Domain("the uniqueness probe needs at least two starts".into()));
    }
    // floored at 1e-12 of the mean path cost, where round-off takes over
    let default = problem.default_tolerance(pricing);
    let tight = WardropOptions {
        tol: Some((1e-2 * options.tol.unwrap_or(default)).max(1e-6 * default)),
        ..options.clone()
    };
    let runs = (0..n_starts as u64)
        .into_par_iter()
        .map(|i| {
            let start = problem.random_start(seed.wrapping_add(i));
            solve_wardrop(problem, pricing, &tight, Some(&start))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = UniquenessReport {
        starts: n_starts,
        arc_deviation: 0.0,
        arc_relative: 0.0,
        need_deviation: 0.0,
        need_relative: 0.0,
        path_deviation: 0.0,
    };
    let spread = |values: &mut dyn Iterator<Item = (f64, f64)>, abs: &mut f64, rel: &mut f64, floor: f64| {
        for (a, b) in values {
            let d = (a - b).abs();
            *abs = abs.max(d);
            *rel = rel.max(d / a.abs().max(b.abs()).max(floor));
        }
    };
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a, b) = (&runs[i].flows, &runs[j].flows);
            spread(
                &mut a.arc_flows.iter().copied().zip(b.arc_flows.iter().copied()),
                &mut report.arc_deviation,
                &mut report.arc_relative,
                1.0,
            );
            spread(
                &mut a.needs.iter().copied().zip(b.needs.iter().copied()),
                &mut report.need_deviation,
                &mut report.need_relative,
                1.0,
            );
            let mut unused = 0.0;
            spread(
                &mut a.path_flows.iter().copied().zip(b.path_flows.iter().copied()),
                &mut report.path_deviation,
                &mut unused,
                1.0,
            );
        }
    }
    Ok(report)
}

/// Writes `class,path_id,flow,cost`.
pub fn write_path_flows<W: Write>(
    out: W,
    problem: &EquilibriumProblem,
    result: &EquilibriumResult,
    pricing: &HubPricing,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "path_id", "flow", "cost"])?;
    let costs = problem.costs(&result.flows, pricing);
    for (p, path) in problem.paths.paths.iter().enumerate() {
        w.write_record([
            problem.scenario.classes()[path.class].tag.label().to_string(),
            path.id.to_string(),
            result.flows.path_flows[p].to_string(),
            costs[p].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("path flows", e))?;
    Ok(())
}

/// Writes `hub,L_i_kwh`.
pub fn write_needs<W: Write>(out: W, problem: &EquilibriumProblem, needs: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["hub", "L_i_kwh"])?;
    for (hub, l) in problem.scenario.hubs().iter().zip(needs) {
        w.write_record([hub.id.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("hub needs", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::tests::{arc, classes, hub};
    use crate::transport::{Arc, OdDemand, Owner, TransportScenario};

    /// Nodes 1 → 2 by two parallel roads (via 3 and via 4), hub at 2.
    fn parallel(len_a: f64, len_b: f64, demand: [f64; 3], owner: Owner) -> EquilibriumProblem {
        parallel_with_capacity(len_a, len_b, demand, owner, 0.2)
    }

    fn parallel_with_capacity(len_a: f64, len_b: f64, demand: [f64; 3], owner: Owner, cap: f64) -> EquilibriumProblem {
        let road = |id, tail, head, l| Arc { capacity_frac: cap, ..arc(id, tail, head, l) };
        let s = TransportScenario::new(
            vec![],
            vec![road(1, 1, 3, len_a / 2.0), road(2, 3, 2, len_a / 2.0), road(3, 1, 4, len_b / 2.0), road(4, 4, 2, len_b / 2.0)],
            vec![hub(2, 2, owner, 3)],
            classes(),
            vec![OdDemand { origin: 1, destination: 2, per_class: demand.to_vec() }],
            10.0,
            0.25,
            3,
        )
        .unwrap();
        EquilibriumProblem::new(s, 4).unwrap()
    }

    fn tight() -> WardropOptions {
        WardropOptions { tol: Some(1e-12), ..Default::default() }
    }

    #[test]
    fn identical_parallel_roads_split_evenly() {
        let p = parallel(5.0, 5.0, [1000.0, 0.0, 0.0], Owner::City);
        let r = solve_wardrop(&p, &HubPricing::Lmp { alpha: 0.0 }, &tight(), None).unwrap();
        let f = r.flows.path_flows();
        let g: Vec<f64> = p.paths().groups[0].paths.iter().map(|&i| f[i]).collect();
        assert_eq!(g.len(), 2);
        assert!((g[0] - 500.0).abs() < 1e-6 && (g[1] - 500.0).abs() < 1e-6, "{g:?}");
        assert!(wardrop_gap(&p, &r.flows, &HubPricing::Lmp { alpha: 0.0 }).unwrap() <= 1e-12);
    }

    #[test]
    fn light_demand_stays_on_the_short_road() {
        // capacity 5× the fleet: the short road stays cheaper even when fully loaded
        let p = parallel_with_capacity(5.0, 10.0, [100.0, 0.0, 0.0], Owner::City, 5.0);
        let pricing = HubPricing::Lmp { alpha: 0.0 };
        let r = solve_wardrop(&p, &pricing, &tight(), None).unwrap();
        let ids = &p.paths().groups[0].paths;
        let short = ids.iter().copied().find(|&i| p.paths().paths[i].length_km < 6.0).unwrap();
        assert_eq!(r.flows.path_flows()[short], 100.0);
        assert_eq!(r.gap, 0.0);
        // brute force over the split: potential minimised at everything on the short road
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=1000 {
            let on_short = 100.0 * k as f64 / 1000.0;
            let mut flows = vec![0.0; p.paths().len()];
            for &i in ids {
                flows[i] = if i == short { on_short } else { 100.0 - on_short };
            }
            let v = p.beckmann_value(&p.assignment(flows).unwrap(), &pricing).unwrap();
            if v < best.0 {
                best = (v, on_short);
            }
        }
        assert_eq!(best.1, 100.0);
    }

    #[test]
    fn gap_of_a_bad_assignment_is_the_cost_difference() {
        let p = parallel(5.0, 10.0, [100.0, 0.0, 0.0], Owner::City);
        let pricing = HubPricing::Lmp { alpha: 0.0 };
        let ids = p.paths().groups[0].paths.clone();
        let long = ids.iter().copied().find(|&i| p.paths().paths[i].length_km > 6.0).unwrap();
        let mut flows = vec![0.0; p.paths().len()];
        flows[long] = 100.0;
        let x = p.assignment(flows).unwrap();
        let s = p.scenario();
        let long_cost = s.arcs()[2..].iter().map(|a| s.bpr_travel_cost(a, 100.0).unwrap()).sum::<f64>();
        let short_cost = s.arcs()[..2].iter().map(|a| s.bpr_travel_cost(a, 0.0).unwrap()).sum::<f64>();
        let fuel = 0.06 * 1.5 * (10.0 - 5.0);
        let gap = wardrop_gap(&p, &x, &pricing).unwrap();
        assert!((gap - (long_cost - short_cost + fuel)).abs() < 1e-12);
        assert!(gap > 0.0);
    }

    #[test]
    fn ev_needs_follow_path_energy() {
        // 100 e0 vehicles on a 10 km route: 10·0.2 + 5 = 7 kWh each
        let p = parallel(10.0, 30.0, [0.0, 100.0, 0.0], Owner::Cso);
        let x = p.free_flow_start(&HubPricing::Lmp { alpha: 0.0 });
        let needs = charging_needs(&p, &x);
        assert!((needs[0] - 700.0).abs() < 1e-9);
        let none = parallel(10.0, 30.0, [100.0, 0.0, 0.0], Owner::Cso);
        let x = none.free_flow_start(&HubPricing::Lmp { alpha: 0.0 });
        assert_eq!(charging_needs(&none, &x), vec![0.0]);
    }

    #[test]
    fn infeasible_assignment_is_rejected() {
        let p = parallel(5.0, 5.0, [10.0, 0.0, 0.0], Owner::City);
        assert!(matches!(p.assignment(vec![0.0; p.paths().len()]), Err(Error::Contract(_))));
        let mut f = vec![0.0; p.paths().len()];
        f[0] = -1.0;
        assert!(p.assignment(f).is_err());
    }

    #[test]
    fn potential_decreases_along_sweeps_and_matches_lmp_gradient() {
        let p = parallel(5.0, 7.0, [300.0, 300.0, 300.0], Owner::Cso);
        let pricing = HubPricing::Lmp { alpha: 1e-3 };
        let start = p.random_start(3);
        let r = solve_wardrop(&p, &pricing, &tight(), Some(&start)).unwrap();
        for w in r.beckmann_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
        }
        // local-minimum spot check: feasible pairwise perturbations do not lower the potential
        let base = r.beckmann;
        for g in &p.paths().groups {
            for &a in &g.paths {
                for &b in &g.paths {
                    let mut f = r.flows.path_flows().to_vec();
                    let eps = (1e-3f64).min(f[a]);
                    if a == b || eps <= 0.0 {
                        continue;
                    }
                    f[a] -= eps;
                    f[b] += eps;
                    let v = p.beckmann_value(&p.assignment(f).unwrap(), &pricing).unwrap();
                    assert!(v >= base - 1e-9 * base.abs(), "{v} < {base}");
                }
            }
        }
    }

    #[test]
    fn frank_wolfe_agrees_loosely() {
        let p = parallel_with_capacity(5.0, 7.0, [300.0, 300.0, 300.0], Owner::Cso, 1.0);
        let pricing = HubPricing::Lmp { alpha: 1e-3 };
        let gp = solve_wardrop(&p, &pricing, &tight(), None).unwrap();
        // the conditional gradient never empties a path, so its gap stalls; compare aggregates
        let opts = WardropOptions { tol: Some(1e-4), max_sweeps: 500, method: WardropMethod::FrankWolfe };
        let fw = match solve_wardrop(&p, &pricing, &opts, None) {
            Ok(r) => r.flows,
            Err(Error::WardropNotConverged { best, .. }) => *best,
            Err(e) => panic!("{e}"),
        };
        let v = p.beckmann_value(&fw, &pricing).unwrap();
        assert!(v >= gp.beckmann - 1e-9 * gp.beckmann.abs());
        assert!((v - gp.beckmann).abs() < 1e-3 * gp.beckmann.abs(), "{v} vs {}", gp.beckmann);
        assert!((fw.needs()[0] - gp.needs()[0]).abs() < 1e-2 * gp.needs()[0].max(1.0));
    }

    #[test]
    fn identical_routes_share_aggregates_but_not_path_flows() {
        // Two hubs on the same node: every route exists twice with equal cost.
        let s = TransportScenario::new(
            vec![],
            vec![arc(1, 1, 2, 4.0), arc(2, 1, 2, 6.0)],
            vec![hub(2, 2, Owner::City, 3), hub(3, 2, Owner::City, 3)],
            classes(),
            vec![OdDemand { origin: 1, destination: 2, per_class: vec![400.0, 200.0, 200.0] }],
            10.0,
            0.25,
            3,
        )
        .unwrap();
        let p = EquilibriumProblem::new(s, 3).unwrap();
        let pricing = HubPricing::Lmp { alpha: 0.0 };
        let report = uniqueness_probe(&p, &pricing, 4, 11, &tight()).unwrap();
        assert!(report.arc_relative < 1e-6, "{report:?}");
        assert!(report.path_deviation > 1.0, "{report:?}");
        // total charged energy is the same; its split across the twin hubs is not pinned down
        let a = solve_wardrop(&p, &pricing, &tight(), Some(&p.random_start(1))).unwrap();
        let b = solve_wardrop(&p, &pricing, &tight(), Some(&p.random_start(2))).unwrap();
        let ta: f64 = a.needs().iter().sum();
        let tb: f64 = b.needs().iter().sum();
        assert!((ta - tb).abs() < 1e-6 * ta.max(1.0));
    }

    #[test]
    fn fixed_prices_shift_charging_between_hubs() {
        let s = TransportScenario::new(
            vec![],
            vec![arc(1, 1, 2, 5.0), arc(2, 1, 3, 5.0)],
            vec![hub(2, 2, Owner::Cso, 3), hub(3, 3, Owner::Cso, 3)],
            classes(),
            vec![OdDemand { origin: 1, destination: 2, per_class: vec![0.0, 100.0, 0.0] }],
            10.0,
            0.25,
            3,
        )
        .unwrap();
        let p = EquilibriumProblem::new(s, 2).unwrap();
        let r = solve_wardrop(&p, &HubPricing::Fixed(vec![0.1, 0.3]), &tight(), None).unwrap();
        assert!(r.needs()[0] > r.needs()[1]);
        let total: f64 = r.needs().iter().sum();
        assert!((total - 100.0 * 6.0).abs() < 1e-9);
    }

    #[test]
    fn dumps_have_expected_headers() {
        let p = parallel(5.0, 5.0, [10.0, 10.0, 10.0], Owner::Cso);
        let pricing = HubPricing::Lmp { alpha: 1e-3 };
        let r = solve_wardrop(&p, &pricing, &tight(), None).unwrap();
        let mut buf = Vec::new();
        write_path_flows(&mut buf, &p, &r, &pricing).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,path_id,flow,cost\n"));
        assert_eq!(text.lines().count(), p.paths().len() + 1);
        let mut buf = Vec::new();
        write_needs(&mut buf, &p, r.needs()).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("hub,L_i_kwh\n2,"));
    }
}
