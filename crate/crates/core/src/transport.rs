//! Road network, Park & Ride hubs, vehicle classes and per-vehicle costs.
//!
//! Flows are vehicle counts. The congestion function normalises them by the
//! fleet size, so an arc capacity of `0.2` means "20 % of all vehicles".

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A directed road segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arc {
    pub id: u32,
    pub tail: u32,
    pub head: u32,
    pub length_km: f64,
    pub speed_kmh: f64,
    /// Capacity as a fraction of the total fleet.
    pub capacity_frac: f64,
}

impl Arc {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.length_km) || !ok(self.speed_kmh) || !ok(self.capacity_frac) {
            return Err(Error::Scenario(format!(
                "arc {} needs positive length, speed and capacity",
                self.id
            )));
        }
        Ok(())
    }

    /// Free-flow travel time in hours.
    pub fn free_flow_hours(&self) -> f64 {
        self.length_km / self.speed_kmh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Cso,
    City,
}

/// A Park & Ride hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hub {
    pub id: u32,
    pub node: u32,
    pub owner: Owner,
    /// Monetised cost of the last leg from the hub to the workplace.
    pub pt_fare_eur: f64,
    /// Grid bus (1-based, as in the grid file) feeding this hub.
    pub bus: usize,
    /// Nonflexible consumption per slot, kWh.
    #[serde(default)]
    pub nonflex_kwh: Vec<f64>,
}

impl Hub {
    pub fn is_cso(&self) -> bool {
        self.owner == Owner::Cso
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassTag {
    #[serde(rename = "g")]
    Gasoline,
    /// Low state of charge: must charge at the hub.
    #[serde(rename = "e0")]
    Ev0,
    /// May charge at the hub or later at home.
    #[serde(rename = "e1")]
    Ev1,
}

impl ClassTag {
    pub fn is_ev(self) -> bool {
        !matches!(self, ClassTag::Gasoline)
    }

    pub fn label(self) -> &'static str {
        match self {
            ClassTag::Gasoline => "g",
            ClassTag::Ev0 => "e0",
            ClassTag::Ev1 => "e1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleClass {
    pub tag: ClassTag,
    /// kWh/km for EVs, L/km for gasoline vehicles.
    pub consumption_per_km: f64,
    /// Energy needed on top of the trip to reach a full battery (EVs only).
    pub top_up_kwh: f64,
    /// Fuel price for gasoline vehicles, home charging price for `e1`; `None` for `e0`.
    pub unit_price: Option<f64>,
}

impl VehicleClass {
    pub fn gasoline(consumption_l_per_km: f64, fuel_price: f64) -> Self {
        Self {
            tag: ClassTag::Gasoline,
            consumption_per_km: consumption_l_per_km,
            top_up_kwh: 0.0,
            unit_price: Some(fuel_price),
        }
    }

    pub fn ev0(consumption_kwh_per_km: f64, top_up_kwh: f64) -> Self {
        Self {
            tag: ClassTag::Ev0,
            consumption_per_km: consumption_kwh_per_km,
            top_up_kwh,
            unit_price: None,
        }
    }

    pub fn ev1(consumption_kwh_per_km: f64, top_up_kwh: f64, home_price: f64) -> Self {
        Self {
            tag: ClassTag::Ev1,
            consumption_per_km: consumption_kwh_per_km,
            top_up_kwh,
            unit_price: Some(home_price),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.consumption_per_km > 0.0) || !(self.top_up_kwh >= 0.0) {
            return Err(Error::Scenario(format!(
                "class {} needs positive consumption and nonnegative top-up",
                self.tag.label()
            )));
        }
        match (self.tag, self.unit_price) {
            (ClassTag::Ev0, Some(_)) => Err(Error::Scenario(
                "class e0 has no charge-later option and takes no unit price".into(),
            )),
            (ClassTag::Gasoline | ClassTag::Ev1, None) => Err(Error::Scenario(format!(
                "class {} needs a unit price",
                self.tag.label()
            ))),
            (ClassTag::Gasoline, Some(_)) if self.top_up_kwh != 0.0 => {
                Err(Error::Scenario("gasoline class cannot have a top-up need".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChargeDecision {
    AtHub,
    Later,
    NotApplicable,
}

/// Vehicle counts for one origin-destination pair, one entry per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdDemand {
    pub origin: u32,
    pub destination: u32,
    pub per_class: Vec<f64>,
}

impl OdDemand {
    pub fn total(&self) -> f64 {
        self.per_class.iter().sum()
    }
}

/// A driving route from an origin to a hub node.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub od: usize,
    pub hub: usize,
    /// Arc indices in driving order.
    pub arcs: Vec<usize>,
    pub length_km: f64,
}

/// A route combined with a vehicle class and a charging decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPath {
    pub id: usize,
    pub class: usize,
    pub route: usize,
    pub od: usize,
    pub hub: usize,
    pub decision: ChargeDecision,
    pub length_km: f64,
}

/// The transport side of a scenario. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportScenario {
    arcs: Vec<Arc>,
    hubs: Vec<Hub>,
    classes: Vec<VehicleClass>,
    demands: Vec<OdDemand>,
    nodes: Vec<u32>,
    /// €/h.
    pub value_of_time: f64,
    /// Constant charging price at city-owned hubs, €/kWh.
    pub city_charge_price: f64,
    pub slots: usize,
    fleet_size: f64,
}

impl TransportScenario {
    pub fn new(
        nodes: Vec<u32>,
        arcs: Vec<Arc>,
        hubs: Vec<Hub>,
        classes: Vec<VehicleClass>,
        demands: Vec<OdDemand>,
        value_of_time: f64,
        city_charge_price: f64,
        slots: usize,
    ) -> Result<Self> {
        let mut nodes = nodes;
        for a in &arcs {
            nodes.push(a.tail);
            nodes.push(a.head);
        }
        nodes.sort_unstable();
        nodes.dedup();
        let fleet_size: f64 = demands.iter().map(OdDemand::total).sum();
        let scenario = Self {
            arcs,
            hubs,
            classes,
            demands,
            nodes,
            value_of_time,
            city_charge_price,
            slots,
            fleet_size,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<()> {
        for a in &self.arcs {
            a.validate()?;
        }
        let mut seen = HashMap::new();
        for (i, c) in self.classes.iter().enumerate() {
            c.validate()?;
            if seen.insert(c.tag, i).is_some() {
                return Err(Error::Scenario(format!("duplicate class {}", c.tag.label())));
            }
        }
        if let (Some(e0), Some(e1)) = (self.class(ClassTag::Ev0), self.class(ClassTag::Ev1)) {
            if e0.top_up_kwh < e1.top_up_kwh {
                return Err(Error::Scenario("top-up of e0 must be at least that of e1".into()));
            }
        }
        if let Some(home) = self.class(ClassTag::Ev1).and_then(|c| c.unit_price) {
            if !(self.city_charge_price > home) {
                return Err(Error::Scenario(format!(
                    "city hub price {} must exceed home price {}",
                    self.city_charge_price, home
                )));
            }
        }
        if self.slots == 0 {
            return Err(Error::Scenario("need at least one time slot".into()));
        }
        if !(self.value_of_time > 0.0) {
            return Err(Error::Scenario("value of time must be positive".into()));
        }
        if self.hubs.is_empty() {
            return Err(Error::Scenario("no hubs".into()));
        }
        for h in &self.hubs {
            if self.nodes.binary_search(&h.node).is_err() {
                return Err(Error::Scenario(format!("hub {} sits on unknown node {}", h.id, h.node)));
            }
            if !(h.pt_fare_eur >= 0.0) {
                return Err(Error::Scenario(format!("hub {} has a negative fare", h.id)));
            }
            if h.nonflex_kwh.len() != self.slots || h.nonflex_kwh.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Scenario(format!(
                    "hub {} needs {} nonnegative nonflexible values",
                    h.id, self.slots
                )));
            }
        }
        for d in &self.demands {
            if d.per_class.len() != self.classes.len() || d.per_class.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Scenario(format!(
                    "demand {}->{} needs one nonnegative count per class",
                    d.origin, d.destination
                )));
            }
            if self.nodes.binary_search(&d.origin).is_err() {
                return Err(Error::Scenario(format!("unknown origin {}", d.origin)));
            }
        }
        if !(self.fleet_size > 0.0) {
            return Err(Error::Scenario("fleet size must be positive".into()));
        }
        Ok(())
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn hubs(&self) -> &[Hub] {
        &self.hubs
    }

    pub fn classes(&self) -> &[VehicleClass] {
        &self.classes
    }

    pub fn demands(&self) -> &[OdDemand] {
        &self.demands
    }

    pub fn nodes(&self) -> &[u32] {
        &self.nodes
    }

    /// Total number of vehicles over all classes and OD pairs.
    pub fn fleet_size(&self) -> f64 {
        self.fleet_size
    }

    pub fn class(&self, tag: ClassTag) -> Option<&VehicleClass> {
        self.classes.iter().find(|c| c.tag == tag)
    }

    pub fn hub_index(&self, id: u32) -> Option<usize> {
        self.hubs.iter().position(|h| h.id == id)
    }

    /// Copy with replaced hub data (fares, profiles). Revalidates.
    pub fn with_hubs(&self, hubs: Vec<Hub>) -> Result<Self> {
        let mut s = self.clone();
        s.hubs = hubs;
        s.validate()?;
        Ok(s)
    }

    /// Congestion cost of one arc in €, for a total arc flow in vehicles.
    ///
    /// `τ·(l/v)·(1 + 2·(x/(N·C))⁴)`.
    pub fn bpr_travel_cost(&self, arc: &Arc, total_arc_flow: f64) -> Result<f64> {
        if !(total_arc_flow >= 0.0) {
            return Err(Error::Domain(format!(
                "negative flow {total_arc_flow} on arc {}",
                arc.id
            )));
        }
        Ok(self.bpr_unchecked(arc, total_arc_flow))
    }

    pub(crate) fn bpr_unchecked(&self, arc: &Arc, flow: f64) -> f64 {
        let ratio = flow / (self.fleet_size * arc.capacity_frac);
        let r2 = ratio * ratio;
        self.value_of_time * arc.free_flow_hours() * (1.0 + 2.0 * r2 * r2)
    }

    /// Derivative of the congestion cost with respect to the arc flow (vehicles).
    pub(crate) fn bpr_slope(&self, arc: &Arc, flow: f64) -> f64 {
        let cap = self.fleet_size * arc.capacity_frac;
        let ratio = flow / cap;
        self.value_of_time * arc.free_flow_hours() * 8.0 * ratio * ratio * ratio / cap
    }

    /// `∫₀^x d_a(y) dy` in closed form.
    pub(crate) fn bpr_integral(&self, arc: &Arc, flow: f64) -> f64 {
        let cap = self.fleet_size * arc.capacity_frac;
        let ratio = flow / cap;
        let r4 = ratio * ratio * ratio * ratio;
        self.value_of_time * arc.free_flow_hours() * flow * (1.0 + 0.4 * r4)
    }

    /// Energy drawn by a vehicle of `class` on `path`: kWh for EVs, litres for gasoline.
    pub fn energy_need(&self, class: &VehicleClass, path: &GlobalPath) -> Result<f64> {
        self.check_compatible(class, path)?;
        Ok(path.length_km * class.consumption_per_km + class.top_up_kwh)
    }

    fn check_compatible(&self, class: &VehicleClass, path: &GlobalPath) -> Result<()> {
        let ok = match class.tag {
            ClassTag::Gasoline => path.decision == ChargeDecision::NotApplicable,
            ClassTag::Ev0 => path.decision == ChargeDecision::AtHub,
            ClassTag::Ev1 => path.decision != ChargeDecision::NotApplicable,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "class {} cannot take a {:?} path",
                class.tag.label(),
                path.decision
            )))
        }
    }

    /// The unit price a path pays when it does not depend on the hub load.
    /// `None` means the price is set by the hub operator (CSO hub, charging at hub).
    pub fn fixed_unit_price(&self, class: &VehicleClass, path: &GlobalPath) -> Option<f64> {
        match path.decision {
            ChargeDecision::NotApplicable | ChargeDecision::Later => class.unit_price,
            ChargeDecision::AtHub => {
                if self.hubs[path.hub].is_cso() {
                    None
                } else {
                    Some(self.city_charge_price)
                }
            }
        }
    }

    /// Total cost of a global path: congestion along its arcs, hub fare, energy.
    pub fn path_cost(
        &self,
        paths: &PathSet,
        path: &GlobalPath,
        arc_flows: &[f64],
        unit_price: f64,
    ) -> Result<f64> {
        let class = &self.classes[path.class];
        let energy = self.energy_need(class, path)?;
        match self.fixed_unit_price(class, path) {
            Some(p) if (p - unit_price).abs() > 1e-12 * p.abs().max(1.0) => {
                return Err(Error::Contract(format!(
                    "path {} pays a fixed {p} per unit, got {unit_price}",
                    path.id
                )))
            }
            None if !(unit_price >= 0.0) => {
                return Err(Error::Contract(format!(
                    "path {} needs a nonnegative hub price, got {unit_price}",
                    path.id
                )))
            }
            _ => {}
        }
        if arc_flows.len() != self.arcs.len() {
            return Err(Error::Contract("arc flow vector has the wrong length".into()));
        }
        let mut congestion = 0.0;
        for &a in &paths.routes[path.route].arcs {
            congestion += self.bpr_travel_cost(&self.arcs[a], arc_flows[a])?;
        }
        Ok(congestion + self.hubs[path.hub].pt_fare_eur + energy * unit_price)
    }
}

/// One (class, OD) block of the flow polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGroup {
    pub class: usize,
    pub od: usize,
    pub demand: f64,
    pub paths: Vec<usize>,
}

/// Enumerated routes and their per-class expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub routes: Vec<Route>,
    pub paths: Vec<GlobalPath>,
    pub groups: Vec<PathGroup>,
    /// (OD index, hub index) pairs left out because the hub is unreachable.
    pub omitted: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// The `k` shortest loopless routes (by length) from every origin to every hub,
/// expanded into class paths: one per route for gasoline, `AtHub` for `e0`,
/// `AtHub` and `Later` for `e1`.
pub fn enumerate_paths(scenario: &TransportScenario, k: usize) -> Result<PathSet> {
    if k == 0 {
        return Err(Error::Domain("path count limit must be at least 1".into()));
    }
    let graph = Graph::new(scenario);
    let mut routes = Vec::new();
    let mut omitted = Vec::new();
    let mut warnings = Vec::new();
    for (od, demand) in scenario.demands.iter().enumerate() {
        let mut reachable = 0;
        for (h, hub) in scenario.hubs.iter().enumerate() {
            let found = graph.k_shortest(demand.origin, hub.node, k);
            if found.is_empty() {
                omitted.push((od, h));
                warnings.push(format!(
                    "hub {} unreachable from origin {}; omitted",
                    hub.id, demand.origin
                ));
                continue;
            }
            reachable += 1;
            for arcs in found {
                let length_km = arcs.iter().map(|&a| scenario.arcs[a].length_km).sum();
                routes.push(Route { od, hub: h, arcs, length_km });
            }
        }
        if reachable == 0 && demand.total() > 0.0 {
            return Err(Error::Scenario(format!(
                "no hub reachable from origin {}",
                demand.origin
            )));
        }
    }

    let mut paths = Vec::new();
    let mut group_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut groups: Vec<PathGroup> = Vec::new();
    for (od, demand) in scenario.demands.iter().enumerate() {
        for (c, _) in scenario.classes.iter().enumerate() {
            group_index.insert((c, od), groups.len());
            groups.push(PathGroup { class: c, od, demand: demand.per_class[c], paths: Vec::new() });
        }
    }
    for (r, route) in routes.iter().enumerate() {
        for (c, class) in scenario.classes.iter().enumerate() {
            let decisions: &[ChargeDecision] = match class.tag {
                ClassTag::Gasoline => &[ChargeDecision::NotApplicable],
                ClassTag::Ev0 => &[ChargeDecision::AtHub],
                ClassTag::Ev1 => &[ChargeDecision::AtHub, ChargeDecision::Later],
            };
            for &decision in decisions {
                let id = paths.len();
                paths.push(GlobalPath {
                    id,
                    class: c,
                    route: r,
                    od: route.od,
                    hub: route.hub,
                    decision,
                    length_km: route.length_km,
                });
                groups[group_index[&(c, route.od)]].paths.push(id);
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(PathSet { routes, paths, groups, omitted, warnings })
}

struct Graph {
    node_index: HashMap<u32, usize>,
    /// Outgoing (arc index, head node index, length) per node.
    out: Vec<Vec<(usize, usize, f64)>>,
    tails: Vec<usize>,
    lengths: Vec<f64>,
}

impl Graph {
    fn new(s: &TransportScenario) -> Self {
        let node_index: HashMap<u32, usize> =
            s.nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut out = vec![Vec::new(); s.nodes.len()];
        let mut tails = Vec::with_capacity(s.arcs.len());
        for (i, a) in s.arcs.iter().enumerate() {
            out[node_index[&a.tail]].push((i, node_index[&a.head], a.length_km));
            tails.push(node_index[&a.tail]);
        }
        let lengths = s.arcs.iter().map(|a| a.length_km).collect();
        Self { node_index, out, tails, lengths }
    }

    /// Dijkstra from `src` to `dst` avoiding `banned_nodes` and `banned_arcs`.
    /// Ties are broken on arc index so the result is deterministic.
    fn shortest(
        &self,
        src: usize,
        dst: usize,
        banned_nodes: &[bool],
        banned_arcs: &[usize],
    ) -> Option<(f64, Vec<usize>)> {
        use std::cmp::Ordering;
        use std::collections::BinaryHeap;

        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }

        let n = self.out.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Item(0.0, src));
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if u == dst {
                break;
            }
            for &(a, v, w) in &self.out[u] {
                if banned_nodes[v] || banned_arcs.contains(&a) {
                    continue;
                }
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    pred[v] = Some(a);
                    heap.push(Item(nd, v));
                }
            }
        }
        if !dist[dst].is_finite() {
            return None;
        }
        let mut arcs = Vec::new();
        let mut v = dst;
        while v != src {
            let a = pred[v]?;
            arcs.push(a);
            v = self.tails[a];
        }
        arcs.reverse();
        Some((dist[dst], arcs))
    }

    fn arc_nodes(&self, arcs: &[usize], src: usize) -> Vec<usize> {
        let mut nodes = vec![src];
        for &a in arcs {
            let u = *nodes.last().unwrap();
            let head = self.out[u].iter().find(|e| e.0 == a).map(|e| e.1).unwrap();
            nodes.push(head);
        }
        nodes
    }

    /// Yen's algorithm.
    fn k_shortest(&self, origin: u32, target: u32, k: usize) -> Vec<Vec<usize>> {
        let (Some(&src), Some(&dst)) = (self.node_index.get(&origin), self.node_index.get(&target))
        else {
            return Vec::new();
        };
        let n = self.out.len();
        if src == dst {
            return vec![Vec::new()];
        }
        let Some((d0, first)) = self.shortest(src, dst, &vec![false; n], &[]) else {
            return Vec::new();
        };
        let mut accepted: Vec<(f64, Vec<usize>)> = vec![(d0, first)];
        let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();
        while accepted.len() < k {
            let (_, last) = accepted.last().unwrap().clone();
            let last_nodes = self.arc_nodes(&last, src);
            for spur in 0..last.len() {
                let root = &last[..spur];
                let spur_node = last_nodes[spur];
                let mut banned_arcs = Vec::new();
                for (_, p) in &accepted {
                    if p.len() > spur && p[..spur] == *root {
                        banned_arcs.push(p[spur]);
                    }
                }
                let mut banned_nodes = vec![false; n];
                for &v in &last_nodes[..spur] {
                    banned_nodes[v] = true;
                }
                if let Some((_, tail)) = self.shortest(spur_node, dst, &banned_nodes, &banned_arcs) {
                    let mut total: Vec<usize> = root.to_vec();
                    total.extend(tail);
                    let len = total.iter().map(|&a| self.arc_length(a)).sum();
                    if !candidates.iter().any(|(_, p)| *p == total)
                        && !accepted.iter().any(|(_, p)| *p == total)
                    {
                        candidates.push((len, total));
                    }
                }
            }
            if candidates.is_empty() {
                break;
            }
            let best = candidates
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
                .map(|(i, _)| i)
                .unwrap();
            accepted.push(candidates.swap_remove(best));
        }
        accepted.into_iter().map(|(_, p)| p).collect()
    }

    fn arc_length(&self, a: usize) -> f64 {
        self.lengths[a]
    }
}
