//! Scenario configuration: loading, validation, nonflexible-load synthesis
//! and assembly of the transport, grid and contract models.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::grid::{GridCase, GridFile};
use crate::operators::ContractTerms;
use crate::transport::{Arc, Hub, OdDemand, TransportScenario, VehicleClass};
use crate::trilevel::{TrilevelConfig, TrilevelModel};
use crate::wardrop::{EquilibriumProblem, WardropOptions};

const SIOUX_FALLS: &str = include_str!("../data/sioux_falls.json");
const IEEE33: &str = include_str!("../data/ieee33.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdVolume {
    pub origin: u32,
    pub destination: u32,
    pub vehicles: f64,
}

/// Road network file: nodes, arcs, hubs and commuter volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub name: String,
    pub nodes: Vec<NodeRecord>,
    pub arcs: Vec<Arc>,
    pub hubs: Vec<Hub>,
    pub od_demands: Vec<OdVolume>,
}

impl NetworkFile {
    /// The bundled Sioux Falls network with its four hubs and two origins.
    pub fn sioux_falls() -> Self {
        serde_json::from_str(SIOUX_FALLS).expect("bundled network parses")
    }
}

/// Every knob of a run. All fields have defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Network file; the bundled Sioux Falls network when absent.
    pub network_file: Option<PathBuf>,
    /// Feeder file; the bundled 33-bus feeder when absent.
    pub grid_file: Option<PathBuf>,
    pub k_paths: usize,
    pub slots: usize,
    /// €/h.
    pub value_of_time: f64,
    pub ev_consumption_kwh_per_km: f64,
    pub fuel_consumption_l_per_km: f64,
    /// €/L.
    pub fuel_price: f64,
    /// Price at city-owned hubs, €/kWh.
    pub city_charge_price: f64,
    /// Home charging price for drivers who charge later, €/kWh.
    pub home_charge_price: f64,
    pub top_up_e0_kwh: f64,
    pub top_up_e1_kwh: f64,
    /// Share of EVs among commuters.
    pub ev_share: f64,
    /// Split of EVs into (must charge at a hub, may charge later).
    pub ev_class_split: [f64; 2],
    /// Daily nonflexible consumption per hub, MWh, in network-file hub order.
    pub nonflex_totals_mwh: Vec<f64>,
    /// Seed of the nonflexible profiles; the run seed when absent.
    pub nonflex_seed: Option<u64>,
    /// Public-transport fare overrides by hub id, €.
    pub pt_fares: BTreeMap<u32, f64>,
    /// Feeder bus overrides by hub id.
    pub hub_buses: BTreeMap<u32, usize>,
    /// Contract base-price slope, € per kWh and per `threshold_unit_kw` of threshold.
    pub q: f64,
    pub q_bar: f64,
    pub threshold_unit_kw: f64,
    /// Grid cost weight, € per squared `grid_power_unit_kva`.
    pub beta: f64,
    /// Unit of the head apparent power inside the grid cost, kVA.
    pub grid_power_unit_kva: f64,
    pub seed: u64,
    pub trilevel: TrilevelConfig,
    pub wardrop: WardropOptions,
    pub baseline: BaselineConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            network_file: None,
            grid_file: None,
            k_paths: 8,
            slots: 8,
            value_of_time: 10.0,
            ev_consumption_kwh_per_km: 0.2,
            fuel_consumption_l_per_km: 0.06,
            fuel_price: 1.5,
            city_charge_price: 0.25,
            home_charge_price: 0.20,
            top_up_e0_kwh: 5.0,
            top_up_e1_kwh: 0.0,
            ev_share: 0.5,
            ev_class_split: [0.5, 0.5],
            nonflex_totals_mwh: vec![1.51, 0.68, 0.45, 0.45],
            nonflex_seed: None,
            pt_fares: BTreeMap::new(),
            hub_buses: BTreeMap::new(),
            q: 0.1,
            q_bar: 0.3,
            threshold_unit_kw: 1000.0,
            beta: 1e-3,
            grid_power_unit_kva: 1000.0,
            seed: 0,
            trilevel: TrilevelConfig::default(),
            wardrop: WardropOptions::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

fn schema(key: &str, message: impl Into<String>) -> Error {
    Error::Schema { key: key.into(), message: message.into() }
}

impl ScenarioConfig {
    /// Parses JSON, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            let key = match message.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
                Some(field) if path == "." => field.to_string(),
                _ => path,
            };
            schema(&key, message)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(schema(key, format!("must be positive, got {v}"))) };
        let nonneg = |key: &str, v: f64| if v >= 0.0 && v.is_finite() { Ok(()) } else { Err(schema(key, format!("must be nonnegative, got {v}"))) };
        if self.k_paths == 0 {
            return Err(schema("k_paths", "must be at least 1"));
        }
        if self.slots == 0 {
            return Err(schema("slots", "must be at least 1"));
        }
        positive("value_of_time", self.value_of_time)?;
        positive("ev_consumption_kwh_per_km", self.ev_consumption_kwh_per_km)?;
        positive("fuel_consumption_l_per_km", self.fuel_consumption_l_per_km)?;
        nonneg("fuel_price", self.fuel_price)?;
        nonneg("home_charge_price", self.home_charge_price)?;
        if !(self.city_charge_price > self.home_charge_price) {
            return Err(schema("city_charge_price", "must exceed home_charge_price"));
        }
        nonneg("top_up_e1_kwh", self.top_up_e1_kwh)?;
        if !(self.top_up_e0_kwh >= self.top_up_e1_kwh) {
            return Err(schema("top_up_e0_kwh", "must be at least top_up_e1_kwh"));
        }
        if !(0.0..=1.0).contains(&self.ev_share) {
            return Err(schema("ev_share", format!("must lie in [0, 1], got {}", self.ev_share)));
        }
        let [s0, s1] = self.ev_class_split;
        if !(s0 >= 0.0 && s1 >= 0.0 && ((s0 + s1) - 1.0).abs() <= 1e-12) {
            return Err(schema("ev_class_split", "must be nonnegative and sum to 1"));
        }
        for &t in &self.nonflex_totals_mwh {
            nonneg("nonflex_totals_mwh", t)?;
        }
        for &f in self.pt_fares.values() {
            nonneg("pt_fares", f)?;
        }
        nonneg("q", self.q)?;
        if !(self.q_bar >= self.q) || !self.q_bar.is_finite() {
            return Err(schema("q_bar", "must be at least q"));
        }
        positive("threshold_unit_kw", self.threshold_unit_kw)?;
        nonneg("beta", self.beta)?;
        positive("grid_power_unit_kva", self.grid_power_unit_kva)?;
        self.trilevel.validate().map_err(|e| match e {
            Error::Schema { key, message } => schema(&format!("trilevel.{key}"), message),
            other => other,
        })?;
        if self.wardrop.max_sweeps == 0 {
            return Err(schema("wardrop.max_sweeps", "must be positive"));
        }
        if let Some(t) = self.wardrop.tol {
            positive("wardrop.tol", t)?;
        }
        self.baseline.validate()
    }
}

/// Splits each hub's daily total (MWh) over `slots` by a seeded Dirichlet(1)
/// draw; returns kWh per slot with exact sums.
pub fn synthesize_nonflex(totals_mwh: &[f64], slots: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if slots == 0 {
        return Err(Error::Domain("need at least one slot".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    totals_mwh
        .iter()
        .map(|&total| {
            if !(total >= 0.0) || !total.is_finite() {
                return Err(Error::Domain(format!("nonflexible total must be nonnegative, got {total}")));
            }
            let kwh = total * 1000.0;
            let draws: Vec<f64> = (0..slots).map(|_| Exp1.sample(&mut rng)).collect();
            let sum: f64 = draws.iter().sum();
            let mut profile: Vec<f64> = draws.iter().map(|d| kwh * d / sum).collect();
            let head: f64 = profile[..slots - 1].iter().sum();
            profile[slots - 1] = (kwh - head).max(0.0);
            Ok(profile)
        })
        .collect()
}

/// A validated configuration with every model built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub network: NetworkFile,
    pub problem: EquilibriumProblem,
    pub grid: GridCase,
    pub terms: ContractTerms,
    /// Search settings with the run seed applied.
    pub trilevel: TrilevelConfig,
    /// Directory relative file paths in `config` resolve against.
    pub base_dir: PathBuf,
}

impl Scenario {
    /// Builds from a configuration; relative file paths resolve against `base_dir`.
    pub fn build(config: ScenarioConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let read = |p: &Path| {
            let full = if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
            std::fs::read_to_string(&full).map_err(|e| Error::io(full, e))
        };
        let network: NetworkFile = match &config.network_file {
            Some(p) => serde_json::from_str(&read(p)?)?,
            None => NetworkFile::sioux_falls(),
        };
        let grid_file: GridFile = match &config.grid_file {
            Some(p) => serde_json::from_str(&read(p)?)?,
            None => serde_json::from_str(IEEE33)?,
        };

        if config.nonflex_totals_mwh.len() != network.hubs.len() {
            return Err(schema(
                "nonflex_totals_mwh",
                format!("expected {} entries, one per hub", network.hubs.len()),
            ));
        }
        for (key, ids) in [("pt_fares", config.pt_fares.keys().collect::<Vec<_>>()), ("hub_buses", config.hub_buses.keys().collect())] {
            if let Some(id) = ids.iter().find(|id| !network.hubs.iter().any(|h| h.id == ***id)) {
                return Err(schema(key, format!("unknown hub {id}")));
            }
        }
        let profiles = synthesize_nonflex(
            &config.nonflex_totals_mwh,
            config.slots,
            config.nonflex_seed.unwrap_or(config.seed),
        )?;
        let hubs: Vec<Hub> = network
            .hubs
            .iter()
            .zip(profiles)
            .map(|(h, nonflex)| Hub {
                pt_fare_eur: config.pt_fares.get(&h.id).copied().unwrap_or(h.pt_fare_eur),
                bus: config.hub_buses.get(&h.id).copied().unwrap_or(h.bus),
                nonflex_kwh: nonflex,
                ..h.clone()
            })
            .collect();

        let classes = vec![
            VehicleClass::gasoline(config.fuel_consumption_l_per_km, config.fuel_price),
            VehicleClass::ev0(config.ev_consumption_kwh_per_km, config.top_up_e0_kwh),
            VehicleClass::ev1(config.ev_consumption_kwh_per_km, config.top_up_e1_kwh, config.home_charge_price),
        ];
        let x = config.ev_share;
        let [s0, s1] = config.ev_class_split;
        let demands = network
            .od_demands
            .iter()
            .map(|d| OdDemand {
                origin: d.origin,
                destination: d.destination,
                per_class: vec![(1.0 - x) * d.vehicles, x * s0 * d.vehicles, x * s1 * d.vehicles],
            })
            .collect();
        let buses: Vec<usize> = hubs.iter().map(|h| h.bus).collect();
        let transport = TransportScenario::new(
            network.nodes.iter().map(|n| n.id).collect(),
            network.arcs.clone(),
            hubs,
            classes,
            demands,
            config.value_of_time,
            config.city_charge_price,
            config.slots,
        )?;
        let problem = EquilibriumProblem::new(transport, config.k_paths)?;
        for w in &problem.paths().warnings {
            log::warn!("{w}");
        }
        let grid = GridCase::from_file(grid_file)?.with_hub_buses(&buses)?;
        let terms = ContractTerms::new(0.5 * config.trilevel.threshold_max_kw, config.q, config.q_bar)?
            .with_threshold_unit(config.threshold_unit_kw)?;
        let trilevel = TrilevelConfig { seed: config.seed, ..config.trilevel.clone() };
        Ok(Self { config, network, problem, grid, terms, trilevel, base_dir: base_dir.to_path_buf() })
    }

    /// The default evaluation scenario.
    pub fn default_scenario() -> Result<Self> {
        Self::build(ScenarioConfig::default(), Path::new("."))
    }

    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        Self::build(config, Path::new("."))
    }

    /// Grid cost weight per kVA², the unit `GridCase::grid_cost` works in.
    pub fn beta_per_kva2(&self) -> f64 {
        self.config.beta / (self.config.grid_power_unit_kva * self.config.grid_power_unit_kva)
    }

    pub fn model(&self) -> Result<TrilevelModel<'_>> {
        TrilevelModel::new(&self.problem, &self.grid, self.terms.clone(), self.beta_per_kva2(), self.config.wardrop.clone())?
            .with_anchor_spacing(self.trilevel.alpha_max / 64.0)
    }

    pub fn hub_ids(&self) -> Vec<u32> {
        self.problem.scenario().hubs().iter().map(|h| h.id).collect()
    }

    pub fn is_cso(&self) -> Vec<bool> {
        self.problem.scenario().hubs().iter().map(|h| h.is_cso()).collect()
    }

    /// Another configuration resolved against the same base directory.
    pub fn rebuild(&self, config: ScenarioConfig) -> Result<Self> {
        Self::build(config, &self.base_dir)
    }

    /// Copy of the configuration with one change applied, rebuilt.
    pub fn with_config(&self, edit: impl FnOnce(&mut ScenarioConfig)) -> Result<Self> {
        let mut config = self.config.clone();
        edit(&mut config);
        self.rebuild(config)
    }
}

/// Reads, validates and builds a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = ScenarioConfig::from_json(&text)?;
    Scenario::build(config, path.parent().unwrap_or(Path::new(".")))
}
