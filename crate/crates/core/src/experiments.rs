//! Parameter sweeps, the baseline comparison and the files a run leaves
//! behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{baseline_fixed_point, schedule_for_mode, write_comparison, ComparisonRow, ScheduleMode};
use crate::charging::ChargingProfile;
use crate::error::{Error, Result};
use crate::operators::{hub_profiles, write_payoffs, PayoffBreakdown};
use crate::scenario::{Scenario, ScenarioConfig};
use crate::trilevel::{trilevel_solve, write_trace, TraceRow, TrilevelSolution};
use crate::wardrop::{write_needs, write_path_flows, HubPricing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParameter {
    /// EV share `X_e`.
    EvShare,
    /// Fare of every hub not listed in `fixed_fares`.
    PtFare,
    /// Baseline price conversion factor.
    AlphaTilde,
}

impl SweptParameter {
    pub fn label(self) -> &'static str {
        match self {
            SweptParameter::EvShare => "X_e",
            SweptParameter::PtFare => "pt_fare",
            SweptParameter::AlphaTilde => "alpha_tilde",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Trilevel,
    LmpPc,
    LmpSc,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Trilevel => "trilevel",
            Method::LmpPc => "lmp_pc",
            Method::LmpSc => "lmp_sc",
        }
    }

    fn mode(self) -> Option<ScheduleMode> {
        match self {
            Method::Trilevel => None,
            Method::LmpPc => Some(ScheduleMode::PlugAndCharge),
            Method::LmpSc => Some(ScheduleMode::Smart),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweptParameter,
    pub values: Vec<f64>,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Fares held fixed during a fare sweep, by hub id.
    #[serde(default)]
    pub fixed_fares: BTreeMap<u32, f64>,
}

fn default_method() -> Method {
    Method::Trilevel
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Err(Error::Schema { key: "values".into(), message: message.into() });
        if self.values.is_empty() {
            return bad("sweep grid is empty");
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return bad("sweep values must be finite");
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep values must be strictly increasing");
        }
        if self.parameter == SweptParameter::AlphaTilde && self.method == Method::Trilevel {
            return Err(Error::Schema {
                key: "method".into(),
                message: "alpha_tilde only affects the baseline methods".into(),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Schema { key: "sweep".into(), message: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    /// The scenario configuration at one grid value.
    pub fn apply(&self, base: &ScenarioConfig, hub_ids: &[u32], value: f64) -> ScenarioConfig {
        let mut c = base.clone();
        match self.parameter {
            SweptParameter::EvShare => c.ev_share = value,
            SweptParameter::PtFare => {
                for &id in hub_ids {
                    let fare = self.fixed_fares.get(&id).copied().unwrap_or(value);
                    c.pt_fares.insert(id, fare);
                }
            }
            SweptParameter::AlphaTilde => c.baseline.alpha_tilde = value,
        }
        c
    }
}

/// One `(hub, slot)` entry of a charging profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub hub: u32,
    pub slot: usize,
    pub ell_star_kwh: f64,
    pub ell_nonflex_kwh: f64,
    pub method: String,
}

pub fn profile_rows(hub_ids: &[u32], profiles: &[ChargingProfile], nonflex: &[&[f64]], method: &str) -> Vec<ProfileRow> {
    let mut rows = Vec::new();
    for ((&hub, p), n) in hub_ids.iter().zip(profiles).zip(nonflex) {
        for (slot, (&l, &l0)) in p.charging.iter().zip(n.iter()).enumerate() {
            rows.push(ProfileRow { hub, slot: slot + 1, ell_star_kwh: l, ell_nonflex_kwh: l0, method: method.into() });
        }
    }
    rows
}

/// Per-point outcome of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param_value: f64,
    pub method: Method,
    pub threshold: Option<f64>,
    pub alpha: Option<f64>,
    pub pi_up: Option<f64>,
    pub pi_mid: Option<f64>,
    pub needs: Vec<f64>,
    pub grid_cost: Option<f64>,
    pub revenue: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    /// `None` when the point solved; the error otherwise.
    pub error: Option<String>,
}

impl SweepRow {
    /// `L_i / Σ L_j`, or `None` when nothing is charged.
    pub fn normalized_needs(&self) -> Option<Vec<f64>> {
        let total: f64 = self.needs.iter().sum();
        (total > 0.0).then(|| self.needs.iter().map(|l| l / total).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub row: SweepRow,
    pub trace: Vec<TraceRow>,
    pub profiles: Vec<ProfileRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResults {
    pub spec: SweepSpec,
    pub hub_ids: Vec<u32>,
    pub points: Vec<SweepPoint>,
}

fn nonflex_of(scenario: &Scenario) -> Vec<&[f64]> {
    scenario.problem.cases().iter().map(|c| c.nonflex()).collect()
}

fn trilevel_point(scenario: &Scenario, value: f64) -> Result<SweepPoint> {
    let model = scenario.model()?;
    let sol = trilevel_solve(&model, &scenario.trilevel)?;
    let profiles = hub_profiles(sol.needs(), scenario.problem.cases(), &scenario.is_cso())?;
    Ok(SweepPoint {
        row: SweepRow {
            param_value: value,
            method: Method::Trilevel,
            threshold: Some(sol.threshold),
            alpha: Some(sol.alpha),
            pi_up: Some(sol.payoffs.pi_up),
            pi_mid: Some(sol.payoffs.pi_mid),
            needs: sol.needs().to_vec(),
            grid_cost: Some(sol.payoffs.grid_term),
            revenue: Some(sol.payoffs.revenue()),
            iterations: Some(sol.bounding.outer_iterations),
            converged: Some(true),
            error: None,
        },
        profiles: profile_rows(&scenario.hub_ids(), &profiles, &nonflex_of(scenario), Method::Trilevel.label()),
        trace: sol.bounding.trace,
    })
}

fn baseline_point(scenario: &Scenario, value: f64, method: Method) -> Result<SweepPoint> {
    let mode = method.mode().expect("baseline method");
    let run = baseline_fixed_point(
        &scenario.problem,
        &scenario.grid,
        scenario.beta_per_kva2(),
        mode,
        &scenario.config.baseline,
        &scenario.config.wardrop,
    )?;
    Ok(SweepPoint {
        row: SweepRow {
            param_value: value,
            method,
            threshold: None,
            alpha: None,
            pi_up: None,
            pi_mid: None,
            needs: run.needs.clone(),
            grid_cost: Some(run.grid_cost),
            revenue: Some(run.revenue),
            iterations: Some(run.iterations),
            converged: Some(run.converged),
            error: None,
        },
        profiles: profile_rows(&scenario.hub_ids(), &run.profiles, &nonflex_of(scenario), method.label()),
        trace: Vec::new(),
    })
}

/// Solves every grid point independently (in parallel on the current rayon
/// pool). A failing point is recorded in its row and the sweep continues.
pub fn run_sweep(base: &Scenario, spec: &SweepSpec) -> Result<SweepResults> {
    spec.validate()?;
    let hub_ids = base.hub_ids();
    let points = spec
        .values
        .par_iter()
        .map(|&value| {
            let config = spec.apply(&base.config, &hub_ids, value);
            let outcome = base.rebuild(config).and_then(|s| match spec.method {
                Method::Trilevel => trilevel_point(&s, value),
                m => baseline_point(&s, value, m),
            });
            outcome.unwrap_or_else(|e| {
                log::warn!("sweep point {value}: {e}");
                SweepPoint {
                    row: SweepRow {
                        param_value: value,
                        method: spec.method,
                        threshold: None,
                        alpha: None,
                        pi_up: None,
                        pi_mid: None,
                        needs: Vec::new(),
                        grid_cost: None,
                        revenue: None,
                        iterations: None,
                        converged: None,
                        error: Some(e.to_string()),
                    },
                    trace: Vec::new(),
                    profiles: Vec::new(),
                }
            })
        })
        .collect();
    Ok(SweepResults { spec: spec.clone(), hub_ids, points })
}

/// Trilevel and baseline grid cost and revenue at each EV share. Baselines run
/// in smart-charging mode for every `sc_alpha_tildes` entry and in plug and
/// charge mode for every `pc_alpha_tildes` entry.
pub fn run_comparison(
    base: &Scenario,
    ev_shares: &[f64],
    sc_alpha_tildes: &[f64],
    pc_alpha_tildes: &[f64],
) -> Result<Vec<ComparisonRow>> {
    let mut jobs: Vec<(f64, Method, Option<f64>)> = Vec::new();
    for &x in ev_shares {
        jobs.push((x, Method::Trilevel, None));
        jobs.extend(sc_alpha_tildes.iter().map(|&a| (x, Method::LmpSc, Some(a))));
        jobs.extend(pc_alpha_tildes.iter().map(|&a| (x, Method::LmpPc, Some(a))));
    }
    jobs.par_iter()
        .map(|&(x, method, alpha_tilde)| {
            let scenario = base.with_config(|c| {
                c.ev_share = x;
                if let Some(a) = alpha_tilde {
                    c.baseline.alpha_tilde = a;
                }
            })?;
            let point = match method {
                Method::Trilevel => trilevel_point(&scenario, x),
                m => baseline_point(&scenario, x, m),
            };
            let mut row = ComparisonRow {
                method: method.label().into(),
                alpha_tilde,
                ev_share: x,
                grid_cost: f64::NAN,
                charging_revenue: f64::NAN,
                converged: false,
                iterations: 0,
                error: None,
            };
            match point {
                Ok(p) => {
                    row.grid_cost = p.row.grid_cost.unwrap_or(f64::NAN);
                    row.charging_revenue = p.row.revenue.unwrap_or(f64::NAN);
                    row.converged = p.row.converged.unwrap_or(false);
                    row.iterations = p.row.iterations.unwrap_or(0);
                }
                Err(e) => {
                    log::warn!("{} at X_e = {x}: {e}", method.label());
                    row.error = Some(e.to_string());
                }
            }
            Ok(row)
        })
        .collect()
}

/// Profiles of the three methods at one set of needs: water-filling at CSO
/// hubs (the trilevel schedule), grid-aware smart charging, plug and charge.
pub fn compare_profiles(scenario: &Scenario, needs: &[f64]) -> Result<Vec<ProfileRow>> {
    let cases = scenario.problem.cases();
    let is_cso = scenario.is_cso();
    let ids = scenario.hub_ids();
    let nonflex = nonflex_of(scenario);
    let mut rows = profile_rows(&ids, &hub_profiles(needs, cases, &is_cso)?, &nonflex, Method::Trilevel.label());
    for method in [Method::LmpSc, Method::LmpPc] {
        let s = schedule_for_mode(
            method.mode().expect("baseline method"),
            needs,
            cases,
            &is_cso,
            &scenario.grid,
            scenario.beta_per_kva2(),
            &scenario.config.baseline.schedule,
        )?;
        rows.extend(profile_rows(&ids, &s.profiles, &nonflex, method.label()));
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep<W: std::io::Write>(out: W, results: &SweepResults) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["param_value", "P_star", "alpha_star", "Pi_up", "Pi_mid"].map(String::from).to_vec();
    header.extend(results.hub_ids.iter().map(|id| format!("L_{id}")));
    header.extend(results.hub_ids.iter().map(|id| format!("Ltilde_{id}")));
    header.extend(["grid_cost", "revenue", "method", "iterations", "converged", "error"].map(String::from));
    w.write_record(&header)?;
    for p in &results.points {
        let r = &p.row;
        let mut rec = vec![r.param_value.to_string(), opt(r.threshold), opt(r.alpha), opt(r.pi_up), opt(r.pi_mid)];
        let n = results.hub_ids.len();
        match r.needs.len() {
            0 => rec.extend(std::iter::repeat_n(String::new(), n)),
            _ => rec.extend(r.needs.iter().map(|l| l.to_string())),
        }
        match r.normalized_needs() {
            Some(t) => rec.extend(t.iter().map(|l| l.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), n)),
        }
        rec.push(opt(r.grid_cost));
        rec.push(opt(r.revenue));
        rec.push(r.method.label().into());
        rec.push(r.iterations.map(|i| i.to_string()).unwrap_or_default());
        rec.push(r.converged.map(|c| c.to_string()).unwrap_or_default());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("sweep", e))?;
    Ok(())
}

pub fn write_profiles<W: std::io::Write>(out: W, rows: &[ProfileRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["hub", "slot", "ell_star_kwh", "ell_nonflex_kwh", "method"])?;
    }
    w.flush().map_err(|e| Error::io("profiles", e))?;
    Ok(())
}

/// Everything a command produced, ready to be written.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub sweep: Option<SweepResults>,
    pub solve: Option<(TrilevelSolution, Vec<ProfileRow>)>,
    pub comparison: Option<Vec<ComparisonRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub files: Vec<ManifestEntry>,
}

pub fn config_hash(config: &ScenarioConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

struct Emitter<'a> {
    dir: &'a Path,
    files: Vec<ManifestEntry>,
}

impl Emitter<'_> {
    fn emit(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        self.files.push(ManifestEntry { file: name.into(), sha256: hex::encode(Sha256::digest(&buf)) });
        Ok(())
    }
}

fn solve_files(e: &mut Emitter<'_>, scenario: &Scenario, sol: &TrilevelSolution, profiles: &[ProfileRow]) -> Result<()> {
    let pricing = HubPricing::lmp(sol.alpha)?;
    e.emit("trace.csv", |b| write_trace(b, &sol.bounding.trace))?;
    e.emit("profiles.csv", |b| write_profiles(b, profiles))?;
    e.emit("payoffs.csv", |b| write_payoffs(b, std::slice::from_ref::<PayoffBreakdown>(&sol.payoffs), &scenario.hub_ids()))?;
    e.emit("needs.csv", |b| write_needs(b, &scenario.problem, sol.needs()))?;
    e.emit("path_flows.csv", |b| write_path_flows(b, &scenario.problem, &sol.equilibrium, &pricing))
}

/// Writes the CSVs of `outputs` under `out_dir` plus `manifest.json` with the
/// configuration hash, the seed and a checksum per file.
pub fn emit_outputs(outputs: &RunOutputs, scenario: &Scenario, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut e = Emitter { dir: out_dir, files: Vec::new() };
    if let Some((sol, profiles)) = &outputs.solve {
        solve_files(&mut e, scenario, sol, profiles)?;
    }
    if let Some(sweep) = &outputs.sweep {
        e.emit("sweep.csv", |b| write_sweep(b, sweep))?;
        for (i, p) in sweep.points.iter().enumerate() {
            if !p.trace.is_empty() {
                e.emit(&format!("traces/point_{i:03}.csv"), |b| write_trace(b, &p.trace))?;
            }
            if !p.profiles.is_empty() {
                e.emit(&format!("profiles/point_{i:03}.csv"), |b| write_profiles(b, &p.profiles))?;
            }
        }
    }
    if let Some(rows) = &outputs.comparison {
        e.emit("comparison.csv", |b| write_comparison(b, rows))?;
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: scenario.config.seed,
        config_sha256: config_hash(&scenario.config)?,
        files: e.files,
    };
    let path: PathBuf = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|err| Error::io(&path, err))?;
    Ok(manifest)
}
