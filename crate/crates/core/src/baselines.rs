//! Reference methods that price charging at the grid's true marginal cost
//! and iterate between prices and driver equilibrium: LMP with plug and
//! charge (P&C) and LMP with grid-aware smart charging (SC).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::charging::{ChargingProfile, HubChargingCase};
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::operators::{grid_costs, plug_and_charge};
use crate::wardrop::{solve_wardrop, EquilibriumProblem, HubPricing, WardropOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Conversion from marginal grid cost to charging price.
    pub alpha_tilde: f64,
    /// Damping of the need update; 1 is the undamped iteration.
    pub theta: f64,
    /// Fixed-point tolerance on the needs, kWh.
    pub tol_kwh: f64,
    pub max_iter: usize,
    /// Finite-difference step for the marginal grid cost, kWh.
    pub fd_step_kwh: f64,
    /// Grid cost weight used for prices, € per kVA².
    pub price_beta: f64,
    pub schedule: ScheduleOptions,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { alpha_tilde: 0.01, theta: 0.5, tol_kwh: 0.1, max_iter: 60, fd_step_kwh: 1.0, price_beta: 1e-3, schedule: ScheduleOptions::default() }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Schema { key: format!("baseline.{key}"), message: message.into() });
        if !(self.alpha_tilde >= 0.0) {
            return bad("alpha_tilde", "must be nonnegative");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta", "must lie in (0, 1]");
        }
        if !(self.tol_kwh > 0.0) || self.max_iter == 0 {
            return bad("tol_kwh", "tolerance and iteration cap must be positive");
        }
        if !(self.fd_step_kwh > 0.0) {
            return bad("fd_step_kwh", "must be positive");
        }
        if !(self.price_beta >= 0.0) {
            return bad("price_beta", "must be nonnegative");
        }
        Ok(())
    }
}

/// The two preset conversion factors of the comparison.
pub const ALPHA_TILDE_PRESETS: [f64; 2] = [0.01, 0.03];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    PlugAndCharge,
    Smart,
}

impl ScheduleMode {
    pub fn label(self) -> &'static str {
        match self {
            ScheduleMode::PlugAndCharge => "lmp_pc",
            ScheduleMode::Smart => "lmp_sc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleOptions {
    pub max_iter: usize,
    /// Stop when no slot load moves by more than this, kWh.
    pub step_tol_kwh: f64,
    /// Perturbation for the slot gradients, kW.
    pub gradient_step_kw: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self { max_iter: 400, step_tol_kwh: 1e-7, gradient_step_kw: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub profiles: Vec<ChargingProfile>,
    /// `β·Σ_t G_t`, €.
    pub objective: f64,
    /// `‖ℓ − Π(ℓ − ∇)‖∞` at the returned point, kWh.
    pub stationarity: f64,
    pub iterations: usize,
    pub warning: Option<String>,
}

/// Euclidean projection onto `{x ≥ 0, Σx = total}`.
pub fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    if total <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - total) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

struct Objective<'a> {
    grid: &'a GridCase,
    cases: &'a [HubChargingCase],
    beta: f64,
    h: f64,
}

impl Objective<'_> {
    fn slots(&self) -> usize {
        self.cases.first().map_or(0, HubChargingCase::slots)
    }

    fn value(&self, x: &[Vec<f64>]) -> Result<f64> {
        let profiles: Vec<ChargingProfile> =
            x.iter().zip(self.cases).map(|(c, case)| ChargingProfile::from_charging(c.clone(), case.nonflex())).collect();
        Ok(self.beta * grid_costs(self.grid, self.cases, &profiles)?.iter().sum::<f64>())
    }

    fn totals(&self, x: &[Vec<f64>], t: usize) -> Vec<f64> {
        x.iter().zip(self.cases).map(|(c, case)| c[t] + case.nonflex()[t]).collect()
    }

    fn gradient(&self, x: &[Vec<f64>], flexible: &[bool]) -> Result<Vec<Vec<f64>>> {
        let mut g = vec![vec![0.0; self.slots()]; x.len()];
        for t in 0..self.slots() {
            let base = self.totals(x, t);
            let s0 = self.grid.head_power(t, &base)?;
            for i in 0..x.len() {
                if !flexible[i] {
                    continue;
                }
                let mut up = base.clone();
                up[i] += self.h;
                let su = self.grid.head_power(t, &up)?;
                g[i][t] = if base[i] >= self.h {
                    let mut down = base.clone();
                    down[i] -= self.h;
                    let sd = self.grid.head_power(t, &down)?;
                    self.beta * (su * su - sd * sd) / (2.0 * self.h)
                } else {
                    self.beta * (su * su - s0 * s0) / self.h
                };
            }
        }
        Ok(g)
    }
}

fn project_all(x: &[Vec<f64>], needs: &[f64], flexible: &[bool]) -> Vec<Vec<f64>> {
    x.iter()
        .zip(needs)
        .zip(flexible)
        .map(|((row, &l), &f)| if f { project_simplex(row, l) } else { row.clone() })
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Charging profiles minimising `β·Σ_t G_t` over hubs marked `flexible`
/// (others plug and charge), by projected gradient with Barzilai-Borwein
/// steps and Armijo backtracking. Starts from the better of water-filling and
/// plug and charge, so it never does worse than either.
pub fn grid_aware_schedule(
    needs: &[f64],
    cases: &[HubChargingCase],
    flexible: &[bool],
    grid: &GridCase,
    beta: f64,
    options: &ScheduleOptions,
) -> Result<Schedule> {
    if needs.len() != cases.len() || flexible.len() != cases.len() || grid.hub_buses().len() != cases.len() {
        return Err(Error::Contract("one need, case, flag and bus per hub expected".into()));
    }
    if let Some(l) = needs.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Domain(format!("charging need must be nonnegative, got {l}")));
    }
    let obj = Objective { grid, cases, beta, h: options.gradient_step_kw };
    let pc: Vec<Vec<f64>> = needs
        .iter()
        .zip(cases)
        .map(|(&l, c)| plug_and_charge(l, c).map(|p| p.charging))
        .collect::<Result<_>>()?;
    let wf: Vec<Vec<f64>> = needs
        .iter()
        .zip(cases)
        .zip(flexible)
        .map(|((&l, c), &f)| if f { c.waterfill_profile(l).map(|p| p.charging) } else { Ok(pc_row(l, c)) })
        .collect::<Result<_>>()?;
    let (f_pc, f_wf) = (obj.value(&pc)?, obj.value(&wf)?);
    let (mut x, mut fx) = if f_wf <= f_pc { (wf, f_wf) } else { (pc, f_pc) };

    let mut g = obj.gradient(&x, flexible)?;
    let mut step = {
        let gmax = g.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        let lmax = needs.iter().copied().fold(0.0, f64::max);
        if gmax > 0.0 { lmax.max(1.0) / gmax } else { 1.0 }
    };
    let mut warning = None;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let mut trial_step = step;
        let mut accepted = None;
        for _ in 0..40 {
            let moved: Vec<Vec<f64>> = x
                .iter()
                .zip(&g)
                .map(|(r, gr)| r.iter().zip(gr).map(|(a, b)| a - trial_step * b).collect())
                .collect();
            let y = project_all(&moved, needs, flexible);
            let descent: f64 = y.iter().flatten().zip(x.iter().flatten()).zip(g.iter().flatten()).map(|((a, b), c)| (a - b) * c).sum();
            let fy = obj.value(&y)?;
            if fy <= fx + 1e-4 * descent || max_diff(&y, &x) <= options.step_tol_kwh {
                accepted = Some((y, fy));
                break;
            }
            trial_step *= 0.5;
        }
        let Some((y, fy)) = accepted else {
            warning = Some(format!("no descent after backtracking at iteration {iterations}"));
            break;
        };
        let moved = max_diff(&y, &x);
        let gy = obj.gradient(&y, flexible)?;
        let (mut ss, mut sy) = (0.0, 0.0);
        for ((a, b), (ga, gb)) in y.iter().flatten().zip(x.iter().flatten()).zip(gy.iter().flatten().zip(g.iter().flatten())) {
            ss += (a - b) * (a - b);
            sy += (a - b) * (ga - gb);
        }
        if fy <= fx {
            x = y;
            fx = fy;
            g = gy;
        }
        if moved <= options.step_tol_kwh {
            break;
        }
        step = if sy > 0.0 { ss / sy } else { step * 2.0 };
    }
    let moved: Vec<Vec<f64>> = x.iter().zip(&g).map(|(r, gr)| r.iter().zip(gr).map(|(a, b)| a - b).collect()).collect();
    let stationarity = max_diff(&x, &project_all(&moved, needs, flexible));
    if warning.is_none() && iterations >= options.max_iter {
        warning = Some(format!("iteration cap {} reached, stationarity {stationarity:.3e}", options.max_iter));
    }
    if let Some(w) = &warning {
        log::warn!("grid-aware schedule: {w}");
    }
    let profiles = x.into_iter().zip(cases).map(|(c, case)| ChargingProfile::from_charging(c, case.nonflex())).collect();
    Ok(Schedule { profiles, objective: fx, stationarity, iterations, warning })
}

fn pc_row(need: f64, case: &HubChargingCase) -> Vec<f64> {
    let mut row = vec![0.0; case.slots()];
    row[0] = need;
    row
}

/// Profiles under a scheduling mode: all hubs plug and charge, or CSO hubs
/// grid-aware scheduled and the others plug and charge.
pub fn schedule_for_mode(
    mode: ScheduleMode,
    needs: &[f64],
    cases: &[HubChargingCase],
    is_cso: &[bool],
    grid: &GridCase,
    beta: f64,
    options: &ScheduleOptions,
) -> Result<Schedule> {
    match mode {
        ScheduleMode::PlugAndCharge => {
            let profiles: Vec<ChargingProfile> =
                needs.iter().zip(cases).map(|(&l, c)| plug_and_charge(l, c)).collect::<Result<_>>()?;
            let objective = beta * grid_costs(grid, cases, &profiles)?.iter().sum::<f64>();
            Ok(Schedule { profiles, objective, stationarity: 0.0, iterations: 0, warning: None })
        }
        ScheduleMode::Smart => grid_aware_schedule(needs, cases, is_cso, grid, beta, options),
    }
}

/// Grid-derived charging price per hub: `α̃ · d(β·ΣG_t)/dL_i` with
/// `β = config.price_beta`, by central differences that re-run the scheduler
/// at `L ± h·e_i` (forward differences when `L_i < h`). Zero at hubs not
/// marked `is_cso`.
pub fn true_lmp(
    needs: &[f64],
    cases: &[HubChargingCase],
    is_cso: &[bool],
    grid: &GridCase,
    mode: ScheduleMode,
    config: &BaselineConfig,
) -> Result<Vec<f64>> {
    let beta = config.price_beta;
    let mut prices = vec![0.0; needs.len()];
    if config.alpha_tilde == 0.0 {
        return Ok(prices);
    }
    let f = |l: &[f64]| schedule_for_mode(mode, l, cases, is_cso, grid, beta, &config.schedule).map(|s| s.objective);
    let h = config.fd_step_kwh;
    let base = f(needs)?;
    for i in 0..needs.len() {
        if !is_cso[i] {
            continue;
        }
        let mut up = needs.to_vec();
        up[i] += h;
        let fu = f(&up)?;
        let slope = if needs[i] >= h {
            let mut down = needs.to_vec();
            down[i] -= h;
            (fu - f(&down)?) / (2.0 * h)
        } else {
            (fu - base) / h
        };
        prices[i] = config.alpha_tilde * slope.max(0.0);
    }
    Ok(prices)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineIterate {
    pub needs: Vec<f64>,
    pub prices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub mode: ScheduleMode,
    pub alpha_tilde: f64,
    pub trajectory: Vec<BaselineIterate>,
    pub converged: bool,
    pub iterations: usize,
    pub needs: Vec<f64>,
    pub prices: Vec<f64>,
    pub profiles: Vec<ChargingProfile>,
    /// `β·ΣG_t` under the mode's schedule of the final needs, €.
    pub grid_cost: f64,
    /// `Σ λ_i·L_i` over CSO hubs, €.
    pub revenue: f64,
}

/// `beta` weighs the reported grid cost (€ per kVA²); prices use
/// `config.price_beta`.
///
/// Price/equilibrium fixed point from `L = 0`:
/// `λ⁽ᵏ⁾ = true_lmp(L⁽ᵏ⁾)`, `L⁽ᵏ⁺¹⁾ = (1−θ)·L⁽ᵏ⁾ + θ·L_WE(λ⁽ᵏ⁾)`, until the
/// needs move by at most `tol_kwh`. Non-convergence is reported, not an error.
pub fn baseline_fixed_point(
    problem: &EquilibriumProblem,
    grid: &GridCase,
    beta: f64,
    mode: ScheduleMode,
    config: &BaselineConfig,
    wardrop: &WardropOptions,
) -> Result<BaselineRun> {
    config.validate()?;
    let cases = problem.cases();
    let is_cso: Vec<bool> = problem.scenario().hubs().iter().map(|h| h.is_cso()).collect();
    let mut needs = vec![0.0; cases.len()];
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut start = None;
    while iterations < config.max_iter {
        iterations += 1;
        let prices = true_lmp(&needs, cases, &is_cso, grid, mode, config)?;
        let eq = solve_wardrop(problem, &HubPricing::Fixed(prices.clone()), wardrop, start.as_ref())?;
        let next: Vec<f64> =
            needs.iter().zip(eq.needs()).map(|(l, w)| (1.0 - config.theta) * l + config.theta * w).collect();
        let change = next.iter().zip(&needs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        trajectory.push(BaselineIterate { needs: needs.clone(), prices });
        start = Some(eq.flows);
        needs = next;
        if change <= config.tol_kwh {
            converged = true;
            break;
        }
    }
    let prices = true_lmp(&needs, cases, &is_cso, grid, mode, config)?;
    let schedule = schedule_for_mode(mode, &needs, cases, &is_cso, grid, beta, &config.schedule)?;
    let revenue = needs.iter().zip(&prices).zip(&is_cso).filter(|(_, &c)| c).map(|((l, p), _)| l * p).sum();
    Ok(BaselineRun {
        mode,
        alpha_tilde: config.alpha_tilde,
        trajectory,
        converged,
        iterations,
        needs,
        prices,
        profiles: schedule.profiles,
        grid_cost: schedule.objective,
        revenue,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub alpha_tilde: Option<f64>,
    pub ev_share: f64,
    pub grid_cost: f64,
    pub charging_revenue: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Why the run produced no numbers, if it failed.
    pub error: Option<String>,
}

/// Writes `method,alpha_tilde,X_e,grid_cost,charging_revenue,converged,iterations,error`.
pub fn write_comparison<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "alpha_tilde", "X_e", "grid_cost", "charging_revenue", "converged", "iterations", "error"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.alpha_tilde.map(|a| a.to_string()).unwrap_or_default(),
            r.ev_share.to_string(),
            r.grid_cost.to_string(),
            r.charging_revenue.to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("comparison", e))?;
    Ok(())
}
