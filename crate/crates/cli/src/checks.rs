use anyhow::Result;
use ev_trilevel::charging::{qp_oracle, HubChargingCase};
use ev_trilevel::grid::load_ieee33;
use num_complex::Complex64;
use ev_trilevel::scenario::Scenario;
use ev_trilevel::wardrop::{solve_wardrop, uniqueness_probe, wardrop_gap, HubPricing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct SchedulerCheck {
    pub instances: usize,
    pub max_value_relative: f64,
    pub max_slot_kwh: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct PowerFlowCheck {
    pub max_residual_pu: f64,
    pub newton_head_relative: f64,
    pub no_load_flat: bool,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct EquilibriumCheck {
    pub alpha: f64,
    pub gap: f64,
    pub gap_tolerance: f64,
    pub starts: usize,
    pub arc_relative: f64,
    pub need_relative: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub scheduler: SchedulerCheck,
    pub power_flow: PowerFlowCheck,
    pub equilibrium: EquilibriumCheck,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.scheduler.passed && self.power_flow.passed && self.equilibrium.passed
    }

    pub fn lines(&self) -> Vec<String> {
        let tag = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let s = &self.scheduler;
        let p = &self.power_flow;
        let e = &self.equilibrium;
        vec![
            format!(
                "{} scheduler vs QP oracle: {} instances, value rel {:.2e}, slot {:.2e} kWh",
                tag(s.passed),
                s.instances,
                s.max_value_relative,
                s.max_slot_kwh
            ),
            format!(
                "{} power flow: residual {:.2e} pu, Newton head rel {:.2e}, no-load flat {}",
                tag(p.passed),
                p.max_residual_pu,
                p.newton_head_relative,
                p.no_load_flat
            ),
            format!(
                "{} equilibrium at alpha {:.3e}: gap {:.2e} (tol {:.2e}), {} starts, arc rel {:.2e}, need rel {:.2e}",
                tag(e.passed),
                e.alpha,
                e.gap,
                e.gap_tolerance,
                e.starts,
                e.arc_relative,
                e.need_relative
            ),
        ]
    }
}

pub fn run_all(scenario: &Scenario, starts: usize, alpha: f64) -> Result<CheckReport> {
    Ok(CheckReport { scheduler: scheduler(100, scenario.config.seed)?, power_flow: power_flow()?, equilibrium: equilibrium(scenario, starts, alpha)? })
}

fn scheduler(instances: usize, seed: u64) -> Result<SchedulerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_value_relative: f64 = 0.0;
    let mut max_slot_kwh: f64 = 0.0;
    for _ in 0..instances {
        let t = rng.random_range(1..=12);
        let nonflex: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..300.0)).collect();
        let need = rng.random_range(0.0..1500.0);
        let case = HubChargingCase::new(&nonflex)?;
        let profile = case.waterfill_profile(need)?;
        let value = case.waterfill_value(need)?;
        let (oracle, oracle_value) = qp_oracle(&nonflex, need);
        max_value_relative = max_value_relative.max((value - oracle_value).abs() / oracle_value.abs().max(1e-300));
        for (a, b) in profile.charging.iter().zip(&oracle) {
            max_slot_kwh = max_slot_kwh.max((a - b).abs());
        }
    }
    Ok(SchedulerCheck { instances, max_value_relative, max_slot_kwh, passed: max_value_relative <= 1e-8 && max_slot_kwh <= 1e-6 })
}

fn power_flow() -> Result<PowerFlowCheck> {
    let grid = load_ieee33()?;
    let base = grid.base_injections(0);
    let sweep = grid.solve_power_flow(&base)?;
    let newton = grid.solve_power_flow_newton(&base)?;
    let newton_head_relative =
        (sweep.head_apparent_power() - newton.head_apparent_power()).abs() / sweep.head_apparent_power();
    let zero = vec![Complex64::new(0.0, 0.0); grid.bus_count()];
    let idle = grid.solve_power_flow(&zero)?;
    let no_load_flat = idle.head_apparent_power() == 0.0 && idle.voltages.iter().all(|v| *v == Complex64::new(1.0, 0.0));
    let max_residual_pu = sweep.residual.max(newton.residual);
    Ok(PowerFlowCheck {
        max_residual_pu,
        newton_head_relative,
        no_load_flat,
        passed: max_residual_pu <= 1e-8 && newton_head_relative <= 1e-6 && no_load_flat,
    })
}

fn equilibrium(scenario: &Scenario, starts: usize, alpha: f64) -> Result<EquilibriumCheck> {
    let pricing = HubPricing::lmp(alpha)?;
    let problem = &scenario.problem;
    let options = &scenario.config.wardrop;
    let eq = solve_wardrop(problem, &pricing, options, None)?;
    let gap = wardrop_gap(problem, &eq.flows, &pricing)?;
    let report = uniqueness_probe(problem, &pricing, starts, scenario.config.seed, options)?;
    let passed = gap <= eq.tol && report.arc_relative <= 1e-5 && report.need_relative <= 1e-5;
    Ok(EquilibriumCheck {
        alpha,
        gap,
        gap_tolerance: eq.tol,
        starts,
        arc_relative: report.arc_relative,
        need_relative: report.need_relative,
        passed,
    })
}
