//! Supply contract billing, CSO and ENO payoffs.

use std::io::Write;

use crate::charging::{ChargingProfile, HubChargingCase};
use crate::error::{Error, Result};
use crate::grid::GridCase;

/// Two-tier supply contract set by the ENO.
///
/// Energy below the threshold `P` is billed `μ(P) = q·P/u` per kWh and the
/// excess `μ̄(P) = q̄·P/u`, where `u` (`threshold_unit_kw`) is the unit in
/// which `P` enters the price law (1 kW by default; 1000 reads `q` per MW).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractTerms {
    pub threshold_kw: f64,
    pub q: f64,
    pub q_bar: f64,
    pub threshold_unit_kw: f64,
}

impl ContractTerms {
    pub fn new(threshold_kw: f64, q: f64, q_bar: f64) -> Result<Self> {
        let terms = Self { threshold_kw, q, q_bar, threshold_unit_kw: 1.0 };
        terms.validate()?;
        Ok(terms)
    }

    pub fn with_threshold_unit(mut self, unit_kw: f64) -> Result<Self> {
        self.threshold_unit_kw = unit_kw;
        self.validate()?;
        Ok(self)
    }

    /// Same coefficients, another threshold.
    pub fn at(&self, threshold_kw: f64) -> Result<Self> {
        let terms = Self { threshold_kw, ..*self };
        terms.validate()?;
        Ok(terms)
    }

    fn validate(&self) -> Result<()> {
        if !(self.threshold_kw >= 0.0) || !self.threshold_kw.is_finite() {
            return Err(Error::Domain(format!("contract threshold must be nonnegative, got {}", self.threshold_kw)));
        }
        if !(self.q > 0.0) || !(self.q_bar > self.q) {
            return Err(Error::Domain(format!(
                "contract coefficients need q_bar > q > 0, got q = {}, q_bar = {}",
                self.q, self.q_bar
            )));
        }
        if !(self.threshold_unit_kw > 0.0) {
            return Err(Error::Domain("threshold unit must be positive".into()));
        }
        Ok(())
    }

    /// `μ(P)`, €/kWh.
    pub fn base_price(&self) -> f64 {
        self.q * self.threshold_kw / self.threshold_unit_kw
    }

    /// `μ̄(P)`, €/kWh.
    pub fn excess_price(&self) -> f64 {
        self.q_bar * self.threshold_kw / self.threshold_unit_kw
    }
}

/// Bill for a total hub load in one slot.
pub fn supply_cost_slot(total_load: f64, terms: &ContractTerms) -> Result<f64> {
    if !(total_load >= 0.0) {
        return Err(Error::Domain(format!("slot load must be nonnegative, got {total_load}")));
    }
    Ok(slot_bill(total_load, terms))
}

fn slot_bill(total: f64, terms: &ContractTerms) -> f64 {
    let p = terms.threshold_kw;
    terms.base_price() * total.min(p) + terms.excess_price() * (total - p).max(0.0)
}

/// Share of each slot's bill attributable to charging (pro rata of the load).
pub fn charging_supply_cost(profile: &ChargingProfile, terms: &ContractTerms) -> Vec<f64> {
    profile
        .charging
        .iter()
        .zip(&profile.total)
        .map(|(&c, &tot)| if c > 0.0 && tot > 0.0 { c / tot * slot_bill(tot, terms) } else { 0.0 })
        .collect()
}

/// Charging profile each hub would draw for a vector of needs: water-filling
/// at CSO hubs, everything in the first slot (plug and charge) elsewhere.
pub fn hub_profiles(needs: &[f64], cases: &[HubChargingCase], is_cso: &[bool]) -> Result<Vec<ChargingProfile>> {
    check_lengths(needs, cases, is_cso)?;
    needs
        .iter()
        .zip(cases)
        .zip(is_cso)
        .map(|((&need, case), &cso)| {
            if cso {
                case.waterfill_profile(need)
            } else {
                plug_and_charge(need, case)
            }
        })
        .collect()
}

/// Whole need in the first slot.
pub fn plug_and_charge(need: f64, case: &HubChargingCase) -> Result<ChargingProfile> {
    if !(need >= 0.0) {
        return Err(Error::Domain(format!("charging need must be nonnegative, got {need}")));
    }
    let mut charging = vec![0.0; case.slots()];
    charging[0] = need;
    Ok(ChargingProfile::from_charging(charging, case.nonflex()))
}

fn check_lengths(needs: &[f64], cases: &[HubChargingCase], is_cso: &[bool]) -> Result<()> {
    if needs.len() != cases.len() || cases.len() != is_cso.len() {
        return Err(Error::Contract("needs, hub cases and ownership must have one entry per hub".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HubPayoff {
    pub hub: usize,
    pub need: f64,
    pub price: f64,
    pub revenue: f64,
    pub supply_costs: Vec<f64>,
}

impl HubPayoff {
    pub fn supply_cost(&self) -> f64 {
        self.supply_costs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffBreakdown {
    pub alpha: f64,
    pub threshold_kw: f64,
    /// CSO hubs only.
    pub hubs: Vec<HubPayoff>,
    pub pi_mid: f64,
    /// `G_t` per slot, kVA².
    pub grid_costs: Vec<f64>,
    /// `β·Σ_t G_t`.
    pub grid_term: f64,
    pub pi_up: f64,
}

impl PayoffBreakdown {
    pub fn revenue(&self) -> f64 {
        self.hubs.iter().map(|h| h.revenue).sum()
    }

    pub fn supply_payments(&self) -> f64 {
        self.hubs.iter().map(HubPayoff::supply_cost).sum()
    }

    /// `Π_mid + Π_up + β·ΣG − ΣR`; zero up to rounding.
    pub fn conservation_residual(&self) -> f64 {
        self.pi_mid + self.pi_up + self.grid_term - self.revenue()
    }
}

/// CSO side: revenue `L_i·λ_i(α, L_i)` minus the charging share of the bill,
/// per CSO hub. Returns the per-hub breakdown and `Π_mid`.
pub fn cso_payoff(
    alpha: f64,
    terms: &ContractTerms,
    needs: &[f64],
    cases: &[HubChargingCase],
    is_cso: &[bool],
) -> Result<(Vec<HubPayoff>, f64)> {
    check_lengths(needs, cases, is_cso)?;
    let mut hubs = Vec::new();
    let mut pi_mid = 0.0;
    for (h, ((&need, case), &cso)) in needs.iter().zip(cases).zip(is_cso).enumerate() {
        if !cso {
            continue;
        }
        let price = case.lmp_price(need, alpha)?;
        let profile = case.waterfill_profile(need)?;
        let supply_costs = charging_supply_cost(&profile, terms);
        let revenue = need * price;
        pi_mid += revenue - supply_costs.iter().sum::<f64>();
        hubs.push(HubPayoff { hub: h, need, price, revenue, supply_costs });
    }
    Ok((hubs, pi_mid))
}

/// `G_t` for every slot, given the charging profile of every hub.
pub fn grid_costs(grid: &GridCase, cases: &[HubChargingCase], profiles: &[ChargingProfile]) -> Result<Vec<f64>> {
    if cases.len() != profiles.len() || cases.len() != grid.hub_buses().len() {
        return Err(Error::Contract("one charging profile and one bus per hub expected".into()));
    }
    let slots = cases.first().map_or(0, HubChargingCase::slots);
    (0..slots)
        .map(|t| {
            let nonflex: Vec<f64> = cases.iter().map(|c| c.nonflex()[t]).collect();
            let charging: Vec<f64> = profiles.iter().map(|p| p.charging[t]).collect();
            grid.grid_cost(t, &nonflex, &charging)
        })
        .collect()
}

/// ENO side: charging bills collected from CSO hubs minus `β·ΣG_t`, with CSO
/// hubs water-filling and city hubs plugging and charging.
pub fn eno_payoff(
    terms: &ContractTerms,
    needs: &[f64],
    cases: &[HubChargingCase],
    is_cso: &[bool],
    grid: &GridCase,
    beta: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let profiles = hub_profiles(needs, cases, is_cso)?;
    let g = grid_costs(grid, cases, &profiles)?;
    let grid_term = beta * g.iter().sum::<f64>();
    let payments: f64 = profiles
        .iter()
        .zip(is_cso)
        .filter(|(_, &cso)| cso)
        .map(|(p, _)| charging_supply_cost(p, terms).iter().sum::<f64>())
        .sum();
    Ok((payments - grid_term, g, grid_term))
}

/// Both payoffs at one `(α, P)` with the equilibrium needs `L*(α)`.
pub fn evaluate_payoffs(
    alpha: f64,
    terms: &ContractTerms,
    needs: &[f64],
    cases: &[HubChargingCase],
    is_cso: &[bool],
    grid: &GridCase,
    beta: f64,
) -> Result<PayoffBreakdown> {
    let (hubs, pi_mid) = cso_payoff(alpha, terms, needs, cases, is_cso)?;
    let (pi_up, grid_costs, grid_term) = eno_payoff(terms, needs, cases, is_cso, grid, beta)?;
    Ok(PayoffBreakdown { alpha, threshold_kw: terms.threshold_kw, hubs, pi_mid, grid_costs, grid_term, pi_up })
}

/// Writes `alpha,P,hub,R_i,sum_C_i,Pi_mid,grid_term,Pi_up`, one row per CSO hub.
pub fn write_payoffs<W: Write>(out: W, rows: &[PayoffBreakdown], hub_ids: &[u32]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "P", "hub", "R_i", "sum_C_i", "Pi_mid", "grid_term", "Pi_up"])?;
    for b in rows {
        for h in &b.hubs {
            w.write_record([
                b.alpha.to_string(),
                b.threshold_kw.to_string(),
                hub_ids.get(h.hub).map_or(h.hub.to_string(), u32::to_string),
                h.revenue.to_string(),
                h.supply_cost().to_string(),
                b.pi_mid.to_string(),
                b.grid_term.to_string(),
                b.pi_up.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("payoffs", e))?;
    Ok(())
}
