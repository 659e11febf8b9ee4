//! Upper and middle levels: the ENO picks the contract threshold `P`, the CSO
//! picks the price scale `α`, both anticipating the drivers' equilibrium
//! `L*(α)`. Solved by iterative bounding: Brent for the CSO's best response,
//! simulated annealing for the ENO's constrained search.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charging::ChargingProfile;
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::operators::{
    charging_supply_cost, evaluate_payoffs, grid_costs, hub_profiles, ContractTerms, PayoffBreakdown,
};
use crate::wardrop::{solve_wardrop, EquilibriumProblem, EquilibriumResult, HubPricing, WardropOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrilevelConfig {
    /// Upper bound of the CSO price scale, €/kWh².
    pub alpha_max: f64,
    /// Upper bound of the contract threshold, kW.
    pub threshold_max_kw: f64,
    /// CSO optimality tolerance, €; `None` means 1e-3 × |best CSO payoff at the start|.
    pub eps_mid: Option<f64>,
    /// Consecutive rejections that end an annealing run.
    pub restarts: usize,
    /// Standard deviation of the α proposals.
    pub spread: f64,
    /// Temperature law `K(n) = cooling^n`.
    pub cooling: f64,
    /// Brent runs on this many equal windows of `[0, alpha_max]`.
    pub brent_windows: usize,
    /// Brent abscissa tolerance relative to `alpha_max`.
    pub brent_xtol: f64,
    pub brent_max_evals: usize,
    pub max_outer: usize,
    /// Proposal draws allowed per candidate before giving up.
    pub redraw_cap: usize,
    /// Hard cap on candidates per annealing run.
    pub max_candidates: usize,
    /// Set from the scenario seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrilevelConfig {
    fn default() -> Self {
        Self {
            alpha_max: 1e-3,
            threshold_max_kw: 4000.0,
            eps_mid: None,
            restarts: 15,
            spread: 2.5e-6,
            cooling: 0.99,
            brent_windows: 8,
            brent_xtol: 1e-6,
            brent_max_evals: 60,
            max_outer: 50,
            redraw_cap: 10_000,
            max_candidates: 2_000,
            seed: 0,
        }
    }
}

impl TrilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Schema { key: key.into(), message: message.into() });
        if !(self.alpha_max > 0.0) {
            return bad("alpha_max", "must be positive");
        }
        if !(self.threshold_max_kw > 0.0) {
            return bad("threshold_max_kw", "must be positive");
        }
        if let Some(e) = self.eps_mid {
            if !(e > 0.0) {
                return bad("eps_mid", "must be positive");
            }
        }
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        if !(self.spread > 0.0) {
            return bad("spread", "must be positive");
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return bad("cooling", "must lie in (0, 1)");
        }
        if self.brent_windows == 0 || !(self.brent_xtol > 0.0) || self.brent_max_evals < 3 {
            return bad("brent_windows", "Brent needs at least one window, a positive tolerance and 3 evaluations");
        }
        if self.max_outer == 0 || self.redraw_cap == 0 || self.max_candidates == 0 {
            return bad("max_outer", "iteration caps must be positive");
        }
        Ok(())
    }

    /// Annealing temperature after `n` candidates.
    pub fn temperature(&self, n: usize) -> f64 {
        self.cooling.powi(n as i32)
    }
}

/// The two payoffs as functions of `(α, P)`. The trilevel search only sees
/// this interface, so it can be run on synthetic objectives.
pub trait Payoffs: Sync {
    fn pi_mid(&self, alpha: f64, threshold: f64) -> Result<f64>;
    fn pi_up(&self, alpha: f64, threshold: f64) -> Result<f64>;
    /// True when `Π_mid` cannot depend on `α` (no CSO hub).
    fn alpha_independent(&self) -> bool {
        false
    }
}

/// Everything that depends on `α` only: the equilibrium and what follows from
/// `L*(α)` without the contract.
#[derive(Debug, Clone)]
pub struct LowerLevelOutcome {
    pub alpha: f64,
    pub equilibrium: EquilibriumResult,
    pub profiles: Vec<ChargingProfile>,
    /// CSO revenue per hub (zero at city hubs).
    pub revenue: Vec<f64>,
    pub grid_costs: Vec<f64>,
    pub grid_term: f64,
}

/// The trilevel model on a scenario, with lower-level solves cached by `α`.
pub struct TrilevelModel<'a> {
    problem: &'a EquilibriumProblem,
    grid: &'a GridCase,
    is_cso: Vec<bool>,
    terms: ContractTerms,
    beta: f64,
    wardrop: WardropOptions,
    anchor_spacing: Option<f64>,
    cache: Mutex<HashMap<u64, Arc<LowerLevelOutcome>>>,
}

impl<'a> TrilevelModel<'a> {
    /// `terms` fixes the contract coefficients; its threshold is ignored.
    pub fn new(
        problem: &'a EquilibriumProblem,
        grid: &'a GridCase,
        terms: ContractTerms,
        beta: f64,
        wardrop: WardropOptions,
    ) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::Domain(format!("grid cost weight must be nonnegative, got {beta}")));
        }
        if grid.hub_buses().len() != problem.scenario().hubs().len() {
            return Err(Error::Scenario("every hub needs a grid bus".into()));
        }
        let is_cso = problem.scenario().hubs().iter().map(|h| h.is_cso()).collect();
        Ok(Self { problem, grid, is_cso, terms, beta, wardrop, anchor_spacing: None, cache: Mutex::new(HashMap::new()) })
    }

    /// Warm-starts every lower-level solve from the solution at the nearest
    /// multiple of `spacing`, itself solved from free flow. The result for a
    /// given `α` stays independent of the order of evaluation.
    pub fn with_anchor_spacing(mut self, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::Domain(format!("anchor spacing must be positive, got {spacing}")));
        }
        self.anchor_spacing = Some(spacing);
        Ok(self)
    }

    pub fn problem(&self) -> &EquilibriumProblem {
        self.problem
    }

    pub fn grid(&self) -> &GridCase {
        self.grid
    }

    pub fn is_cso(&self) -> &[bool] {
        &self.is_cso
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn terms_at(&self, threshold: f64) -> Result<ContractTerms> {
        self.terms.at(threshold)
    }

    /// Lower-level solve and its `P`-independent consequences, cached.
    pub fn outcome(&self, alpha: f64) -> Result<Arc<LowerLevelOutcome>> {
        let key = alpha.to_bits();
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let pricing = HubPricing::lmp(alpha)?;
        let anchor = match self.anchor_spacing {
            Some(h) if alpha.is_finite() => {
                let a = (alpha / h).round() * h;
                if a == alpha { None } else { Some(self.outcome(a)?) }
            }
            _ => None,
        };
        let start = anchor.as_ref().map(|o| &o.equilibrium.flows);
        let equilibrium = solve_wardrop(self.problem, &pricing, &self.wardrop, start)?;
        let cases = self.problem.cases();
        let needs = equilibrium.needs().to_vec();
        let profiles = hub_profiles(&needs, cases, &self.is_cso)?;
        let revenue = needs
            .iter()
            .zip(cases)
            .zip(&self.is_cso)
            .map(|((&l, c), &cso)| if cso { Ok(l * c.lmp_price(l, alpha)?) } else { Ok(0.0) })
            .collect::<Result<Vec<_>>>()?;
        let g = grid_costs(self.grid, cases, &profiles)?;
        let grid_term = self.beta * g.iter().sum::<f64>();
        let outcome = Arc::new(LowerLevelOutcome { alpha, equilibrium, profiles, revenue, grid_costs: g, grid_term });
        self.cache.lock().expect("cache poisoned").insert(key, outcome.clone());
        Ok(outcome)
    }

    fn supply_payments(&self, outcome: &LowerLevelOutcome, threshold: f64) -> Result<f64> {
        let terms = self.terms.at(threshold)?;
        Ok(outcome
            .profiles
            .iter()
            .zip(&self.is_cso)
            .filter(|(_, &cso)| cso)
            .map(|(p, _)| charging_supply_cost(p, &terms).iter().sum::<f64>())
            .sum())
    }

    /// Full payoff breakdown at `(α, P)`, recomputed without the cache.
    pub fn breakdown(&self, alpha: f64, threshold: f64) -> Result<PayoffBreakdown> {
        let outcome = self.outcome(alpha)?;
        evaluate_payoffs(
            alpha,
            &self.terms.at(threshold)?,
            outcome.equilibrium.needs(),
            self.problem.cases(),
            &self.is_cso,
            self.grid,
            self.beta,
        )
    }

    pub fn cached_solves(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }
}

impl Payoffs for TrilevelModel<'_> {
    fn pi_mid(&self, alpha: f64, threshold: f64) -> Result<f64> {
        let o = self.outcome(alpha)?;
        Ok(o.revenue.iter().sum::<f64>() - self.supply_payments(&o, threshold)?)
    }

    fn pi_up(&self, alpha: f64, threshold: f64) -> Result<f64> {
        let o = self.outcome(alpha)?;
        Ok(self.supply_payments(&o, threshold)? - o.grid_term)
    }

    fn alpha_independent(&self) -> bool {
        !self.is_cso.iter().any(|&c| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Anneal,
    Brent,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Anneal => "anneal",
            Phase::Brent => "brent",
        }
    }
}

/// One evaluated point of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub phase: Phase,
    pub threshold: f64,
    pub alpha: f64,
    pub pi_mid: f64,
    pub pi_up: f64,
    pub accepted: bool,
    pub feasible: bool,
}

/// Writes `outer_iter,phase,P,alpha,Pi_mid,Pi_up,accepted,feasible`.
pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["outer_iter", "phase", "P", "alpha", "Pi_mid", "Pi_up", "accepted", "feasible"])?;
    for r in rows {
        w.write_record([
            r.outer_iter.to_string(),
            r.phase.label().to_string(),
            r.threshold.to_string(),
            r.alpha.to_string(),
            r.pi_mid.to_string(),
            r.pi_up.to_string(),
            r.accepted.to_string(),
            r.feasible.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("trace", e))?;
    Ok(())
}

/// Bounded Brent minimisation of `f` on `[a, b]` (golden section with
/// parabolic steps). Returns the best abscissa, its value and the number of
/// evaluations.
pub fn brent_minimize(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, xatol: f64, max_evals: usize) -> (f64, f64, usize) {
    let sqrt_eps = f64::EPSILON.sqrt();
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let (mut a, mut b) = (a, b);
    let mut fulc = a + golden * (b - a);
    let mut nfc = fulc;
    let mut xf = fulc;
    let (mut rat, mut e): (f64, f64) = (0.0, 0.0);
    let mut fx = f(xf);
    let mut evals = 1;
    let (mut ffulc, mut fnfc) = (fx, fx);
    let mut xm = 0.5 * (a + b);
    let mut tol1 = sqrt_eps * xf.abs() + xatol / 3.0;
    let mut tol2 = 2.0 * tol1;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    while (xf - xm).abs() > tol2 - 0.5 * (b - a) && evals < max_evals {
        let mut use_golden = true;
        if e.abs() > tol1 {
            let mut r = (xf - nfc) * (fx - ffulc);
            let mut q = (xf - fulc) * (fx - fnfc);
            let mut p = (xf - fulc) * q - (xf - nfc) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            r = e;
            e = rat;
            if p.abs() < (0.5 * q * r).abs() && p > q * (a - xf) && p < q * (b - xf) {
                rat = p / q;
                let x = xf + rat;
                use_golden = false;
                if (x - a) < tol2 || (b - x) < tol2 {
                    let si = sign(xm - xf) + if xm == xf { 1.0 } else { 0.0 };
                    rat = tol1 * si;
                }
            }
        }
        if use_golden {
            e = if xf >= xm { a - xf } else { b - xf };
            rat = golden * e;
        }
        let si = sign(rat) + if rat == 0.0 { 1.0 } else { 0.0 };
        let x = xf + si * rat.abs().max(tol1);
        let fu = f(x);
        evals += 1;
        if fu <= fx {
            if x >= xf {
                a = xf;
            } else {
                b = xf;
            }
            fulc = nfc;
            ffulc = fnfc;
            nfc = xf;
            fnfc = fx;
            xf = x;
            fx = fu;
        } else {
            if x < xf {
                a = x;
            } else {
                b = x;
            }
            if fu <= fnfc || nfc == xf {
                fulc = nfc;
                ffulc = fnfc;
                nfc = x;
                fnfc = fu;
            } else if fu <= ffulc || fulc == xf || fulc == nfc {
                fulc = x;
                ffulc = fu;
            }
        }
        xm = 0.5 * (a + b);
        tol1 = sqrt_eps * xf.abs() + xatol / 3.0;
        tol2 = 2.0 * tol1;
    }
    (xf, fx, evals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub threshold: f64,
    pub alpha: f64,
    pub value: f64,
    /// Every `(α, Π_mid)` probed, in a deterministic order.
    pub probes: Vec<(f64, f64)>,
}

const FAILED: f64 = -1e300;

fn scored(model: &dyn Payoffs, alpha: f64, threshold: f64) -> f64 {
    match model.pi_mid(alpha, threshold) {
        Ok(v) if v.is_finite() => v,
        Ok(_) => FAILED,
        Err(e) => {
            log::debug!("alpha {alpha:.6e}: {e}");
            FAILED
        }
    }
}

/// The CSO's best response to a threshold: Brent on each window of
/// `[0, alpha_max]` plus both end points, best value kept (ties to the
/// smaller `α`).
pub fn cso_best_response(model: &dyn Payoffs, threshold: f64, config: &TrilevelConfig) -> Result<BestResponse> {
    if !(threshold >= 0.0 && threshold <= config.threshold_max_kw) {
        return Err(Error::Domain(format!(
            "threshold {threshold} outside [0, {}]",
            config.threshold_max_kw
        )));
    }
    if model.alpha_independent() {
        let value = model.pi_mid(0.0, threshold)?;
        return Ok(BestResponse { threshold, alpha: 0.0, value, probes: vec![(0.0, value)] });
    }
    let n = config.brent_windows;
    let width = config.alpha_max / n as f64;
    let xatol = config.brent_xtol * config.alpha_max;
    let windows: Vec<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|w| {
            let lo = w as f64 * width;
            let hi = if w + 1 == n { config.alpha_max } else { (w + 1) as f64 * width };
            let mut probes = Vec::new();
            brent_minimize(
                |a| {
                    let v = scored(model, a, threshold);
                    probes.push((a, v));
                    -v
                },
                lo,
                hi,
                xatol,
                config.brent_max_evals,
            );
            probes
        })
        .collect();
    let mut probes = vec![(0.0, scored(model, 0.0, threshold))];
    for w in windows {
        probes.extend(w);
    }
    probes.push((config.alpha_max, scored(model, config.alpha_max, threshold)));
    let mut best = probes[0];
    for &(a, v) in &probes[1..] {
        if v > best.1 || (v == best.1 && a < best.0) {
            best = (a, v);
        }
    }
    if best.1 <= FAILED {
        return Err(Error::Scenario(format!("every probed alpha failed at threshold {threshold}")));
    }
    Ok(BestResponse { threshold, alpha: best.0, value: best.1, probes })
}

/// Acceptance rule `min(1, exp((new − last)/(|last|·K)))`, with
/// `|last| = 0` giving 1 for a strict improvement and 0 otherwise.
pub fn acceptance_probability(candidate: f64, last: f64, temperature: f64) -> f64 {
    let scale = last.abs() * temperature;
    if scale == 0.0 || !scale.is_finite() {
        return if candidate > last { 1.0 } else { 0.0 };
    }
    ((candidate - last) / scale).exp().min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingResult {
    pub threshold: f64,
    pub alpha: f64,
    pub pi_up: f64,
    pub pi_mid: f64,
    pub candidates: usize,
    pub accepted: usize,
    pub rows: Vec<TraceRow>,
}

/// Independent check of the constraints of the ENO's search at `(α, P)`.
pub fn is_feasible(model: &dyn Payoffs, alpha: f64, threshold: f64, constraints: &[f64], slack: f64) -> Result<bool> {
    let v = model.pi_mid(alpha, threshold)?;
    for &c in constraints {
        if v < model.pi_mid(c, threshold)? - slack {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Simulated annealing over `(P, α)` maximising `Π_up` subject to
/// `Π_mid(α, P) ≥ Π_mid(ᾱ_l, P) − slack` for every stored best response `ᾱ_l`.
///
/// Each candidate draws `P` uniformly, centres a normal proposal for `α` on
/// the stored `ᾱ_l` that is best at that `P`, and redraws until feasible. The
/// run ends after `restarts` consecutive candidates that do not move the
/// chain; a candidate with exactly the last accepted value is taken but does
/// not reset that count, so plateaus terminate.
pub fn annealing_search(
    model: &dyn Payoffs,
    constraints: &[f64],
    slack: f64,
    config: &TrilevelConfig,
    rng: &mut ChaCha8Rng,
    outer_iter: usize,
) -> Result<AnnealingResult> {
    if constraints.is_empty() {
        return Err(Error::Contract("annealing needs at least one stored best response".into()));
    }
    let normal = Normal::new(0.0, config.spread).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rows = Vec::new();
    let mut last: Option<(f64, f64, f64, f64)> = None;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let mut still = 0;
    let mut n = 0;
    let mut accepted_count = 0;
    while still < config.restarts && n < config.max_candidates {
        n += 1;
        let threshold = rng.random::<f64>() * config.threshold_max_kw;
        let mids: Vec<f64> = constraints.iter().map(|&c| scored(model, c, threshold)).collect();
        let (centre, _) = constraints
            .iter()
            .zip(&mids)
            .fold((constraints[0], f64::NEG_INFINITY), |acc, (&c, &v)| if v > acc.1 { (c, v) } else { acc });
        let floor = mids.iter().copied().fold(f64::NEG_INFINITY, f64::max) - slack;
        let mut draws = 0;
        let (alpha, pi_mid) = loop {
            if draws >= config.redraw_cap {
                return Err(Error::FeasibilityRedraw { draws, center: centre });
            }
            draws += 1;
            let alpha = centre + normal.sample(rng);
            if !(0.0..=config.alpha_max).contains(&alpha) {
                rows.push(TraceRow {
                    outer_iter,
                    phase: Phase::Anneal,
                    threshold,
                    alpha,
                    pi_mid: f64::NAN,
                    pi_up: f64::NAN,
                    accepted: false,
                    feasible: false,
                });
                continue;
            }
            let v = scored(model, alpha, threshold);
            if v >= floor && v > FAILED {
                break (alpha, v);
            }
            rows.push(TraceRow {
                outer_iter,
                phase: Phase::Anneal,
                threshold,
                alpha,
                pi_mid: v,
                pi_up: f64::NAN,
                accepted: false,
                feasible: false,
            });
        };
        let pi_up = model.pi_up(alpha, threshold)?;
        let take = match last {
            None => true,
            Some((.., last_up)) => {
                let p = acceptance_probability(pi_up, last_up, config.temperature(n));
                p >= 1.0 || rng.random::<f64>() < p
            }
        };
        let moved = match last {
            None => true,
            Some((.., last_up)) => pi_up != last_up,
        };
        rows.push(TraceRow {
            outer_iter,
            phase: Phase::Anneal,
            threshold,
            alpha,
            pi_mid,
            pi_up,
            accepted: take,
            feasible: true,
        });
        if take {
            accepted_count += 1;
            last = Some((threshold, alpha, pi_mid, pi_up));
            if best.is_none_or(|b| pi_up > b.3) {
                best = last;
            }
            if moved {
                still = 0;
                continue;
            }
        }
        still += 1;
    }
    let (threshold, alpha, pi_mid, pi_up) = best.expect("at least one candidate is always accepted");
    Ok(AnnealingResult { threshold, alpha, pi_up, pi_mid, candidates: n, accepted: accepted_count, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundingResult {
    pub threshold: f64,
    pub alpha: f64,
    pub pi_up: f64,
    pub pi_mid: f64,
    /// CSO best response at the final threshold.
    pub best_response: BestResponse,
    pub eps_mid: f64,
    /// `Π_mid(α_K, P_K) − (Π̄_mid(P_K) − ε_mid)`, nonnegative on success.
    pub margin: f64,
    pub outer_iterations: usize,
    /// Stored best responses `ᾱ_l`, in order.
    pub constraints: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

fn brent_rows(model: &dyn Payoffs, br: &BestResponse, outer_iter: usize) -> Vec<TraceRow> {
    br.probes
        .iter()
        .map(|&(alpha, pi_mid)| TraceRow {
            outer_iter,
            phase: Phase::Brent,
            threshold: br.threshold,
            alpha,
            pi_mid,
            pi_up: model.pi_up(alpha, br.threshold).unwrap_or(f64::NAN),
            accepted: alpha == br.alpha,
            feasible: pi_mid > FAILED,
        })
        .collect()
}

/// Iterative bounding on any pair of payoff functions.
pub fn iterative_bounding(model: &dyn Payoffs, config: &TrilevelConfig) -> Result<BoundingResult> {
    config.validate()?;
    let mut threshold = 0.5 * config.threshold_max_kw;
    let mut alpha = 0.5 * config.alpha_max;
    let mut br = cso_best_response(model, threshold, config)?;
    let eps = config.eps_mid.unwrap_or_else(|| (1e-3 * br.value.abs()).max(1e-9));
    let mut trace = brent_rows(model, &br, 0);
    let mut constraints = vec![br.alpha];
    let mut k = 0;
    loop {
        // A point whose lower level cannot be evaluated is never accepted.
        let current = scored(model, alpha, threshold);
        if current > FAILED && current >= br.value - eps {
            return Ok(BoundingResult {
                threshold,
                alpha,
                pi_up: model.pi_up(alpha, threshold)?,
                pi_mid: current,
                eps_mid: eps,
                margin: current - (br.value - eps),
                outer_iterations: k,
                constraints,
                trace,
                best_response: br,
            });
        }
        if k >= config.max_outer {
            return Err(Error::OuterIterationCap { iterations: k, trace });
        }
        k += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(k as u64));
        let annealed = annealing_search(model, &constraints, eps / 3.0, config, &mut rng, k)?;
        trace.extend(annealed.rows);
        threshold = annealed.threshold;
        alpha = annealed.alpha;
        br = cso_best_response(model, threshold, config)?;
        trace.extend(brent_rows(model, &br, k));
        constraints.push(br.alpha);
    }
}

#[derive(Debug, Clone)]
pub struct TrilevelSolution {
    pub bounding: BoundingResult,
    pub threshold: f64,
    pub alpha: f64,
    pub payoffs: PayoffBreakdown,
    pub equilibrium: EquilibriumResult,
}

impl TrilevelSolution {
    pub fn needs(&self) -> &[f64] {
        self.equilibrium.needs()
    }
}

/// Runs the iterative bounding on the scenario model and gathers the final
/// equilibrium and payoffs.
pub fn trilevel_solve(model: &TrilevelModel<'_>, config: &TrilevelConfig) -> Result<TrilevelSolution> {
    let bounding = iterative_bounding(model, config)?;
    let outcome = model.outcome(bounding.alpha)?;
    let payoffs = model.breakdown(bounding.alpha, bounding.threshold)?;
    Ok(TrilevelSolution {
        threshold: bounding.threshold,
        alpha: bounding.alpha,
        payoffs,
        equilibrium: outcome.equilibrium.clone(),
        bounding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Stub<M, U> {
        mid: M,
        up: U,
        flat: bool,
    }

    impl<M, U> Payoffs for Stub<M, U>
    where
        M: Fn(f64, f64) -> f64 + Sync,
        U: Fn(f64, f64) -> f64 + Sync,
    {
        fn pi_mid(&self, alpha: f64, threshold: f64) -> Result<f64> {
            Ok((self.mid)(alpha, threshold))
        }
        fn pi_up(&self, alpha: f64, threshold: f64) -> Result<f64> {
            Ok((self.up)(alpha, threshold))
        }
        fn alpha_independent(&self) -> bool {
            self.flat
        }
    }

    fn config() -> TrilevelConfig {
        TrilevelConfig { alpha_max: 1.0, threshold_max_kw: 1.0, spread: 0.05, ..Default::default() }
    }

    #[test]
    fn brent_finds_parabola_minimum() {
        let (x, fx, n) = brent_minimize(|x| (x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-10, 100);
        assert!((x - 0.3).abs() < 1e-8);
        assert!((fx - 1.0).abs() < 1e-15);
        assert!(n < 30);
        // minimum on the boundary
        let (x, _, _) = brent_minimize(|x| x, 0.0, 1.0, 1e-10, 100);
        assert!(x < 1e-8);
    }

    #[test]
    fn best_response_on_concave_stub() {
        let target = 0.4173;
        let stub = Stub { mid: |a: f64, _p: f64| -(a - target).powi(2), up: |_a, _p| 0.0, flat: false };
        let cfg = TrilevelConfig { brent_xtol: 1e-8, ..config() };
        let br = cso_best_response(&stub, 0.5, &cfg).unwrap();
        assert!((br.alpha - target).abs() < 1e-6, "{}", br.alpha);
    }

    #[test]
    fn best_response_picks_the_global_mode() {
        // two bumps, the higher one near the upper end
        let stub = Stub {
            mid: |a: f64, _p: f64| (-(a - 0.15).powi(2) / 0.001).exp() + 1.5 * (-(a - 0.85).powi(2) / 0.001).exp(),
            up: |_a, _p| 0.0,
            flat: false,
        };
        let br = cso_best_response(&stub, 0.5, &config()).unwrap();
        assert!((br.alpha - 0.85).abs() < 1e-4);
    }

    #[test]
    fn no_cso_hub_means_zero_alpha_and_immediate_stop() {
        let stub = Stub { mid: |_a, _p| 0.0, up: |_a, p: f64| p, flat: true };
        let br = cso_best_response(&stub, 0.3, &config()).unwrap();
        assert_eq!(br.alpha, 0.0);
        let r = iterative_bounding(&stub, &config()).unwrap();
        assert_eq!(r.outer_iterations, 0);
    }

    #[test]
    fn acceptance_probability_rule() {
        assert_eq!(acceptance_probability(2.0, 1.0, 0.5), 1.0);
        let p = acceptance_probability(0.8, 1.0, 0.5);
        assert!((p - (-0.2f64 / 0.5).exp()).abs() < 1e-15);
        let p = acceptance_probability(-1.3, -1.0, 0.25);
        assert!((p - (-0.3f64 / 0.25).exp()).abs() < 1e-15);
        assert_eq!(acceptance_probability(1.0, 0.0, 0.5), 1.0);
        assert_eq!(acceptance_probability(-1.0, 0.0, 0.5), 0.0);
        assert_eq!(acceptance_probability(0.0, 0.0, 0.5), 0.0);
    }

    #[test]
    fn constant_objective_terminates() {
        let stub = Stub { mid: |_a, _p| 1.0, up: |_a, _p| 3.0, flat: false };
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = annealing_search(&stub, &[0.5], 0.1, &cfg, &mut rng, 1).unwrap();
        assert_eq!(r.candidates, 1 + cfg.restarts);
        assert_eq!(r.pi_up, 3.0);
    }

    #[test]
    fn annealing_locates_known_threshold() {
        let target = 0.62;
        let stub = Stub { mid: |_a, _p| 0.0, up: move |_a, p: f64| 10.0 - (p - target).powi(2), flat: false };
        let cfg = TrilevelConfig { restarts: 60, ..config() };
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = annealing_search(&stub, &[0.5], 0.01, &cfg, &mut rng, 1).unwrap();
            assert!(is_feasible(&stub, r.alpha, r.threshold, &[0.5], 0.01).unwrap());
            if (r.threshold - target).abs() <= 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn redraw_cap_is_reported() {
        // nothing but the exact stored alpha is feasible
        let stub = Stub { mid: |a: f64, _p| if a == 0.5 { 1.0 } else { 0.0 }, up: |_a, _p| 0.0, flat: false };
        let cfg = TrilevelConfig { redraw_cap: 50, ..config() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = annealing_search(&stub, &[0.5], 1e-3, &cfg, &mut rng, 1);
        assert!(matches!(r, Err(Error::FeasibilityRedraw { draws: 50, .. })));
    }

    /// Bilevel stub with a closed-form optimistic solution: the CSO's best
    /// response is `α̂(P) = P/2`, and the ENO earns `−(P − 0.8)² − (α − 0.4)²`,
    /// maximised along the response curve at `P = 0.8`, `α = 0.4`.
    #[test]
    fn bounding_recovers_stub_optimum() {
        let stub = Stub {
            mid: |a: f64, p: f64| 1.0 - (a - 0.5 * p).abs(),
            up: |a: f64, p: f64| -(p - 0.8).powi(2) - (a - 0.4).powi(2),
            flat: false,
        };
        let cfg = TrilevelConfig { eps_mid: Some(1e-3), restarts: 80, spread: 1e-3, brent_xtol: 1e-9, ..config() };
        let r = iterative_bounding(&stub, &cfg).unwrap();
        assert!(r.margin >= 0.0);
        // ε-optimal CSO responses lie within 1e-3 of P/2
        assert!((r.alpha - 0.5 * r.threshold).abs() <= 1e-3 + 1e-9);
        assert!((r.threshold - 0.8).abs() < 0.05, "{r:?}");
        assert_eq!(r.constraints.len(), r.outer_iterations + 1);
        for k in 0..r.constraints.len() {
            assert!(r.trace.iter().any(|t| t.phase == Phase::Brent && t.accepted && t.outer_iter == k));
        }
    }

    #[test]
    fn bounding_is_deterministic() {
        let stub = Stub {
            mid: |a: f64, p: f64| 1.0 - (a - 0.5 * p).abs(),
            up: |a: f64, p: f64| -(p - 0.8).powi(2) - (a - 0.4).powi(2),
            flat: false,
        };
        let cfg = TrilevelConfig { eps_mid: Some(1e-3), spread: 1e-3, ..config() };
        let a = iterative_bounding(&stub, &cfg).unwrap();
        let b = iterative_bounding(&stub, &cfg).unwrap();
        assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
    }

    /// Lower level fails on a band of prices that contains the start point.
    struct Fragile;

    impl Payoffs for Fragile {
        fn pi_mid(&self, alpha: f64, threshold: f64) -> Result<f64> {
            if (0.45..0.55).contains(&alpha) {
                return Err(Error::VoltageCollapse { bus: 1, magnitude: 0.4 });
            }
            Ok(-(alpha - 0.2 - 0.1 * threshold).powi(2))
        }
        fn pi_up(&self, _alpha: f64, threshold: f64) -> Result<f64> {
            Ok(threshold)
        }
        fn alpha_independent(&self) -> bool {
            false
        }
    }

    #[test]
    fn unevaluable_start_is_not_accepted() {
        let cfg = TrilevelConfig { eps_mid: Some(1e-4), spread: 0.02, ..config() };
        let r = iterative_bounding(&Fragile, &cfg).unwrap();
        assert!(r.outer_iterations >= 1);
        assert!(!(0.45..0.55).contains(&r.alpha));
        assert!(r.margin >= 0.0);
    }
}
