//! Water-filling schedule of the aggregated charging need at a hub, its
//! quadratic load proxy and the marginal (LMP) charging price derived from it.

use crate::error::{Error, Result};

/// Nonflexible load profile of one hub with the water-filling breakpoints
/// precomputed.
///
/// Slots are sorted by increasing nonflexible load internally (stable on the
/// original index); every output is returned in the original slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct HubChargingCase {
    nonflex: Vec<f64>,
    /// `order[k]` is the original slot of the k-th smallest load.
    order: Vec<usize>,
    sorted: Vec<f64>,
    /// `cumulative[k]` = sum of the k+1 smallest loads.
    cumulative: Vec<f64>,
    /// `breakpoints[k]` = (k+1)·sorted[k] − cumulative[k]; nondecreasing, starts at 0.
    breakpoints: Vec<f64>,
    /// Sum of squares of sorted[k..], for the value function tail.
    tail_squares: Vec<f64>,
}

/// Energy charged per slot and the resulting total load, in original slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingProfile {
    pub charging: Vec<f64>,
    pub total: Vec<f64>,
}

impl ChargingProfile {
    pub fn from_charging(charging: Vec<f64>, nonflex: &[f64]) -> Self {
        let total = charging.iter().zip(nonflex).map(|(c, n)| c + n).collect();
        Self { charging, total }
    }

    pub fn energy(&self) -> f64 {
        self.charging.iter().sum()
    }

    pub fn peak(&self) -> f64 {
        self.total.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl HubChargingCase {
    pub fn new(nonflex: &[f64]) -> Result<Self> {
        if nonflex.is_empty() {
            return Err(Error::Domain("a hub profile needs at least one slot".into()));
        }
        if let Some(v) = nonflex.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("nonflexible load {v} is not a nonnegative number")));
        }
        let mut order: Vec<usize> = (0..nonflex.len()).collect();
        order.sort_by(|&a, &b| nonflex[a].total_cmp(&nonflex[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| nonflex[i]).collect();
        let mut cumulative = Vec::with_capacity(sorted.len());
        let mut acc = 0.0;
        for v in &sorted {
            acc += v;
            cumulative.push(acc);
        }
        let mut breakpoints = Vec::with_capacity(sorted.len());
        let mut prev: f64 = 0.0;
        for (k, v) in sorted.iter().enumerate() {
            // monotone by construction; the running max only absorbs rounding
            let d = ((k + 1) as f64 * v - cumulative[k]).max(prev);
            breakpoints.push(d);
            prev = d;
        }
        breakpoints[0] = 0.0;
        let mut tail_squares = vec![0.0; sorted.len() + 1];
        for k in (0..sorted.len()).rev() {
            tail_squares[k] = tail_squares[k + 1] + sorted[k] * sorted[k];
        }
        Ok(Self { nonflex: nonflex.to_vec(), order, sorted, cumulative, breakpoints, tail_squares })
    }

    pub fn slots(&self) -> usize {
        self.nonflex.len()
    }

    pub fn nonflex(&self) -> &[f64] {
        &self.nonflex
    }

    /// Breakpoints Δ_1..Δ_T of the sorted profile (Δ_{T+1} = +∞ is implicit).
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn total_nonflex(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Number of slots `t₀` that receive charging: the unique `t₀` with
    /// `Δ_{t₀} < L ≤ Δ_{t₀+1}`, and 1 for `L = 0`.
    pub fn active_slots(&self, need: f64) -> usize {
        self.breakpoints.partition_point(|&d| d < need).max(1)
    }

    /// Common total load `(L + L⁰_{t₀}) / t₀` on the active slots.
    pub fn water_level(&self, need: f64) -> f64 {
        let t0 = self.active_slots(need);
        (need + self.cumulative[t0 - 1]) / t0 as f64
    }

    pub fn waterfill_profile(&self, need: f64) -> Result<ChargingProfile> {
        check_need(need)?;
        let t = self.slots();
        let mut charging = vec![0.0; t];
        if need > 0.0 {
            let t0 = self.active_slots(need);
            let level = self.water_level(need);
            let mut sum = 0.0;
            for k in 0..t0 {
                let c = (level - self.sorted[k]).max(0.0);
                charging[self.order[k]] = c;
                sum += c;
            }
            // spread the rounding residual so the full-SoC constraint holds tightly
            let fix = (need - sum) / t0 as f64;
            for k in 0..t0 {
                let slot = self.order[k];
                charging[slot] = (charging[slot] + fix).max(0.0);
            }
        }
        Ok(ChargingProfile::from_charging(charging, &self.nonflex))
    }

    /// Minimal quadratic load proxy `G*(L) = (L + L⁰_{t₀})²/t₀ + Σ_{t>t₀} (ℓ⁰_t)²`.
    pub fn waterfill_value(&self, need: f64) -> Result<f64> {
        check_need(need)?;
        Ok(self.value_unchecked(need))
    }

    pub(crate) fn value_unchecked(&self, need: f64) -> f64 {
        let t0 = self.active_slots(need);
        let head = need + self.cumulative[t0 - 1];
        head * head / t0 as f64 + self.tail_squares[t0]
    }

    /// Charging unit price `λ = α·dG*/dL = 2α(L + L⁰_{t₀})/t₀`.
    pub fn lmp_price(&self, need: f64, alpha: f64) -> Result<f64> {
        if !(alpha >= 0.0) {
            return Err(Error::Domain(format!("price scale alpha must be nonnegative, got {alpha}")));
        }
        check_need(need)?;
        Ok(self.price_unchecked(need, alpha))
    }

    pub(crate) fn price_unchecked(&self, need: f64, alpha: f64) -> f64 {
        2.0 * alpha * self.water_level(need)
    }

    /// `dλ/dL = 2α/t₀` (right derivative at breakpoints).
    pub(crate) fn price_slope(&self, need: f64, alpha: f64) -> f64 {
        2.0 * alpha / self.active_slots(need) as f64
    }
}

fn check_need(need: f64) -> Result<()> {
    if !(need >= 0.0) || !need.is_finite() {
        return Err(Error::Domain(format!("charging need must be nonnegative, got {need}")));
    }
    Ok(())
}

/// Reference solution of `min Σ(ℓ_t + ℓ⁰_t)²  s.t. Σℓ_t = L, ℓ ≥ 0` by bisection
/// on the water level. Independent of the breakpoint construction above; used
/// to cross-check it.
pub fn qp_oracle(nonflex: &[f64], need: f64) -> (Vec<f64>, f64) {
    let fill = |level: f64| nonflex.iter().map(|&n| (level - n).max(0.0)).sum::<f64>();
    let mut lo = nonflex.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = nonflex.iter().copied().fold(f64::NEG_INFINITY, f64::max) + need;
    if need <= 0.0 {
        hi = lo;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if fill(mid) < need {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let level = 0.5 * (lo + hi);
    let mut profile: Vec<f64> = nonflex.iter().map(|&n| (level - n).max(0.0)).collect();
    let sum: f64 = profile.iter().sum();
    if sum > 0.0 {
        let scale = need / sum;
        profile.iter_mut().for_each(|p| *p *= scale);
    }
    let value = profile.iter().zip(nonflex).map(|(p, n)| (p + n) * (p + n)).sum();
    (profile, value)
}
