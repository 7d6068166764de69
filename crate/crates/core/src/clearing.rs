//! Operators' flow allocation for a profile of transport offers.
//!
//! Bidder `i` offers `x_i(p) = B_i - theta_i / p`. The tie-line schedule is the
//! point where the aggregate offer meets the spread,
//! `(sum B - Q) * P(Q) = sum theta`, and each bidder is allocated its offer at
//! the resulting price.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::UtcPosition;
use crate::spread::SpreadModel;

/// A CTS virtual bidder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bidder {
    pub id: String,
    /// Maximum quantity offered, MW.
    pub liquidity_b: f64,
    /// Transaction fee, $/MWh.
    #[serde(default)]
    pub cost_c: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub utc: Vec<UtcPosition>,
}

impl Bidder {
    pub fn new(id: impl Into<String>, liquidity_b: f64, cost_c: f64) -> Self {
        Bidder {
            id: id.into(),
            liquidity_b,
            cost_c,
            utc: Vec::new(),
        }
    }

    pub fn with_utc(mut self, utc: Vec<UtcPosition>) -> Self {
        self.utc = utc;
        self
    }

    /// Lowest bid that does not lose money on every MWh, `c * B`.
    pub fn min_bid(&self) -> f64 {
        self.cost_c * self.liquidity_b
    }
}

/// Builds a roster with generated ids and a common fee.
pub fn roster(liquidities: &[f64], cost_c: f64) -> Vec<Bidder> {
    liquidities
        .iter()
        .enumerate()
        .map(|(i, &b)| Bidder::new(format!("b{}", i + 1), b, cost_c))
        .collect()
}

pub(crate) fn validate_roster(bidders: &[Bidder]) -> Result<()> {
    if bidders.is_empty() {
        return Err(Error::EmptyRoster);
    }
    for b in bidders {
        if !(b.liquidity_b.is_finite() && b.liquidity_b > 0.0) {
            return Err(Error::InvalidInput(format!("bidder {} has liquidity {}", b.id, b.liquidity_b)));
        }
        if !(b.cost_c.is_finite() && b.cost_c >= 0.0) {
            return Err(Error::InvalidInput(format!("bidder {} has cost {}", b.id, b.cost_c)));
        }
    }
    Ok(())
}

/// Bids `theta_i` in $/h, aligned with a roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BidProfile(pub Vec<f64>);

impl BidProfile {
    /// Profile restricted to the feasible action set `theta_i >= c_i B_i`.
    pub fn feasible(thetas: Vec<f64>, bidders: &[Bidder]) -> Result<Self> {
        if thetas.len() != bidders.len() {
            return Err(Error::MisalignedProfile {
                thetas: thetas.len(),
                bidders: bidders.len(),
            });
        }
        for (t, b) in thetas.iter().zip(bidders) {
            if !(t.is_finite() && *t >= b.min_bid()) {
                return Err(Error::InvalidInput(format!(
                    "bid {t} of bidder {} is below c * B = {}",
                    b.id,
                    b.min_bid()
                )));
            }
        }
        Ok(BidProfile(thetas))
    }

    pub fn zeros(n: usize) -> Self {
        BidProfile(vec![0.0; n])
    }

    pub fn thetas(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Copy of the profile with bidder `i` bidding `theta`.
    pub fn with(&self, i: usize, theta: f64) -> Self {
        let mut v = self.0.clone();
        v[i] = theta;
        BidProfile(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub q_cts: f64,
    pub price_p: f64,
    pub allocations_x: Vec<f64>,
    /// Set when every bid is zero and the allocation follows the convention
    /// for an all-zero profile rather than the offer curves.
    pub degenerate_zero_theta: bool,
}

/// Numerical tolerances of the clearing engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClearingConfig {
    /// Bisection stops once the bracket is narrower than this times `max(1, sum B)`.
    pub bisection_rel_width: f64,
    /// Tolerance of the fixed-point and balance identities.
    pub identity_tol: f64,
}

impl Default for ClearingConfig {
    fn default() -> Self {
        ClearingConfig {
            bisection_rel_width: 1e-10,
            identity_tol: 1e-8,
        }
    }
}

/// Clears `profile` against `model` with default tolerances.
pub fn clear(model: &SpreadModel, bidders: &[Bidder], profile: &BidProfile) -> Result<ClearingResult> {
    clear_with(model, bidders, profile, &ClearingConfig::default())
}

pub fn clear_with(
    model: &SpreadModel,
    bidders: &[Bidder],
    profile: &BidProfile,
    config: &ClearingConfig,
) -> Result<ClearingResult> {
    validate_roster(bidders)?;
    if profile.0.len() != bidders.len() {
        return Err(Error::MisalignedProfile {
            thetas: profile.0.len(),
            bidders: bidders.len(),
        });
    }
    if let Some(t) = profile.0.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::InvalidInput(format!("bids must be finite and nonnegative, got {t}")));
    }

    let sum_b: f64 = bidders.iter().map(|b| b.liquidity_b).sum();
    let sum_theta = profile.total();

    if sum_theta == 0.0 {
        let q_to = model.tie_optimization()?.q_to;
        let (q_cts, allocations_x) = if sum_b < q_to {
            (sum_b, bidders.iter().map(|b| b.liquidity_b).collect())
        } else {
            (q_to, bidders.iter().map(|b| b.liquidity_b / sum_b * q_to).collect())
        };
        return Ok(ClearingResult {
            q_cts,
            price_p: model.evaluate(q_cts)?,
            allocations_x,
            degenerate_zero_theta: true,
        });
    }

    let q_cts = match model.affine_params() {
        Some((alpha, beta)) => affine_schedule(alpha, beta, sum_b, sum_theta),
        None => bisect_schedule(model, sum_b, sum_theta, config)?,
    };
    // x_i = B_i - theta_i / p with p = sum theta / (sum B - Q); this form keeps
    // sum x = Q exact even when p is tiny.
    let slack = sum_b - q_cts;
    let allocations_x = bidders
        .iter()
        .zip(&profile.0)
        .map(|(b, t)| b.liquidity_b - t / sum_theta * slack)
        .collect();
    Ok(ClearingResult {
        q_cts,
        price_p: model.evaluate(q_cts)?,
        allocations_x,
        degenerate_zero_theta: false,
    })
}

/// Smaller root of `beta Q^2 - (alpha + beta S_B) Q + alpha S_B - S_theta = 0`.
///
/// Algebraically equal to
/// `(alpha + beta S_B) / 2 beta - sqrt(P(S_B)^2 + 4 beta S_theta) / 2 beta`,
/// written through the product of roots to avoid cancellation. Bids above the
/// spread surplus `alpha * S_B` give a negative schedule.
pub fn affine_schedule(alpha: f64, beta: f64, sum_b: f64, sum_theta: f64) -> f64 {
    let p_at_sum_b = alpha - beta * sum_b;
    let root = (p_at_sum_b * p_at_sum_b + 4.0 * beta * sum_theta).sqrt();
    2.0 * (alpha * sum_b - sum_theta) / (alpha + beta * sum_b + root)
}

fn bisect_schedule(model: &SpreadModel, sum_b: f64, sum_theta: f64, config: &ClearingConfig) -> Result<f64> {
    let surplus = sum_b * model.evaluate(0.0)?;
    if surplus <= sum_theta {
        return Err(Error::BidsExceedSurplus { sum_theta, surplus });
    }
    // g(Q) - sum theta is positive below the schedule and negative above it on
    // [0, sum B]: g decreases until the spread vanishes and is negative beyond.
    let excess = |q: f64| -> Result<f64> { Ok((sum_b - q) * model.evaluate(q)? - sum_theta) };
    let (mut lo, mut hi) = (0.0, sum_b);
    let width = config.bisection_rel_width * sum_b.max(1.0);
    while hi - lo > width {
        let mid = 0.5 * (lo + hi);
        let e = excess(mid)?;
        if e > 0.0 {
            lo = mid;
        } else if e < 0.0 {
            hi = mid;
        } else {
            return Ok(mid);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Welfare attained by the cleared schedule.
pub fn allocation_welfare(model: &SpreadModel, result: &ClearingResult) -> Result<f64> {
    model.welfare(result.q_cts)
}
