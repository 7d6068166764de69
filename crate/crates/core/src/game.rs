//! Payoffs and Nash equilibria of the CTS bidding game.
//!
//! Three variants are covered, all with affine spreads for the closed forms:
//!
//! - the baseline game, where bidders earn `P(Q) B_i - theta_i - c x_i`;
//! - the game with up-to-congestion (UTC) positions, whose payoff adds the
//!   return of virtual positions between the CTS bus and internal nodes;
//! - the conjectured-spread game, where homogeneous bidders reason about their
//!   own affine conjecture while the operators clear against theirs.
//!
//! A brute-force deviation oracle checks candidate profiles against the Nash
//! definition directly, independent of the closed forms.

use serde::{Deserialize, Serialize};

use crate::clearing::{self, clear, allocation_welfare, BidProfile, Bidder, ClearingResult};
use crate::error::{Error, Result};
use crate::spread::SpreadModel;

/// Relative payoff gain below which a deviation is not considered profitable.
pub const GAIN_REL_TOL: f64 = 1e-6;
/// Default number of grid points scanned per player by the deviation oracle.
pub const DEFAULT_ORACLE_GRID: usize = 2001;

/// Up-to-congestion position from an internal node to the CTS trading bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtcPosition {
    pub node_id: String,
    /// Position size, MW.
    pub megawatts_f: f64,
    /// Intercept of the internal spread `alpha_in - beta_in Q`, $/MWh.
    pub alpha_in: f64,
    pub beta_in: f64,
    /// Day-ahead spread between the CTS bus and the internal node, $/MWh.
    pub da_spread: f64,
}

impl UtcPosition {
    /// Real-time return of the position at tie-line schedule `q`.
    pub fn payoff_at(&self, q: f64) -> f64 {
        (self.alpha_in - self.beta_in * q - self.da_spread) * self.megawatts_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    High,
    Intermediate,
    Low,
    /// Symmetric equilibrium of the conjectured-spread game.
    Conjectured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// `W(Q_CTS) / W(Q_TO)`.
    pub eta: f64,
    pub regime: Regime,
    /// `beta * sum B / alpha`, reported in the low-liquidity regime.
    pub z: Option<f64>,
    pub lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumProfile {
    pub thetas_ne: Vec<f64>,
    /// The pivotal bidder, when one bids a positive amount.
    pub marginal_player: Option<usize>,
    pub regime: Regime,
    pub clearing: ClearingResult,
    pub efficiency: EfficiencyReport,
}

/// `P(Q_CTS) B_i - theta_i - c x_i` under the clearing of `profile`.
pub fn payoff(model: &SpreadModel, bidders: &[Bidder], profile: &BidProfile, i: usize) -> Result<f64> {
    let r = clear(model, bidders, profile)?;
    payoff_from(&r, bidders, profile, i)
}

fn payoff_from(r: &ClearingResult, bidders: &[Bidder], profile: &BidProfile, i: usize) -> Result<f64> {
    let b = bidders.get(i).ok_or(Error::IndexOutOfRange { index: i, len: bidders.len() })?;
    Ok(r.price_p * b.liquidity_b - profile.0[i] - b.cost_c * r.allocations_x[i])
}

/// Baseline payoff plus the return of bidder `i`'s UTC positions.
pub fn payoff_utc(model: &SpreadModel, bidders: &[Bidder], profile: &BidProfile, i: usize) -> Result<f64> {
    let r = clear(model, bidders, profile)?;
    let base = payoff_from(&r, bidders, profile, i)?;
    Ok(base + bidders[i].utc.iter().map(|u| u.payoff_at(r.q_cts)).sum::<f64>())
}

/// Checks `P''(Q) (sum B - Q) >= 2 P'(Q)` at every grid point.
///
/// This curvature condition guarantees that an equilibrium exists for a
/// general concave spread.
pub fn check_existence_condition(model: &SpreadModel, sum_b: f64, q_grid: &[f64]) -> Result<bool> {
    for &q in q_grid {
        if !(0.0..=sum_b).contains(&q) {
            return Err(Error::InvalidInput(format!("grid point {q} outside [0, {sum_b}]")));
        }
        if model.second_derivative(q)? * (sum_b - q) < 2.0 * model.derivative(q)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn efficiency(model: &SpreadModel, result: &ClearingResult, regime: Regime, sum_b: f64) -> Result<EfficiencyReport> {
    let bench = model.tie_optimization()?;
    if result.q_cts < 0.0 {
        return Err(Error::InvalidInput(format!("equilibrium schedule {} is negative", result.q_cts)));
    }
    let eta = allocation_welfare(model, result)? / bench.welfare_at_q_to;
    let (z, lower_bound) = match regime {
        Regime::High => (None, 1.0),
        Regime::Intermediate => (None, 0.75),
        Regime::Low => {
            let z = sum_b / bench.q_to;
            (Some(z), 2.0 * z - z * z)
        }
        Regime::Conjectured => (None, 0.0),
    };
    Ok(EfficiencyReport {
        eta,
        regime,
        z,
        lower_bound,
    })
}

/// Index of the unique maximum, or the tied indices.
fn unique_argmax(values: &[f64]) -> std::result::Result<usize, Vec<usize>> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at_max: Vec<usize> = (0..values.len()).filter(|&i| values[i] == max).collect();
    if at_max.len() == 1 {
        Ok(at_max[0])
    } else {
        Err(at_max)
    }
}

/// Classifies liquidity; the high-liquidity test runs first so that boundary
/// instances resolve in the same order as the case split.
fn classify(sum_b: f64, pivot_b: f64, q_to: f64) -> Regime {
    if sum_b - pivot_b >= q_to {
        Regime::High
    } else if (sum_b - q_to).abs() < pivot_b {
        Regime::Intermediate
    } else {
        Regime::Low
    }
}

/// Pivot bid `(beta^2 B^2 - P(sum B)^2) / 4 beta` for pivot budget `b`.
fn pivot_bid(alpha: f64, beta: f64, sum_b: f64, b: f64) -> f64 {
    let p = alpha - beta * sum_b;
    (beta * beta * b * b - p * p) / (4.0 * beta)
}

/// Unique equilibrium of the baseline game with zero transaction costs.
///
/// With `require_unique_max` unset, tied maximal budgets resolve to the
/// lowest index.
pub fn nash_baseline(alpha: f64, beta: f64, liquidities: &[f64], require_unique_max: bool) -> Result<EquilibriumProfile> {
    let model = SpreadModel::affine(alpha, beta)?;
    let bidders = clearing::roster(liquidities, 0.0);
    clearing::validate_roster(&bidders)?;
    let m = match unique_argmax(liquidities) {
        Ok(m) => m,
        Err(tied) if require_unique_max => return Err(Error::AmbiguousPivot(tied)),
        Err(tied) => tied[0],
    };
    pivot_equilibrium(&model, &bidders, m, liquidities[m])
}

/// Shared by the baseline and UTC games: the pivot `m` with budget `pivot_b`
/// is the only bidder that may bid above zero.
fn pivot_equilibrium(model: &SpreadModel, bidders: &[Bidder], m: usize, pivot_b: f64) -> Result<EquilibriumProfile> {
    let (alpha, beta) = model.affine_params().ok_or(Error::InvalidModel("closed forms need an affine spread".into()))?;
    let sum_b: f64 = bidders.iter().map(|b| b.liquidity_b).sum();
    let regime = classify(sum_b, pivot_b, alpha / beta);
    let mut thetas = vec![0.0; bidders.len()];
    if regime == Regime::Intermediate {
        thetas[m] = pivot_bid(alpha, beta, sum_b, pivot_b);
    }
    let profile = BidProfile(thetas);
    let clearing = clear(model, bidders, &profile)?;
    let efficiency = efficiency(model, &clearing, regime, sum_b)?;
    Ok(EquilibriumProfile {
        thetas_ne: profile.0,
        marginal_player: (regime == Regime::Intermediate).then_some(m),
        regime,
        clearing,
        efficiency,
    })
}

/// `B_i + sum_k (beta_in^k / beta) f_i^k`.
pub fn effective_budgets(beta: f64, bidders: &[Bidder]) -> Vec<f64> {
    bidders
        .iter()
        .map(|b| b.liquidity_b + b.utc.iter().map(|u| u.beta_in / beta * u.megawatts_f).sum::<f64>())
        .collect()
}

/// Equilibrium of the game with UTC positions (zero transaction costs).
///
/// The bidder with the largest effective budget becomes the pivot.
pub fn nash_utc(alpha: f64, beta: f64, bidders: &[Bidder]) -> Result<EquilibriumProfile> {
    let model = SpreadModel::affine(alpha, beta)?;
    clearing::validate_roster(bidders)?;
    for b in bidders {
        for u in &b.utc {
            if !(u.megawatts_f >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "UTC position {} of bidder {} must be nonnegative, got {}",
                    u.node_id, b.id, u.megawatts_f
                )));
            }
            if !(u.beta_in >= 0.0) {
                return Err(Error::InvalidInput(format!("UTC slope must be nonnegative, got {}", u.beta_in)));
            }
        }
    }
    let eff = effective_budgets(beta, bidders);
    let m = unique_argmax(&eff).map_err(Error::AmbiguousPivot)?;
    let mut zero_cost = bidders.to_vec();
    for b in &mut zero_cost {
        b.cost_c = 0.0;
    }
    pivot_equilibrium(&model, &zero_cost, m, eff[m])
}

/// Homogeneous bidders with their own affine conjecture of the spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjecturedGameSpec {
    pub n_players: usize,
    pub liquidity_b: f64,
    #[serde(default)]
    pub cost_c: f64,
    pub bidder_alpha: f64,
    pub bidder_beta: f64,
    pub so_alpha: f64,
    pub so_beta: f64,
    #[serde(default)]
    pub star_alpha: Option<f64>,
    #[serde(default)]
    pub star_beta: Option<f64>,
    /// Allowed `|N B - alpha / beta|` is this budget divided by `N`;
    /// defaults to `alpha / beta`.
    #[serde(default)]
    pub consistency_budget: Option<f64>,
}

/// Outcome of the forecast-correction test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCheck {
    /// Whether `gamma^2 / (beta beta_SO) <= 8 (Q_TO - Q*) (Q_TO - 2 Q* + N B)`.
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub q_cts: f64,
    pub q_to: f64,
    pub q_star: f64,
    /// Direct comparison `|Q_CTS - Q*| < |Q_TO - Q*|`.
    pub cts_closer: bool,
}

impl ConjecturedGameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_players == 0 {
            return Err(Error::EmptyRoster);
        }
        let positive = [
            ("liquidity_b", self.liquidity_b),
            ("bidder_alpha", self.bidder_alpha),
            ("bidder_beta", self.bidder_beta),
            ("so_alpha", self.so_alpha),
            ("so_beta", self.so_beta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.cost_c.is_finite() && self.cost_c >= 0.0) {
            return Err(Error::InvalidInput(format!("cost must be nonnegative, got {}", self.cost_c)));
        }
        let n = self.n_players as f64;
        let conjectured_q = self.bidder_alpha / self.bidder_beta;
        let budget = self.consistency_budget.unwrap_or(conjectured_q);
        let gap = (n * self.liquidity_b - conjectured_q).abs();
        if gap > budget / n {
            return Err(Error::InvalidInput(format!(
                "aggregate liquidity {} is {gap} away from the conjectured schedule {conjectured_q}, above {}",
                n * self.liquidity_b,
                budget / n
            )));
        }
        Ok(())
    }

    pub fn so_model(&self) -> Result<SpreadModel> {
        SpreadModel::affine(self.so_alpha, self.so_beta)
    }

    pub fn star_model(&self) -> Result<SpreadModel> {
        let a = self.star_alpha.ok_or(Error::MissingParameter("star_alpha"))?;
        let b = self.star_beta.ok_or(Error::MissingParameter("star_beta"))?;
        SpreadModel::affine(a, b)
    }

    pub fn bidders(&self) -> Vec<Bidder> {
        clearing::roster(&vec![self.liquidity_b; self.n_players], self.cost_c)
    }

    /// `gamma = c (2 - 1/N) + beta B`.
    pub fn gamma(&self) -> f64 {
        let n = self.n_players as f64;
        self.cost_c * (2.0 - 1.0 / n) + self.bidder_beta * self.liquidity_b
    }

    /// Price a bidder expects from total bid `sum_theta`.
    ///
    /// The default is the large-N approximation `sqrt(beta sum theta)`; the
    /// exact root of the conjectured clearing is available for sensitivity runs.
    pub fn perceived_price(&self, sum_theta: f64, exact: bool) -> f64 {
        let beta = self.bidder_beta;
        if exact {
            let p_nb = self.bidder_alpha - beta * self.n_players as f64 * self.liquidity_b;
            0.5 * (p_nb + (p_nb * p_nb + 4.0 * beta * sum_theta).sqrt())
        } else {
            (beta * sum_theta).sqrt()
        }
    }

    /// Perceived payoff `p B - theta_i - c (B - theta_i / p)`.
    pub fn perceived_payoff(&self, profile: &BidProfile, i: usize, exact: bool) -> Result<f64> {
        let theta_i = *profile.0.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: profile.0.len(),
        })?;
        let p = self.perceived_price(profile.total(), exact);
        let x = if p > 0.0 { self.liquidity_b - theta_i / p } else { self.liquidity_b };
        Ok(p * self.liquidity_b - theta_i - self.cost_c * x)
    }

    /// Derivative of the approximate perceived payoff with respect to `theta_i`.
    pub fn foc_residual(&self, profile: &BidProfile, i: usize) -> f64 {
        let sum = profile.total();
        let p = self.perceived_price(sum, false);
        let theta_i = profile.0[i];
        self.bidder_beta * self.liquidity_b / (2.0 * p) - 1.0 + self.cost_c * (1.0 / p - theta_i / (2.0 * p * sum))
    }
}

/// Symmetric equilibrium of the conjectured-spread game, cleared by the operators.
pub fn nash_conjectured(spec: &ConjecturedGameSpec) -> Result<EquilibriumProfile> {
    spec.validate()?;
    let n = spec.n_players as f64;
    let gamma = spec.gamma();
    let theta = gamma * gamma / (4.0 * n * spec.bidder_beta);
    let so = spec.so_model()?;
    let bidders = spec.bidders();
    let profile = BidProfile(vec![theta; spec.n_players]);
    let clearing = clear(&so, &bidders, &profile)?;
    let efficiency = efficiency(&so, &clearing, Regime::Conjectured, n * spec.liquidity_b)?;
    Ok(EquilibriumProfile {
        thetas_ne: profile.0,
        marginal_player: None,
        regime: Regime::Conjectured,
        clearing,
        efficiency,
    })
}

/// Tests whether strategic bidding moves the schedule closer to the ex-post
/// optimum `Q*` than the operators' own benchmark.
pub fn correction_condition(spec: &ConjecturedGameSpec) -> Result<CorrectionCheck> {
    let star = spec.star_model()?;
    let q_star = star.tie_optimization()?.q_to;
    let q_to = spec.so_alpha / spec.so_beta;
    let nb = spec.n_players as f64 * spec.liquidity_b;
    let gamma = spec.gamma();
    let lhs = gamma * gamma / (spec.bidder_beta * spec.so_beta);
    let rhs = 8.0 * (q_to - q_star) * (q_to - 2.0 * q_star + nb);
    let q_cts = nash_conjectured(spec)?.clearing.q_cts;
    Ok(CorrectionCheck {
        holds: lhs <= rhs,
        lhs,
        rhs,
        q_cts,
        q_to,
        q_star,
        cts_closer: (q_cts - q_star).abs() < (q_to - q_star).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Confirmed,
    Violated { index: usize, better_theta: f64, gain: f64 },
}

impl Verdict {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, Verdict::Confirmed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayoffKind {
    Baseline,
    Utc,
}

/// Scans unilateral deviations on a grid around each player's candidate bid.
///
/// Player `i` tries `grid_size` evenly spaced bids on
/// `[max(lower_i, theta_i - radius_i), theta_i + radius_i]`. The reported
/// violation is the largest gain across players; ties go to the lowest
/// player and grid index.
pub fn verify_with<F>(payoff: F, lower: &[f64], candidate: &BidProfile, grid_size: usize, radii: &[f64]) -> Result<Verdict>
where
    F: Fn(&BidProfile, usize) -> Result<f64>,
{
    if grid_size < 3 {
        return Err(Error::InvalidInput(format!("oracle grid needs at least 3 points, got {grid_size}")));
    }
    let n = candidate.0.len();
    if lower.len() != n || radii.len() != n {
        return Err(Error::MisalignedProfile {
            thetas: n,
            bidders: lower.len().min(radii.len()),
        });
    }
    let mut worst: Option<(usize, f64, f64)> = None;
    for i in 0..n {
        let base = payoff(candidate, i)?;
        let tol = GAIN_REL_TOL * base.abs().max(1.0);
        let theta = candidate.0[i];
        let lo = lower[i].max(theta - radii[i]);
        let hi = theta + radii[i];
        let step = (hi - lo) / (grid_size - 1) as f64;
        let mut best: Option<(f64, f64)> = None;
        for k in 0..grid_size {
            let t = if k == grid_size - 1 { hi } else { lo + step * k as f64 };
            let gain = payoff(&candidate.with(i, t), i)? - base;
            if gain > tol && best.is_none_or(|(_, g)| gain > g) {
                best = Some((t, gain));
            }
        }
        if let Some((t, gain)) = best {
            if worst.is_none_or(|(_, _, g)| gain > g) {
                worst = Some((i, t, gain));
            }
        }
    }
    Ok(match worst {
        None => Verdict::Confirmed,
        Some((index, better_theta, gain)) => Verdict::Violated {
            index,
            better_theta,
            gain,
        },
    })
}

/// Deviation oracle for the baseline or UTC payoff.
///
/// `radius` defaults to `beta B_i^2` per player, above which a bid earns a
/// negative payoff in the affine game; general spreads need an explicit radius.
pub fn verify_equilibrium(
    model: &SpreadModel,
    bidders: &[Bidder],
    candidate: &BidProfile,
    grid_size: usize,
    radius: Option<f64>,
    kind: PayoffKind,
) -> Result<Verdict> {
    clearing::validate_roster(bidders)?;
    if candidate.0.len() != bidders.len() {
        return Err(Error::MisalignedProfile {
            thetas: candidate.0.len(),
            bidders: bidders.len(),
        });
    }
    let radii: Vec<f64> = match (radius, model.affine_params()) {
        (Some(r), _) => vec![r; bidders.len()],
        (None, Some((_, beta))) => bidders.iter().map(|b| beta * b.liquidity_b * b.liquidity_b).collect(),
        (None, None) => return Err(Error::MissingParameter("radius")),
    };
    let lower: Vec<f64> = bidders.iter().map(Bidder::min_bid).collect();
    let f = |p: &BidProfile, i: usize| match kind {
        PayoffKind::Baseline => payoff(model, bidders, p, i),
        PayoffKind::Utc => payoff_utc(model, bidders, p, i),
    };
    verify_with(f, &lower, candidate, grid_size, &radii)
}

/// Deviation oracle on the bidders' perceived payoff in the conjectured game.
pub fn verify_conjectured(
    spec: &ConjecturedGameSpec,
    candidate: &BidProfile,
    grid_size: usize,
    radius: Option<f64>,
    exact: bool,
) -> Result<Verdict> {
    let n = spec.n_players;
    let r = radius.unwrap_or(spec.bidder_beta * spec.liquidity_b * spec.liquidity_b);
    let lower = vec![spec.cost_c * spec.liquidity_b; n];
    verify_with(|p, i| spec.perceived_payoff(p, i, exact), &lower, candidate, grid_size, &vec![r; n])
}
