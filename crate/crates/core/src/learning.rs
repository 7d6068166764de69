//! UCB learners and the repeated-play harness.
//!
//! Every agent bids from a finite grid of actions. Each round all agents pick
//! an arm at once, the operators clear the profile against their spread model
//! and each agent is paid for its allocated flow at the realized spread.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clearing::{self, clear, BidProfile, Bidder};
use crate::error::{Error, Result};
use crate::spread::SpreadModel;

pub const DEFAULT_RHO: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    actions: Vec<f64>,
    /// Index of the agent's Nash action, when one is known.
    nash_index: Option<usize>,
}

impl ActionGrid {
    pub fn new(actions: Vec<f64>, nash_index: Option<usize>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidInput("action grid is empty".into()));
        }
        if actions.iter().any(|a| !a.is_finite()) || actions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("action grid must be finite and strictly increasing".into()));
        }
        if let Some(k) = nash_index {
            if k >= actions.len() {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    len: actions.len(),
                });
            }
        }
        Ok(Self { actions, nash_index })
    }

    /// `count` evenly spaced actions on `[lo, hi]`. A Nash action replaces the
    /// nearest grid point so that the grid contains it exactly.
    pub fn uniform(lo: f64, hi: f64, count: usize, nash: Option<f64>) -> Result<Self> {
        if count < 2 || !(hi > lo) {
            return Err(Error::InvalidInput(format!("need count >= 2 and lo < hi, got {count} on [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (count - 1) as f64;
        let mut actions: Vec<f64> = (0..count).map(|k| if k == count - 1 { hi } else { lo + step * k as f64 }).collect();
        let nash_index = match nash {
            None => None,
            Some(theta) => {
                if !(lo..=hi).contains(&theta) {
                    return Err(Error::InvalidInput(format!("Nash action {theta} outside [{lo}, {hi}]")));
                }
                let k = nearest(&actions, theta);
                actions[k] = theta;
                Some(k)
            }
        };
        Self::new(actions, nash_index)
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn nash_index(&self) -> Option<usize> {
        self.nash_index
    }
}

/// Index of the grid point closest to `x`; ties go to the lower index.
fn nearest(actions: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (k, a) in actions.iter().enumerate() {
        if (a - x).abs() < (actions[best] - x).abs() {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub grid: ActionGrid,
    pub avg_reward_r: Vec<f64>,
    pub pull_count_t: Vec<u64>,
    pub rho: f64,
}

impl AgentState {
    pub fn new(grid: ActionGrid, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::InvalidInput(format!("exploration weight must be nonnegative, got {rho}")));
        }
        let m = grid.len();
        Ok(Self {
            grid,
            avg_reward_r: vec![0.0; m],
            pull_count_t: vec![0; m],
            rho,
        })
    }

    /// Counts the pull, then moves the arm's mean toward `reward` by `1 / T^k`.
    pub fn ucb_update(&mut self, k: usize, reward: f64) -> Result<()> {
        let len = self.pull_count_t.len();
        let t = self.pull_count_t.get_mut(k).ok_or(Error::IndexOutOfRange { index: k, len })?;
        *t += 1;
        let t = *t as f64;
        self.avg_reward_r[k] += (reward - self.avg_reward_r[k]) / t;
        Ok(())
    }

    pub fn initialized(&self) -> bool {
        self.pull_count_t.iter().all(|&t| t > 0)
    }

    pub fn total_pulls(&self) -> u64 {
        self.pull_count_t.iter().sum()
    }

    /// `R^j + rho sqrt(ln(sum T) / T^j)` for every arm.
    pub fn ucb_scores(&self) -> Vec<f64> {
        let log_total = (self.total_pulls() as f64).ln();
        self.avg_reward_r
            .iter()
            .zip(&self.pull_count_t)
            .map(|(r, &t)| r + self.rho * (log_total / t as f64).sqrt())
            .collect()
    }

    /// Arm with the highest upper confidence bound, lowest index on ties.
    ///
    /// Arms never pulled are selected first, in index order.
    pub fn ucb_select(&self) -> usize {
        if let Some(k) = self.pull_count_t.iter().position(|&t| t == 0) {
            return k;
        }
        let scores = self.ucb_scores();
        let mut best = 0;
        for (k, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = k;
            }
        }
        best
    }
}

/// How the initial sweep over every arm is ordered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitOrder {
    /// Round `t` plays arm `t` for every agent.
    Sequential,
    /// Each agent sweeps its arms in its own seeded random order.
    #[default]
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub arms: Vec<usize>,
    pub thetas: Vec<f64>,
    pub q_cts: f64,
    /// Realized settlement spread, $/MWh.
    pub spread: f64,
    pub rewards: Vec<f64>,
    pub nash_flags: Vec<bool>,
}

/// Everything a repeated-game run needs.
#[derive(Debug, Clone)]
pub struct RepeatedGame {
    /// Spread at which allocations are paid.
    pub settlement: SpreadModel,
    /// Spread the operators clear against.
    pub so_model: SpreadModel,
    pub bidders: Vec<Bidder>,
    pub grids: Vec<ActionGrid>,
    pub rho: f64,
    pub rounds: usize,
    pub seed: u64,
    pub init_order: InitOrder,
    /// Standard deviation of additive noise on the settlement spread, $/MWh.
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    /// Operators' tie-optimization schedule.
    pub q_to: f64,
    /// Tie-optimization schedule of the settlement spread.
    pub q_star: f64,
    /// Length of the initial sweep.
    pub init_rounds: usize,
}

impl RepeatedGame {
    fn validate(&self) -> Result<()> {
        clearing::validate_roster(&self.bidders)?;
        if self.grids.len() != self.bidders.len() {
            return Err(Error::MisalignedProfile {
                thetas: self.grids.len(),
                bidders: self.bidders.len(),
            });
        }
        for (g, b) in self.grids.iter().zip(&self.bidders) {
            if g.actions()[0] < b.min_bid() {
                return Err(Error::InvalidInput(format!(
                    "grid of bidder {} starts at {}, below the fee floor {}",
                    b.id,
                    g.actions()[0],
                    b.min_bid()
                )));
            }
        }
        let m = self.grids.iter().map(ActionGrid::len).max().unwrap_or(0);
        if self.rounds < m {
            return Err(Error::InvalidInput(format!("{} rounds cannot cover {m} arms", self.rounds)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidInput(format!("noise std must be nonnegative, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut agents = self
            .grids
            .iter()
            .map(|g| AgentState::new(g.clone(), self.rho))
            .collect::<Result<Vec<_>>>()?;
        let orders: Vec<Vec<usize>> = self
            .grids
            .iter()
            .map(|g| {
                let mut order: Vec<usize> = (0..g.len()).collect();
                if self.init_order == InitOrder::Shuffled {
                    order.shuffle(&mut rng);
                }
                order
            })
            .collect();
        let init_rounds = self.grids.iter().map(ActionGrid::len).max().unwrap_or(0);
        let noise = (self.noise_std > 0.0)
            .then(|| Normal::new(0.0, self.noise_std).map_err(|e| Error::InvalidInput(e.to_string())))
            .transpose()?;

        let mut records = Vec::with_capacity(self.rounds);
        for round in 0..self.rounds {
            let arms: Vec<usize> = agents
                .iter()
                .zip(&orders)
                .map(|(a, order)| match order.get(round) {
                    Some(&k) => k,
                    None => a.ucb_select(),
                })
                .collect();
            let thetas: Vec<f64> = arms.iter().zip(&self.grids).map(|(&k, g)| g.actions()[k]).collect();
            let cleared = clear(&self.so_model, &self.bidders, &BidProfile(thetas.clone()))?;
            let mut spread = self.settlement.evaluate(cleared.q_cts)?;
            if let Some(n) = &noise {
                spread += n.sample(&mut rng);
            }
            let rewards: Vec<f64> = cleared
                .allocations_x
                .iter()
                .zip(&self.bidders)
                .map(|(x, b)| (spread - b.cost_c) * x)
                .collect();
            for ((agent, &k), &r) in agents.iter_mut().zip(&arms).zip(&rewards) {
                agent.ucb_update(k, r)?;
            }
            let nash_flags = arms.iter().zip(&self.grids).map(|(&k, g)| g.nash_index() == Some(k)).collect();
            records.push(RoundRecord {
                round,
                arms,
                thetas,
                q_cts: cleared.q_cts,
                spread,
                rewards,
                nash_flags,
            });
        }
        Ok(RunOutput {
            records,
            q_to: self.so_model.tie_optimization()?.q_to,
            q_star: self.settlement.tie_optimization()?.q_to,
            init_rounds,
        })
    }
}

/// Grids on `[lo, hi]` with each bidder's baseline Nash bid snapped in.
pub fn baseline_grids(alpha: f64, beta: f64, liquidities: &[f64], lo: f64, hi: f64, count: usize) -> Result<Vec<ActionGrid>> {
    let ne = crate::game::nash_baseline(alpha, beta, liquidities, false)?;
    ne.thetas_ne
        .iter()
        .map(|&theta| ActionGrid::uniform(lo, hi, count, Some(theta)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub first_round: usize,
    pub rounds: usize,
    pub mean_q_ratio: f64,
    pub median_q_ratio: f64,
    pub mean_spread: f64,
    pub median_spread: f64,
    /// Per-agent share of rounds in the window spent on the Nash action, percent.
    pub nash_pct: Vec<f64>,
    /// Same share over every round including the initial sweep.
    pub nash_pct_all_rounds: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn nash_pct(records: &[RoundRecord]) -> Vec<f64> {
    let agents = records.first().map_or(0, |r| r.nash_flags.len());
    (0..agents)
        .map(|i| 100.0 * records.iter().filter(|r| r.nash_flags[i]).count() as f64 / records.len() as f64)
        .collect()
}

/// Summary over rounds `first_round..`; `None` starts after the initial sweep.
pub fn trajectory_stats(output: &RunOutput, first_round: Option<usize>) -> Result<TrajectoryStats> {
    let first = first_round.unwrap_or(output.init_rounds);
    let window = output.records.get(first..).unwrap_or(&[]);
    if window.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no rounds from {first} on in a run of {}",
            output.records.len()
        )));
    }
    let ratios: Vec<f64> = window.iter().map(|r| r.q_cts / output.q_to).collect();
    let spreads: Vec<f64> = window.iter().map(|r| r.spread).collect();
    let n = window.len() as f64;
    Ok(TrajectoryStats {
        first_round: first,
        rounds: window.len(),
        mean_q_ratio: ratios.iter().sum::<f64>() / n,
        median_q_ratio: median(ratios),
        mean_spread: spreads.iter().sum::<f64>() / n,
        median_spread: median(spreads),
        nash_pct: nash_pct(window),
        nash_pct_all_rounds: nash_pct(&output.records),
    })
}

/// Running Nash-selection percentage per agent, one row per round from
/// `first_round` on.
pub fn cumulative_nash_series(records: &[RoundRecord], first_round: usize) -> Vec<Vec<f64>> {
    let agents = records.first().map_or(0, |r| r.nash_flags.len());
    let mut hits = vec![0usize; agents];
    records
        .iter()
        .skip(first_round)
        .enumerate()
        .map(|(k, r)| {
            for (h, &f) in hits.iter_mut().zip(&r.nash_flags) {
                *h += usize::from(f);
            }
            hits.iter().map(|&h| 100.0 * h as f64 / (k + 1) as f64).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::roster;

    fn agent(m: usize, rho: f64) -> AgentState {
        AgentState::new(ActionGrid::uniform(0.0, 1.0, m, None).unwrap(), rho).unwrap()
    }

    #[test]
    fn update_examples() {
        let mut a = agent(2, 2.0);
        a.pull_count_t[0] = 1;
        a.ucb_update(0, 4.0).unwrap();
        assert_eq!((a.pull_count_t[0], a.avg_reward_r[0]), (2, 2.0));
        a.ucb_update(0, 2.0).unwrap();
        assert_eq!((a.pull_count_t[0], a.avg_reward_r[0]), (3, 2.0));
        assert!(a.ucb_update(2, 1.0).is_err());
    }

    #[test]
    fn select_examples() {
        let mut a = agent(2, 0.0);
        a.avg_reward_r = vec![1.0, 0.0];
        a.pull_count_t = vec![1, 1];
        assert_eq!(a.ucb_select(), 0);

        let mut a = agent(2, 2.0);
        a.pull_count_t = vec![5, 1];
        assert_eq!(a.ucb_select(), 1);

        let mut a = agent(3, 2.0);
        a.avg_reward_r = vec![3.0; 3];
        a.pull_count_t = vec![4; 3];
        assert_eq!(a.ucb_select(), 0);
    }

    #[test]
    fn constant_rewards_lock_onto_dominant_arm() {
        let mut a = agent(2, 2.0);
        let reward = [1.0, 100.0];
        a.ucb_update(0, reward[0]).unwrap();
        a.ucb_update(1, reward[1]).unwrap();
        for _ in 0..500 {
            let k = a.ucb_select();
            assert_eq!(k, 1);
            a.ucb_update(k, reward[k]).unwrap();
        }
    }

    #[test]
    fn grid_snaps_nash_action() {
        let g = ActionGrid::uniform(0.0, 6000.0, 10, Some(4882.0)).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.nash_index(), Some(7));
        assert_eq!(g.actions()[7], 4882.0);
        let g = ActionGrid::uniform(0.0, 6000.0, 10, Some(0.0)).unwrap();
        assert_eq!(g.nash_index(), Some(0));
        assert!(ActionGrid::uniform(0.0, 6000.0, 10, Some(7000.0)).is_err());
        assert!(ActionGrid::new(vec![1.0, 1.0], None).is_err());
    }

    fn game(init_order: InitOrder, seed: u64, noise_std: f64) -> RepeatedGame {
        let model = SpreadModel::affine(10.0, 1.0).unwrap();
        let b = [2.0, 3.0, 6.0];
        RepeatedGame {
            settlement: model.clone(),
            so_model: model,
            bidders: roster(&b, 0.0),
            grids: baseline_grids(10.0, 1.0, &b, 0.0, 20.0, 6).unwrap(),
            rho: DEFAULT_RHO,
            rounds: 200,
            seed,
            init_order,
            noise_std,
        }
    }

    #[test]
    fn records_follow_clearing() {
        let out = game(InitOrder::Sequential, 0, 0.0).run().unwrap();
        assert_eq!(out.records.len(), 200);
        assert_eq!(out.init_rounds, 6);
        for r in &out.records[..6] {
            assert!(r.arms.iter().all(|&k| k == r.round));
        }
        for r in &out.records {
            let so = SpreadModel::affine(10.0, 1.0).unwrap();
            let c = clear(&so, &roster(&[2.0, 3.0, 6.0], 0.0), &BidProfile(r.thetas.clone())).unwrap();
            assert_eq!(r.q_cts, c.q_cts);
            assert_eq!(r.spread, c.price_p);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let a = game(InitOrder::Shuffled, 7, 0.5).run().unwrap();
        let b = game(InitOrder::Shuffled, 7, 0.5).run().unwrap();
        assert_eq!(a, b);
        let c = game(InitOrder::Shuffled, 8, 0.5).run().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn misaligned_setup_rejected() {
        let mut g = game(InitOrder::Sequential, 0, 0.0);
        g.grids.pop();
        assert!(matches!(g.run(), Err(Error::MisalignedProfile { .. })));
        let mut g = game(InitOrder::Sequential, 0, 0.0);
        g.rounds = 3;
        assert!(g.run().is_err());
    }

    #[test]
    fn stats_of_constant_run() {
        let rec = |round| RoundRecord {
            round,
            arms: vec![0],
            thetas: vec![0.0],
            q_cts: 10.0,
            spread: 0.0,
            rewards: vec![0.0],
            nash_flags: vec![true],
        };
        let out = RunOutput {
            records: (0..5).map(rec).collect(),
            q_to: 10.0,
            q_star: 10.0,
            init_rounds: 2,
        };
        let s = trajectory_stats(&out, None).unwrap();
        assert_eq!((s.mean_q_ratio, s.median_spread, s.rounds), (1.0, 0.0, 3));
        assert_eq!(s.nash_pct, vec![100.0]);
        assert!(trajectory_stats(&out, Some(5)).is_err());
        let series = cumulative_nash_series(&out.records, 2);
        assert_eq!(series, vec![vec![100.0]; 3]);
    }
}
