//! CSV writers for round logs and figure series.

use cts_lab_core::clearing::Bidder;
use cts_lab_core::game::EquilibriumProfile;
use cts_lab_core::learning::{cumulative_nash_series, RunOutput};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Cumulative Nash-selection percentage per agent.
    Fig3,
    /// Schedule ratio and spread per round, for every replication.
    Fig4,
    /// Schedule against the operators' and the ex-post optimal schedules.
    Fig5,
}

impl FigureKind {
    pub fn name(self) -> &'static str {
        match self {
            FigureKind::Fig3 => "fig3",
            FigureKind::Fig4 => "fig4",
            FigureKind::Fig5 => "fig5",
        }
    }
}

pub enum FigureSource<'a> {
    /// Learning replications; series start at `first_round`.
    Runs { runs: &'a [RunOutput], first_round: usize },
    /// A one-shot equilibrium, shown as a single fig5 point.
    Equilibrium { profile: &'a EquilibriumProfile, q_to: f64, q_star: f64 },
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, CliError> {
    w.into_inner().map_err(csv_err)
}

pub fn emit_figure_series(source: FigureSource<'_>, which: FigureKind) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match (source, which) {
        (FigureSource::Runs { runs, first_round }, FigureKind::Fig3) => {
            let run = runs.first().ok_or_else(|| CliError::Output("no runs".into()))?;
            w.write_record(["round", "agent_id", "cumulative_nash_pct"]).map_err(csv_err)?;
            for (k, row) in cumulative_nash_series(&run.records, first_round).iter().enumerate() {
                for (i, pct) in row.iter().enumerate() {
                    w.serialize((first_round + k, i + 1, pct)).map_err(csv_err)?;
                }
            }
        }
        (FigureSource::Runs { runs, first_round }, FigureKind::Fig4) => {
            w.write_record(["run_id", "round", "q_ratio", "spread"]).map_err(csv_err)?;
            for (run_id, run) in runs.iter().enumerate() {
                for r in run.records.iter().skip(first_round) {
                    w.serialize((run_id, r.round, r.q_cts / run.q_to, r.spread)).map_err(csv_err)?;
                }
            }
        }
        (FigureSource::Runs { runs, first_round }, FigureKind::Fig5) => {
            let run = runs.first().ok_or_else(|| CliError::Output("no runs".into()))?;
            w.write_record(["round", "q_cts", "q_to", "q_star"]).map_err(csv_err)?;
            for r in run.records.iter().skip(first_round) {
                w.serialize((r.round, r.q_cts, run.q_to, run.q_star)).map_err(csv_err)?;
            }
        }
        (FigureSource::Equilibrium { profile, q_to, q_star }, FigureKind::Fig5) => {
            w.write_record(["round", "q_cts", "q_to", "q_star"]).map_err(csv_err)?;
            w.serialize((0, profile.clearing.q_cts, q_to, q_star)).map_err(csv_err)?;
        }
        (FigureSource::Equilibrium { .. }, other) => {
            return Err(CliError::Output(format!("{} needs learning runs, not an equilibrium", other.name())));
        }
    }
    finish(w)
}

/// One row per agent and round: `run_id, round, agent_id, arm, theta, reward, nash, q_cts, spread`.
pub fn rounds_csv(runs: &[RunOutput], bidders: &[Bidder]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "round", "agent_id", "arm", "theta", "reward", "nash", "q_cts", "spread"])
        .map_err(csv_err)?;
    for (run_id, run) in runs.iter().enumerate() {
        for r in &run.records {
            for (i, b) in bidders.iter().enumerate() {
                w.serialize((run_id, r.round, &b.id, r.arms[i], r.thetas[i], r.rewards[i], r.nash_flags[i], r.q_cts, r.spread))
                    .map_err(csv_err)?;
            }
        }
    }
    finish(w)
}
