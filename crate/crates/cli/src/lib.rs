//! Experiment runner behind the `cts-lab` binary.
//!
//! Each experiment kind reads its sections of an [`ExperimentConfig`], calls
//! into `cts-lab-core` and writes `result.json` plus, for learning runs, the
//! round log and plot-ready series.

pub mod config;
pub mod series;

use std::path::{Path, PathBuf};

use cts_lab_core::calibrate::{self, RegressionFit, SpreadStats};
use cts_lab_core::clearing::{self, clear, BidProfile, Bidder, ClearingResult};
use cts_lab_core::game::{self, ConjecturedGameSpec, CorrectionCheck, EquilibriumProfile, PayoffKind, Verdict};
use cts_lab_core::learning::{self, ActionGrid, RepeatedGame, RunOutput, TrajectoryStats};
use cts_lab_core::spread::{Benchmark, SpreadModel};
use log::info;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub use config::{ExperimentConfig, ExperimentKind};
pub use series::{emit_figure_series, FigureKind, FigureSource};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Compute(#[from] cts_lab_core::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::Compute(e) => e.code(),
            CliError::Output(_) => "output_error",
        }
    }

    /// Machine-readable error document printed on standard error.
    pub fn payload(&self) -> serde_json::Value {
        json!({ "schema_version": SCHEMA_VERSION, "error": { "code": self.code(), "message": self.to_string() } })
    }
}

fn output_err(e: impl std::fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

#[derive(Debug, Serialize)]
struct ClearPayload {
    clearing: ClearingResult,
    benchmark: Benchmark,
    welfare: f64,
    efficiency: f64,
    payoffs: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct NashPayload {
    equilibrium: EquilibriumProfile,
    oracle: Verdict,
}

#[derive(Debug, Serialize)]
struct ConjecturedPayload {
    equilibrium: EquilibriumProfile,
    gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    correction: Option<CorrectionCheck>,
}

#[derive(Debug, Serialize)]
struct ReplicationSummary {
    run_id: usize,
    seed: u64,
    stats: TrajectoryStats,
    /// Share of windowed rounds whose schedule is closer to `q_star` than `q_to` is.
    closer_than_to_pct: f64,
}

#[derive(Debug, Serialize)]
struct LearnPayload {
    q_to: f64,
    q_star: f64,
    init_rounds: usize,
    nash_thetas: Vec<Option<f64>>,
    replications: Vec<ReplicationSummary>,
}

#[derive(Debug, Serialize)]
struct CalibratePayload {
    fit: RegressionFit,
    spread: SpreadStats,
    skipped_rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conversion_error: Option<String>,
}

#[derive(Debug, Serialize)]
struct SpreadStatsPayload {
    stats: SpreadStats,
    skipped_rows: usize,
}

/// Files written by a run, relative to its output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn learning_grids(cfg: &ExperimentConfig, so: &SpreadModel, settlement: &SpreadModel) -> Result<(Vec<ActionGrid>, Vec<Option<f64>>), CliError> {
    let l = cfg.learning.clone().unwrap_or_default();
    let bidders = cfg.roster()?;
    let nash: Vec<Option<f64>> = match l.nash {
        config::NashTarget::None => vec![None; bidders.len()],
        config::NashTarget::Baseline => {
            let (alpha, beta) = so
                .affine_params()
                .ok_or_else(|| CliError::Config("baseline Nash flags need an affine model".into()))?;
            let b: Vec<f64> = bidders.iter().map(|b| b.liquidity_b).collect();
            game::nash_baseline(alpha, beta, &b, false)?.thetas_ne.into_iter().map(Some).collect()
        }
        config::NashTarget::Conjectured => {
            let spec = homogeneous_spec(bidders, so, settlement)?;
            let theta = game::nash_conjectured(&spec)?.thetas_ne[0];
            vec![Some(theta); bidders.len()]
        }
    };
    let grids = bidders
        .iter()
        .zip(&nash)
        .map(|(b, ne)| {
            let lo = l.grid_lo.unwrap_or(b.min_bid());
            let hi = lo + l.grid_span;
            ActionGrid::uniform(lo, hi, l.grid_count, ne.filter(|t| (lo..=hi).contains(t)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let nash = nash
        .into_iter()
        .zip(&grids)
        .map(|(ne, g)| ne.filter(|_| g.nash_index().is_some()))
        .collect();
    Ok((grids, nash))
}

/// Conjectured game of a homogeneous roster that conjectures the settlement spread.
fn homogeneous_spec(bidders: &[Bidder], so: &SpreadModel, settlement: &SpreadModel) -> Result<ConjecturedGameSpec, CliError> {
    let first = &bidders[0];
    if bidders.iter().any(|b| b.liquidity_b != first.liquidity_b || b.cost_c != first.cost_c) {
        return Err(CliError::Config("conjectured Nash flags need identical bidders".into()));
    }
    let affine = |m: &SpreadModel| m.affine_params().ok_or_else(|| CliError::Config("conjectured Nash flags need affine models".into()));
    let (alpha, beta) = affine(settlement)?;
    let (so_alpha, so_beta) = affine(so)?;
    Ok(ConjecturedGameSpec {
        n_players: bidders.len(),
        liquidity_b: first.liquidity_b,
        cost_c: first.cost_c,
        bidder_alpha: alpha,
        bidder_beta: beta,
        so_alpha,
        so_beta,
        star_alpha: Some(alpha),
        star_beta: Some(beta),
        consistency_budget: Some(f64::INFINITY),
    })
}

/// Runs every replication of a learning experiment; replication `r` uses
/// seed `seed + r` and runs on its own thread.
pub fn run_learning(cfg: &ExperimentConfig) -> Result<(Vec<RunOutput>, Vec<Option<f64>>), CliError> {
    let l = cfg.learning.clone().unwrap_or_default();
    let settlement = cfg.spread()?;
    let so = settlement
        .perturbed(l.so_alpha_factor, l.so_beta_factor)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (grids, nash) = learning_grids(cfg, &so, &settlement)?;
    let seed = cfg.seed.ok_or_else(|| CliError::Config("learn needs a seed".into()))?;
    let game = RepeatedGame {
        settlement,
        so_model: so,
        bidders: cfg.roster()?.to_vec(),
        grids,
        rho: l.rho,
        rounds: l.rounds,
        seed,
        init_order: l.init_order,
        noise_std: l.noise_std,
    };
    let outputs = std::thread::scope(|s| {
        let handles: Vec<_> = (0..l.replications)
            .map(|r| {
                let mut g = game.clone();
                g.seed = seed.wrapping_add(r as u64);
                s.spawn(move || g.run())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replication thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok((outputs, nash))
}

fn payload(kind: ExperimentKind, cfg: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<serde_json::Value, CliError> {
    use ExperimentKind::*;
    Ok(match kind {
        Clear => {
            let model = cfg.spread()?;
            let bidders = cfg.roster()?;
            let profile = BidProfile(cfg.profile.as_ref().expect("validated").thetas.clone());
            let r = clear(&model, bidders, &profile)?;
            let benchmark = model.tie_optimization()?;
            let welfare = clearing::allocation_welfare(&model, &r)?;
            let payoffs = (0..bidders.len())
                .map(|i| game::payoff_utc(&model, bidders, &profile, i))
                .collect::<Result<Vec<_>, _>>()?;
            to_json(&ClearPayload {
                efficiency: welfare / benchmark.welfare_at_q_to,
                clearing: r,
                benchmark,
                welfare,
                payoffs,
            })
        }
        Nash | NashUtc => {
            let model = cfg.spread()?;
            let (alpha, beta) = model.affine_params().expect("validated");
            let bidders = cfg.roster()?;
            let (equilibrium, kind) = if kind == Nash {
                let b: Vec<f64> = bidders.iter().map(|b| b.liquidity_b).collect();
                let unique = cfg.nash.as_ref().is_none_or(|n| n.require_unique_max);
                (game::nash_baseline(alpha, beta, &b, unique)?, PayoffKind::Baseline)
            } else {
                (game::nash_utc(alpha, beta, bidders)?, PayoffKind::Utc)
            };
            let zero_cost: Vec<Bidder> = bidders.iter().cloned().map(|mut b| {
                b.cost_c = 0.0;
                b
            }).collect();
            let radius = game::effective_budgets(beta, &zero_cost).iter().map(|e| beta * e * e).fold(0.0, f64::max);
            let oracle = game::verify_equilibrium(
                &model,
                &zero_cost,
                &BidProfile(equilibrium.thetas_ne.clone()),
                game::DEFAULT_ORACLE_GRID,
                Some(radius),
                kind,
            )?;
            to_json(&NashPayload { equilibrium, oracle })
        }
        NashConjectured => {
            let spec = cfg.conjectured.as_ref().expect("validated");
            let correction = if spec.star_alpha.is_some() || spec.star_beta.is_some() {
                Some(game::correction_condition(spec)?)
            } else {
                None
            };
            let equilibrium = game::nash_conjectured(spec)?;
            if let Some(c) = &correction {
                let source = FigureSource::Equilibrium {
                    profile: &equilibrium,
                    q_to: c.q_to,
                    q_star: c.q_star,
                };
                files.push(write_file(dir, "series_fig5.csv", &emit_figure_series(source, FigureKind::Fig5)?)?);
            }
            to_json(&ConjecturedPayload {
                equilibrium,
                gamma: spec.gamma(),
                correction,
            })
        }
        Verify => {
            let model = cfg.spread()?;
            let v = cfg.verify.clone().unwrap_or_else(|| toml::from_str("").expect("defaults"));
            let profile = BidProfile(cfg.profile.as_ref().expect("validated").thetas.clone());
            to_json(&game::verify_equilibrium(&model, cfg.roster()?, &profile, v.grid_size, v.radius, v.payoff)?)
        }
        Learn => {
            let l = cfg.learning.clone().unwrap_or_default();
            let (outputs, nash_thetas) = run_learning(cfg)?;
            let first = &outputs[0];
            let window = l.window_start.unwrap_or(first.init_rounds);
            let mut replications = Vec::new();
            for (run_id, out) in outputs.iter().enumerate() {
                let stats = learning::trajectory_stats(out, Some(window))?;
                let w = &out.records[window..];
                let closer = w.iter().filter(|r| (r.q_cts - out.q_star).abs() < (out.q_to - out.q_star).abs()).count();
                replications.push(ReplicationSummary {
                    run_id,
                    seed: cfg.seed.expect("validated").wrapping_add(run_id as u64),
                    stats,
                    closer_than_to_pct: 100.0 * closer as f64 / w.len() as f64,
                });
            }
            files.push(write_file(dir, "rounds.csv", &series::rounds_csv(&outputs, cfg.roster()?)?)?);
            for fig in [FigureKind::Fig3, FigureKind::Fig4, FigureKind::Fig5] {
                let bytes = emit_figure_series(FigureSource::Runs { runs: &outputs, first_round: window }, fig)?;
                files.push(write_file(dir, &format!("series_{}.csv", fig.name()), &bytes)?);
            }
            to_json(&LearnPayload {
                q_to: first.q_to,
                q_star: first.q_star,
                init_rounds: first.init_rounds,
                nash_thetas,
                replications,
            })
        }
        Calibrate | SpreadStats => {
            let c = cfg.calibration.as_ref().expect("validated");
            let loaded = calibrate::load_samples(&c.input, &c.columns)?;
            info!("loaded {} samples, skipped {}", loaded.samples.len(), loaded.skipped);
            let stats = calibrate::spread_stats(&loaded.samples)?;
            if kind == SpreadStats {
                to_json(&SpreadStatsPayload {
                    stats,
                    skipped_rows: loaded.skipped,
                })
            } else {
                let fit = calibrate::fit_regression(&loaded.samples, c.dependent)?;
                let (model, conversion_error) = match calibrate::to_spread_model(&fit, &loaded.samples) {
                    Ok(m) => (m.affine_params(), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                to_json(&CalibratePayload {
                    fit,
                    spread: stats,
                    skipped_rows: loaded.skipped,
                    alpha: model.map(|m| m.0),
                    beta: model.map(|m| m.1),
                    conversion_error,
                })
            }
        }
    })
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("payloads serialize to JSON")
}

/// Validates the config, runs the experiment and writes its artifacts into `out_dir`.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Artifacts, CliError> {
    cfg.validate_for(kind)?;
    std::fs::create_dir_all(out_dir).map_err(output_err)?;
    info!("running {} into {}", kind.name(), out_dir.display());
    let mut files = Vec::new();
    let result = payload(kind, cfg, out_dir, &mut files)?;
    // the output location is not part of the experiment
    let mut echo = cfg.clone();
    echo.out_dir = None;
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "kind": kind.name(),
        "config": serde_json::to_value(&echo).map_err(output_err)?,
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(output_err)?;
    text.push('\n');
    files.insert(0, write_file(out_dir, "result.json", text.as_bytes())?);
    Ok(Artifacts { files })
}
