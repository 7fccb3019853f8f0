//! Counterfactual replay of coalitions over a window of trading days.

use rayon::prelude::*;
use serde::Serialize;

use super::market::{FeatureView, MarketSeries};
use super::metrics::{decision_to_position, sharpe_or_zero};
use super::BacktestError;
use crate::agents::{AgentOutput, AgentRoster, ExternalFeatures, TradeAction};
use crate::cgopo::Window;
use crate::coalition::Coalition;
use crate::graph::{AgentId, WorkflowGraph};
use crate::shapley::{
    attribution_from_viable, audit_executions, execute_coalition, ghm_execute, shapley_from_table, AttributionResult,
    GhmOptions, GhmStats,
};

/// One day's GHM run: sink decision per viable coalition plus the grand
/// coalition's per-agent outputs.
#[derive(Debug, Clone)]
pub struct DayEvaluation {
    pub day: usize,
    /// Position per viable coalition, aligned with the viable list.
    pub positions: Vec<i8>,
    /// Outputs of every agent when the whole system runs; `None` when the
    /// grand coalition is not viable.
    pub grand_outputs: Option<Vec<AgentOutput>>,
    pub stats: GhmStats,
}

#[derive(Debug, Clone)]
pub struct WindowEvaluation {
    pub days: Vec<DayEvaluation>,
    /// Daily strategy returns per viable coalition, `window.len() - 1` long.
    pub coalition_returns: Vec<Vec<f64>>,
    /// Raw Sharpe per viable coalition.
    pub values: Vec<f64>,
}

fn position_of(output: &AgentOutput) -> i8 {
    decision_to_position(output.action().unwrap_or(TradeAction::Hold))
}

/// Runs the GHM engine for one day with a fresh cache.
pub fn evaluate_day(
    graph: &WorkflowGraph,
    roster: &AgentRoster,
    viable: &[Coalition],
    episode: &ExternalFeatures,
    options: GhmOptions,
    audit: bool,
) -> Result<DayEvaluation, BacktestError> {
    let run = ghm_execute(graph, viable, roster, episode, options)?;
    if audit {
        audit_executions(graph, viable, &run).map_err(|key| BacktestError::InformationFlow {
            day: episode.day,
            agent: graph.name(key.agent).to_string(),
            configuration: key.configuration,
        })?;
    }
    let full = graph.all();
    let grand_outputs = viable.contains(&full).then(|| {
        graph
            .agents()
            .map(|a| {
                *run.output_for(graph, full, a)
                    .expect("grand coalition outputs are materialized")
            })
            .collect()
    });
    Ok(DayEvaluation {
        day: episode.day,
        positions: run.sink_outputs.iter().map(position_of).collect(),
        grand_outputs,
        stats: run.stats,
    })
}

/// Strategy returns of position series `positions` (one per decision day)
/// against the next-day market returns starting at `first_day`.
fn realized(series: &MarketSeries, first_day: usize, positions: impl Iterator<Item = i8>) -> Vec<f64> {
    positions
        .enumerate()
        .map(|(k, p)| f64::from(p) * series.next_return(first_day + k).expect("decision day has a next day"))
        .collect()
}

/// Evaluates every viable coalition on every day of `window`, in parallel
/// over days. Decisions on the last day of the window are made (and kept in
/// `days`) but earn nothing inside the window.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_window(
    graph: &WorkflowGraph,
    roster: &AgentRoster,
    series: &MarketSeries,
    features: &FeatureView,
    window: &Window,
    viable: &[Coalition],
    options: GhmOptions,
    audit: bool,
    rf_daily: f64,
) -> Result<WindowEvaluation, BacktestError> {
    if window.len() < 2 {
        return Err(BacktestError::InsufficientData {
            days: window.len(),
            needed: 2,
        });
    }
    let days: Vec<DayEvaluation> = (window.start..window.end)
        .into_par_iter()
        .map(|day| evaluate_day(graph, roster, viable, &features.external(series, day), options, audit))
        .collect::<Result<_, _>>()?;
    let decision_days = &days[..days.len() - 1];
    let coalition_returns: Vec<Vec<f64>> = (0..viable.len())
        .map(|i| realized(series, window.start, decision_days.iter().map(|d| d.positions[i])))
        .collect();
    let values = coalition_returns.iter().map(|r| sharpe_or_zero(r, rf_daily)).collect();
    Ok(WindowEvaluation {
        days,
        coalition_returns,
        values,
    })
}

/// Daily strategy returns of one coalition over `window` without the memo
/// cache: each member runs once per day, in topological order.
pub fn coalition_return_series(
    graph: &WorkflowGraph,
    coalition: Coalition,
    roster: &AgentRoster,
    series: &MarketSeries,
    features: &FeatureView,
    window: &Window,
) -> Result<Vec<f64>, BacktestError> {
    let mut positions = Vec::with_capacity(window.len().saturating_sub(1));
    for day in window.start..window.end.saturating_sub(1) {
        let (sink, _) = execute_coalition(graph, coalition, roster, &features.external(series, day))?;
        positions.push(sink.as_ref().map_or(0, position_of));
    }
    Ok(realized(series, window.start, positions.into_iter()))
}

/// Raw Sharpe of all `2^n` coalitions by direct replay, with the total
/// number of agent executions per day.
pub fn classical_window_values(
    graph: &WorkflowGraph,
    roster: &AgentRoster,
    series: &MarketSeries,
    features: &FeatureView,
    window: &Window,
    rf_daily: f64,
) -> Result<(Vec<f64>, u64), BacktestError> {
    let n = graph.agent_count();
    let rows: Vec<(f64, u64)> = (0..1u64 << n)
        .into_par_iter()
        .map(|bits| -> Result<(f64, u64), BacktestError> {
            let s = Coalition::from_bits(bits);
            let mut positions = Vec::with_capacity(window.len());
            let mut executions = 0;
            for day in window.start..window.end - 1 {
                let (sink, count) = execute_coalition(graph, s, roster, &features.external(series, day))?;
                positions.push(sink.as_ref().map_or(0, position_of));
                executions += count;
            }
            let returns = realized(series, window.start, positions.into_iter());
            Ok((sharpe_or_zero(&returns, rf_daily), executions))
        })
        .collect::<Result<_, _>>()?;
    let decision_days = (window.len() - 1) as u64;
    let executions: u64 = rows.iter().map(|r| r.1).sum();
    Ok((rows.into_iter().map(|r| r.0).collect(), executions / decision_days))
}

/// Classical and pruned attribution of the same window side by side.
#[derive(Debug, Clone, Serialize)]
pub struct EngineComparison {
    pub agents: Vec<String>,
    pub exact: AttributionResult,
    pub dag: AttributionResult,
    pub max_abs_diff: f64,
    pub classical_coalitions: u64,
    pub classical_executions_per_episode: u64,
    pub dag_coalitions: u64,
    pub dag_executions_per_episode: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn compare_engines(
    graph: &WorkflowGraph,
    roster: &AgentRoster,
    series: &MarketSeries,
    features: &FeatureView,
    window: &Window,
    viable: &[Coalition],
    options: GhmOptions,
    rf_daily: f64,
) -> Result<EngineComparison, BacktestError> {
    let n = graph.agent_count();
    let (table, classical_exec) = classical_window_values(graph, roster, series, features, window, rf_daily)?;
    let exact = AttributionResult {
        values: shapley_from_table(n, &table)?,
        coalition_evaluations: table.len() as u64,
        agent_executions: classical_exec,
        cache_hits: 0,
        elapsed: Default::default(),
    };
    let eval = evaluate_window(graph, roster, series, features, window, viable, options, true, rf_daily)?;
    let first = &eval.days[0].stats;
    let mut dag = attribution_from_viable(n, viable, &eval.values)?;
    dag.agent_executions = first.agent_executions;
    dag.cache_hits = first.cache_hits;
    Ok(EngineComparison {
        agents: graph.names().to_vec(),
        max_abs_diff: exact.max_abs_diff(&dag),
        classical_coalitions: exact.coalition_evaluations,
        classical_executions_per_episode: classical_exec,
        dag_coalitions: dag.coalition_evaluations,
        dag_executions_per_episode: first.agent_executions,
        exact,
        dag,
    })
}

/// Agent outputs of `day` as text, for history records.
pub fn describe_state(
    graph: &WorkflowGraph,
    agent: AgentId,
    outputs: &[AgentOutput],
    episode: &ExternalFeatures,
) -> String {
    if graph.is_source(agent) {
        let last = episode.closes.last().copied().unwrap_or(0.0);
        return format!(
            "sentiment={:.4} fundamental={:.4} close={:.4}",
            episode.sentiment, episode.fundamental, last
        );
    }
    graph
        .predecessors(agent)
        .into_iter()
        .map(|p| format!("{}={:+.4}", graph.name(p), outputs[p.index()].score()))
        .collect::<Vec<_>>()
        .join(" ")
}
