//! Windowed backtest: counterfactual coalition replay, Sharpe games and
//! optimization cycles over one symbol.

pub mod market;
pub mod metrics;
pub mod replay;
pub mod report;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRoster, PromptState};
use crate::cgopo::{
    run_cycle, CgopoConfig, CgopoError, CoalitionGame, HistoryRecord, HistoryStore, OptimizationCycleRecord, Reflector,
    Window,
};
use crate::coalition::{enumerate_viable, Coalition};
use crate::graph::{AgentId, WorkflowGraph};
use crate::shapley::{attribution_from_viable, GhmOptions, ShapleyError};

pub use market::{FeatureView, MarketSeries, Regime};
pub use metrics::StrategyMetrics;

use metrics::{buy_and_hold_positions, macd_positions, sma_crossover_positions, strategy_returns};
use replay::{describe_state, evaluate_window};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("line {line}: price must be positive")]
    NonPositivePrice { line: usize },
    #[error("line {line}: duplicate date {date}")]
    DuplicateDate { line: usize, date: NaiveDate },
    #[error("line {line}: dates out of order")]
    UnsortedDates { line: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error("no features for {date}")]
    MissingFeatures { date: NaiveDate },
    #[error("{days} trading days available, {needed} needed")]
    InsufficientData { days: usize, needed: usize },
    #[error("sharpe needs at least 2 returns, got {0}")]
    TooFewReturns(usize),
    #[error("day {day}: {agent} executed for configuration {configuration:?} no coalition demanded")]
    InformationFlow {
        day: usize,
        agent: String,
        configuration: Coalition,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error(transparent)]
    Cgopo(#[from] CgopoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub sma_fast: usize,
    pub sma_slow: usize,
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub macd_signal: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            sma_fast: 20,
            sma_slow: 50,
            macd_fast: 12,
            macd_slow: 26,
            macd_signal: 9,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BacktestConfig {
    pub window_len: usize,
    pub cgopo: CgopoConfig,
    pub rf_daily: f64,
    pub trade_cost: f64,
    pub parallelism: usize,
    /// Check every GHM execution against the demanded keys.
    pub audit: bool,
    pub ghm: GhmOptions,
    pub baselines: BaselineParams,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            window_len: 5,
            cgopo: CgopoConfig::default(),
            rf_daily: 0.0,
            trade_cost: 0.0,
            parallelism: 1,
            audit: true,
            ghm: GhmOptions::default(),
            baselines: BaselineParams::default(),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if self.window_len < 2 {
            return Err(BacktestError::Config(format!(
                "window_len must be at least 2, got {}",
                self.window_len
            )));
        }
        if self.parallelism < 1 {
            return Err(BacktestError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowCost {
    pub coalitions_total: u64,
    pub coalitions_evaluated: u64,
    pub agent_executions: u64,
    pub executions_per_day: u64,
    pub cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    pub window: Window,
    pub coalitions: Vec<Coalition>,
    /// Raw Sharpe per coalition; the characteristic function.
    pub coalition_sharpe: Vec<f64>,
    pub shapley: Vec<f64>,
    /// Grand coalition over the window's decision days.
    pub metrics: StrategyMetrics,
    pub cost: WindowCost,
    pub prompt_versions: Vec<u32>,
}

impl WindowReport {
    /// `v` of the full agent set.
    pub fn grand_value(&self, n: usize) -> f64 {
        let full = Coalition::full(n);
        self.coalitions
            .iter()
            .position(|&s| s == full)
            .map_or(0.0, |i| self.coalition_sharpe[i])
    }
}

/// A prompt as it stood after a change, for the prompt archive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptRevision {
    pub agent: AgentId,
    pub prompt: PromptState,
}

#[derive(Debug, Clone)]
pub struct PassResult {
    pub windows: Vec<WindowReport>,
    pub cycles: Vec<OptimizationCycleRecord>,
    /// Grand-coalition position for every decision day in the covered range.
    pub positions: Vec<i8>,
    pub returns: Vec<f64>,
    pub metrics: StrategyMetrics,
    pub history: Vec<HistoryRecord>,
    pub revisions: Vec<PromptRevision>,
    pub final_prompts: Vec<PromptState>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub metrics: StrategyMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub symbol: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub windows: usize,
    pub decision_days: usize,
    pub triggered_cycles: usize,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    pub optimized: PassResult,
    pub frozen: PassResult,
    pub summary: Summary,
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, BacktestError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| BacktestError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Full windows `[k * len, (k + 1) * len)`; a trailing partial window is dropped.
pub fn partition_windows(series: &MarketSeries, window_len: usize) -> Result<Vec<Window>, BacktestError> {
    if window_len < 2 {
        return Err(BacktestError::Config(format!(
            "window_len must be at least 2, got {window_len}"
        )));
    }
    let count = series.len() / window_len;
    if count == 0 {
        return Err(BacktestError::InsufficientData {
            days: series.len(),
            needed: window_len,
        });
    }
    Ok((0..count)
        .map(|id| {
            let start = id * window_len;
            let end = start + window_len;
            Window {
                id,
                start,
                end,
                start_date: series.date(start),
                end_date: series.date(end - 1),
            }
        })
        .collect())
}

/// One pass over all windows. With `optimize` each window ends in an
/// optimization cycle whose prompt changes apply from the next window on.
#[allow(clippy::too_many_arguments)]
pub fn run_pass<R: Reflector + ?Sized>(
    graph: &WorkflowGraph,
    roster: &AgentRoster,
    series: &MarketSeries,
    features: &FeatureView,
    windows: &[Window],
    config: &BacktestConfig,
    reflector: &R,
    optimize: bool,
) -> Result<PassResult, BacktestError> {
    let n = graph.agent_count();
    let viable = enumerate_viable(graph).map_err(ShapleyError::from)?;
    let mut roster = roster.clone();
    let mut history = HistoryStore::default();
    let mut reports = Vec::with_capacity(windows.len());
    let mut cycles = Vec::new();
    let mut positions = Vec::new();
    let mut revisions = Vec::new();

    for window in windows {
        let eval = evaluate_window(
            graph,
            &roster,
            series,
            features,
            window,
            &viable,
            config.ghm,
            config.audit,
            config.rf_daily,
        )?;
        let attribution = attribution_from_viable(n, &viable, &eval.values)?;
        let grand = viable.iter().position(|&s| s == graph.all());
        let grand_returns = grand.map(|i| eval.coalition_returns[i].clone()).unwrap_or_default();

        for (k, day) in eval.days.iter().enumerate() {
            let position = grand.map_or(0, |i| day.positions[i]);
            positions.push(position);
            if k + 1 == eval.days.len() {
                continue;
            }
            let Some(outputs) = &day.grand_outputs else { continue };
            let episode = features.external(series, day.day);
            for agent in graph.agents() {
                history.append(HistoryRecord {
                    day: day.day,
                    date: series.date(day.day),
                    agent,
                    state: describe_state(graph, agent, outputs, &episode),
                    action: outputs[agent.index()],
                    reward: grand_returns[k],
                });
            }
        }

        let executions: u64 = eval.days.iter().map(|d| d.stats.agent_executions).sum();
        reports.push(WindowReport {
            window: *window,
            coalitions: viable.clone(),
            coalition_sharpe: eval.values.clone(),
            shapley: attribution.values,
            metrics: StrategyMetrics::from_returns(&grand_returns, config.rf_daily),
            cost: WindowCost {
                coalitions_total: 1 << n,
                coalitions_evaluated: viable.len() as u64,
                agent_executions: executions,
                executions_per_day: eval.days[0].stats.agent_executions,
                cache_hits: eval.days.iter().map(|d| d.stats.cache_hits).sum(),
            },
            prompt_versions: roster.prompt_versions(),
        });

        if optimize {
            let game = CoalitionGame {
                coalitions: viable.clone(),
                values: eval.values,
            };
            let record = run_cycle(
                window.id,
                graph,
                &mut roster,
                &history,
                window,
                &game,
                reflector,
                &config.cgopo,
            )?;
            if let Some(lessons) = &record.lessons {
                revisions.push(PromptRevision {
                    agent: lessons.target,
                    prompt: roster.spec(lessons.target).prompt.clone(),
                });
            }
            cycles.push(record);
        }
    }

    let decision_days = positions.len().min(series.len() - 1);
    positions.truncate(decision_days);
    let next: Vec<f64> = (0..decision_days)
        .map(|d| series.next_return(d).expect("in range"))
        .collect();
    let returns = strategy_returns(&positions, &next, config.trade_cost);
    Ok(PassResult {
        windows: reports,
        cycles,
        metrics: StrategyMetrics::from_returns(&returns, config.rf_daily),
        positions,
        returns,
        history: history.records().to_vec(),
        revisions,
        final_prompts: roster.prompts(),
    })
}

/// Runs the optimized pass, the frozen-prompt pass and the baselines over
/// the same decision days.
pub fn run_backtest<R: Reflector + Sync + ?Sized>(
    graph: &WorkflowGraph,
    roster: &AgentRoster,
    series: &MarketSeries,
    features: &FeatureView,
    config: &BacktestConfig,
    reflector: &R,
) -> Result<BacktestOutcome, BacktestError> {
    config.validate()?;
    if features.len() != series.len() {
        return Err(BacktestError::Config(format!(
            "{} feature days for {} trading days",
            features.len(),
            series.len()
        )));
    }
    let windows = partition_windows(series, config.window_len)?;
    let (optimized, frozen) = with_threads(config.parallelism, || -> Result<_, BacktestError> {
        let optimized = run_pass(graph, roster, series, features, &windows, config, reflector, true)?;
        let frozen = run_pass(graph, roster, series, features, &windows, config, reflector, false)?;
        Ok((optimized, frozen))
    })??;

    let days = optimized.positions.len();
    let closes = series.closes();
    let next: Vec<f64> = (0..days).map(|d| series.next_return(d).expect("in range")).collect();
    let b = config.baselines;
    let baseline = |positions: Vec<i8>| {
        let returns = strategy_returns(&positions[..days], &next, config.trade_cost);
        StrategyMetrics::from_returns(&returns, config.rf_daily)
    };
    let rows = vec![
        SummaryRow {
            strategy: "CG-OPO".into(),
            metrics: optimized.metrics,
        },
        SummaryRow {
            strategy: "frozen".into(),
            metrics: frozen.metrics,
        },
        SummaryRow {
            strategy: "buy&hold".into(),
            metrics: baseline(buy_and_hold_positions(closes.len())),
        },
        SummaryRow {
            strategy: "MACD".into(),
            metrics: baseline(macd_positions(&closes, b.macd_fast, b.macd_slow, b.macd_signal)),
        },
        SummaryRow {
            strategy: "SMA".into(),
            metrics: baseline(sma_crossover_positions(&closes, b.sma_fast, b.sma_slow)),
        },
    ];
    let last = windows.last().expect("at least one window");
    let summary = Summary {
        symbol: series.symbol.clone(),
        start: windows[0].start_date,
        end: last.end_date,
        windows: windows.len(),
        decision_days: days,
        triggered_cycles: optimized.cycles.iter().filter(|c| c.triggered).count(),
        rows,
    };
    Ok(BacktestOutcome {
        optimized,
        frozen,
        summary,
    })
}

/// Index of the first window whose cycle changed a prompt.
pub fn first_triggered_window(cycles: &[OptimizationCycleRecord]) -> Option<usize> {
    cycles.iter().find(|c| c.triggered).map(|c| c.window.id)
}
