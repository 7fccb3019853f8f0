//! Exact credit assignment for layered multi-agent workflows.
//!
//! Shapley values are computed over viable coalitions only, with agent
//! outputs memoized by upstream configuration, and drive a prompt
//! optimization loop inside a windowed trading backtest.

pub mod agents;
pub mod backtest;
pub mod cgopo;
pub mod coalition;
pub mod graph;
pub mod shapley;

pub use agents::{AgentOutput, AgentRoster, MockAgent, PromptState, TradeAction};
pub use backtest::{BacktestConfig, BacktestError, MarketSeries, Regime, StrategyMetrics};
pub use cgopo::{CgopoConfig, MockReflector, Reflector, Window};
pub use coalition::{coalition_counts, enumerate_viable, Coalition, CoalitionCounts};
pub use graph::{AgentId, GraphError, WorkflowGraph};
pub use shapley::{classical_cost, predicted_cost, shapley_dag, shapley_exact, AttributionResult, ShapleyError};
